//! Signal-processing primitives: radix-2 FFT, Hann window, mel filterbank,
//! band-limited resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{num, Element};

/// Iterative radix-2 FFT with precomputed twiddles.
pub struct Radix2Fft<T> {
    n: usize,
    // twiddles for all stages, stage by stage: stage with width `len`
    // contributes `len/2` entries
    twiddles: Vec<(T, T)>,
}

impl<T: Element> Radix2Fft<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(CoreError::invalid(
                "fft",
                alloc::format!("length {n} is not a power of two"),
            ));
        }
        let mut twiddles = Vec::with_capacity(n.saturating_sub(1));
        let mut len = 2;
        while len <= n {
            for j in 0..len / 2 {
                let angle = -2.0 * core::f64::consts::PI * j as f64 / len as f64;
                twiddles.push((num(angle.cos()), num(angle.sin())));
            }
            len <<= 1;
        }
        Ok(Radix2Fft { n, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform of `re + i*im`.
    pub fn forward(&self, re: &mut [T], im: &mut [T]) {
        assert_eq!(re.len(), self.n);
        assert_eq!(im.len(), self.n);
        // bit-reversal permutation
        let bits = self.n.trailing_zeros();
        for i in 0..self.n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        let mut tw_base = 0;
        while len <= self.n {
            let half = len / 2;
            for start in (0..self.n).step_by(len) {
                for j in 0..half {
                    let (wr, wi) = self.twiddles[tw_base + j];
                    let (ar, ai) = (re[start + j], im[start + j]);
                    let (br, bi) = (re[start + j + half], im[start + j + half]);
                    let tr = wr * br - wi * bi;
                    let ti = wr * bi + wi * br;
                    re[start + j] = ar + tr;
                    im[start + j] = ai + ti;
                    re[start + j + half] = ar - tr;
                    im[start + j + half] = ai - ti;
                }
            }
            tw_base += half;
            len <<= 1;
        }
    }
}

/// Periodic Hann window.
pub fn hann_window<T: Element>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let x = 2.0 * core::f64::consts::PI * i as f64 / n as f64;
            num(0.5 * (1.0 - x.cos()))
        })
        .collect()
}

/// HTK mel scale: `2595·log10(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    use num_traits::Float;
    2595.0 * Float::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    use num_traits::Float;
    700.0 * (Float::powf(10.0, mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over magnitude-spectrum bins (peak weight 1).
pub struct MelFilterbank<T> {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<T>,
    centers_hz: Vec<f64>,
}

impl<T: Element> MelFilterbank<T> {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels == 0 {
            return Err(CoreError::invalid("mel", "need at least one band"));
        }
        if !(fmin >= 0.0 && fmax > fmin && fmax <= sample_rate / 2.0 + 1e-9) {
            return Err(CoreError::invalid(
                "mel",
                alloc::format!("invalid band edges {fmin}..{fmax} at rate {sample_rate}"),
            ));
        }
        let n_bins = n_fft / 2 + 1;
        let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![T::zero(); n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for bin in 0..n_bins {
                let f = bin as f64 * sample_rate / n_fft as f64;
                let w = if f <= left || f >= right {
                    0.0
                } else if f <= center {
                    (f - left) / (center - left)
                } else {
                    (right - f) / (right - center)
                };
                if w > 0.0 {
                    weights[m * n_bins + bin] = num(w);
                }
            }
        }
        Ok(MelFilterbank {
            n_mels,
            n_bins,
            weights,
            centers_hz: edges_hz[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// Center frequency of band `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.centers_hz[m]
    }

    pub fn apply(&self, spectrum: &[T]) -> Vec<T> {
        debug_assert_eq!(spectrum.len(), self.n_bins);
        (0..self.n_mels)
            .map(|m| {
                let row = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
                let mut acc = T::zero();
                for (w, s) in row.iter().zip(spectrum) {
                    acc = acc + *w * *s;
                }
                acc
            })
            .collect()
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = core::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel (16 zero
/// crossings each side at the lower of the two rates). The 1:1 case returns
/// the input bit-exactly; output length is `round(n·dst/src)`.
pub fn resample<T: Element>(signal: &[T], src_rate: u32, dst_rate: u32) -> Result<Vec<T>> {
    if signal.is_empty() {
        return Err(CoreError::invalid("resample", "empty signal"));
    }
    if src_rate == 0 || dst_rate == 0 {
        return Err(CoreError::invalid("resample", "rates must be positive"));
    }
    if src_rate == dst_rate {
        return Ok(signal.to_vec());
    }
    let n = signal.len();
    let out_len = ((n as u64 * dst_rate as u64 + src_rate as u64 / 2) / src_rate as u64) as usize;
    let cutoff = (dst_rate as f64 / src_rate as f64).min(1.0);
    let half_width = 16.0 / cutoff;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let t = i as f64 * src_rate as f64 / dst_rate as f64;
        let lo = ((t - half_width).ceil().max(0.0)) as usize;
        let hi = ((t + half_width).floor().min((n - 1) as f64)) as usize;
        let mut acc = 0.0f64;
        for j in lo..=hi {
            let u = t - j as f64;
            let window = 0.5 * (1.0 + (core::f64::consts::PI * u / half_width).cos());
            acc += signal[j].to_f64().unwrap() * cutoff * sinc(cutoff * u) * window;
        }
        out.push(num(acc));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn fft_matches_naive_dft() {
        let n = 64;
        let mut r = rng::seeded(41, rng::stream::CHECK);
        let signal: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let mut re = signal.clone();
        let mut im = vec![0.0; n];
        Radix2Fft::new(n).unwrap().forward(&mut re, &mut im);
        for k in 0..n {
            let mut er = 0.0;
            let mut ei = 0.0;
            for (j, &x) in signal.iter().enumerate() {
                let a = -2.0 * core::f64::consts::PI * (k * j) as f64 / n as f64;
                er += x * a.cos();
                ei += x * a.sin();
            }
            assert!((re[k] - er).abs() < 1e-9, "bin {k}: {} vs {er}", re[k]);
            assert!((im[k] - ei).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        assert!(Radix2Fft::<f32>::new(48).is_err());
        assert!(Radix2Fft::<f32>::new(0).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_its_bin() {
        let n = 1024;
        let fft = Radix2Fft::<f64>::new(n).unwrap();
        let k0 = 37;
        let mut re: Vec<f64> = (0..n)
            .map(|i| (2.0 * core::f64::consts::PI * k0 as f64 * i as f64 / n as f64).sin())
            .collect();
        let mut im = vec![0.0; n];
        fft.forward(&mut re, &mut im);
        let mags: Vec<f64> = re
            .iter()
            .zip(&im)
            .take(n / 2 + 1)
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect();
        let peak = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, k0);
    }

    #[test]
    fn mel_scale_roundtrip_and_monotone_centers() {
        for hz in [0.0, 440.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
        }
        let fb = MelFilterbank::<f32>::new(64, 1024, 16000.0, 0.0, 8000.0).unwrap();
        for m in 1..64 {
            assert!(fb.center_hz(m) > fb.center_hz(m - 1));
        }
    }

    #[test]
    fn filterbank_peaks_at_band_center() {
        let fb = MelFilterbank::<f64>::new(64, 1024, 16000.0, 0.0, 8000.0).unwrap();
        let m = 32;
        let center = fb.center_hz(m);
        // place all spectral energy at the bin closest to the band center
        let bin = (center * 1024.0 / 16000.0).round() as usize;
        let mut spectrum = vec![0.0; 513];
        spectrum[bin] = 1.0;
        let out = fb.apply(&spectrum);
        let argmax = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, m);
    }

    #[test]
    fn resample_identity_rate_is_bit_exact() {
        let signal: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.01).sin()).collect();
        let out = resample(&signal, 16000, 16000).unwrap();
        assert_eq!(out, signal);
    }

    #[test]
    fn resample_length_contract() {
        let signal = vec![0.0f32; 320_000];
        let out = resample(&signal, 32000, 16000).unwrap();
        assert_eq!(out.len(), 160_000);
    }

    #[test]
    fn resample_rejects_empty_input() {
        assert!(resample::<f32>(&[], 32000, 16000).is_err());
    }

    #[test]
    fn downsampled_tone_keeps_its_spectral_peak() {
        // 1 kHz tone at 32 kHz -> 16 kHz; FFT-peak oracle within one bin
        let src_rate = 32000u32;
        let n = 32000;
        let tone: Vec<f64> = (0..n)
            .map(|i| (2.0 * core::f64::consts::PI * 1000.0 * i as f64 / src_rate as f64).sin())
            .collect();
        let out = resample(&tone, src_rate, 16000).unwrap();
        let m = 8192;
        let fft = Radix2Fft::<f64>::new(m).unwrap();
        let win = hann_window::<f64>(m);
        let mut re: Vec<f64> = out[2000..2000 + m]
            .iter()
            .zip(&win)
            .map(|(x, w)| x * w)
            .collect();
        let mut im = vec![0.0; m];
        fft.forward(&mut re, &mut im);
        let peak = (0..m / 2 + 1)
            .max_by(|&a, &b| {
                let ma = re[a] * re[a] + im[a] * im[a];
                let mb = re[b] * re[b] + im[b] * im[b];
                ma.partial_cmp(&mb).unwrap()
            })
            .unwrap();
        let expected = (1000.0 * m as f64 / 16000.0).round() as usize;
        assert!(
            peak.abs_diff(expected) <= 1,
            "peak bin {peak}, expected ~{expected}"
        );
    }
}
