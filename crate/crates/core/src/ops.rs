//! Forward and backward array kernels behind the graph operations.
//!
//! Kernels are plain functions over row-major data. Shape validation happens
//! in `graph.rs`; the functions here assume conformant shapes (debug asserts
//! guard that assumption) and keep loops in a fixed order so results are
//! bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{num, Element, Tensor};

/// Squashing nonlinearity variants. `Cited` is `‖s‖²/(1+‖s‖²)·s/‖s‖`, the
/// monotone form; `PaperLiteral` is `‖s‖/(1+‖s‖²)·s/‖s‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SquashForm {
    #[default]
    Cited,
    PaperLiteral,
}

// ── elementwise ─────────────────────────────────────────────────────

pub(crate) fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

// ── reductions ──────────────────────────────────────────────────────

/// Splits a shape at `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn sum_axis_fwd<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape.remove(axis);
    let mut out = vec![T::zero(); outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            let dst = o * inner;
            for i in 0..inner {
                out[dst + i] = out[dst + i] + xd[base + i];
            }
        }
    }
    if out_shape.is_empty() {
        Tensor::scalar(out[0])
    } else {
        Tensor::new(out_shape, out).unwrap()
    }
}

pub(crate) fn sum_axis_bwd<T: Element>(g: &Tensor<T>, in_shape: &[usize], axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(in_shape, axis);
    let gd = g.data();
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            let src = o * inner;
            for i in 0..inner {
                dx[base + i] = gd[src + i];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).unwrap()
}

// ── softmax ─────────────────────────────────────────────────────────

pub(crate) fn softmax_fwd<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut hi = xd[at(0)];
            for a in 1..len {
                if xd[at(a)] > hi {
                    hi = xd[at(a)];
                }
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (xd[at(a)] - hi).exp();
                out[at(a)] = e;
                total = total + e;
            }
            for a in 0..len {
                out[at(a)] = out[at(a)] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(crate) fn softmax_bwd<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(y.shape(), axis);
    let yd = y.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot = dot + gd[at(a)] * yd[at(a)];
            }
            for a in 0..len {
                dx[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

// ── norms and squashing (last axis is the capsule axis) ─────────────

pub(crate) fn l2_norm_fwd<T: Element>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let u = *x.shape().last().unwrap();
    let rows = x.len() / u;
    let xd = x.data();
    let mut out = vec![T::zero(); rows];
    for r in 0..rows {
        let mut n2 = eps;
        for &v in &xd[r * u..(r + 1) * u] {
            n2 = n2 + v * v;
        }
        out[r] = n2.sqrt();
    }
    let out_shape = x.shape()[..x.rank() - 1].to_vec();
    if out_shape.is_empty() {
        Tensor::scalar(out[0])
    } else {
        Tensor::new(out_shape, out).unwrap()
    }
}

pub(crate) fn l2_norm_bwd<T: Element>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let u = *x.shape().last().unwrap();
    let rows = x.len() / u;
    let xd = x.data();
    let yd = y.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); xd.len()];
    for r in 0..rows {
        let scale = gd[r] / yd[r];
        for i in 0..u {
            dx[r * u + i] = scale * xd[r * u + i];
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

pub(crate) fn squash_fwd<T: Element>(x: &Tensor<T>, form: SquashForm, eps: T) -> Tensor<T> {
    let u = *x.shape().last().unwrap();
    let rows = x.len() / u;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for r in 0..rows {
        let mut n2 = eps;
        for &v in &xd[r * u..(r + 1) * u] {
            n2 = n2 + v * v;
        }
        let n = n2.sqrt();
        let c = match form {
            SquashForm::Cited => n / (T::one() + n2),
            SquashForm::PaperLiteral => T::one() / (T::one() + n2),
        };
        for i in 0..u {
            out[r * u + i] = c * xd[r * u + i];
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(crate) fn squash_bwd<T: Element>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    form: SquashForm,
    eps: T,
) -> Tensor<T> {
    let u = *x.shape().last().unwrap();
    let rows = x.len() / u;
    let xd = x.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); xd.len()];
    for r in 0..rows {
        let row = &xd[r * u..(r + 1) * u];
        let grow = &gd[r * u..(r + 1) * u];
        let mut n2 = eps;
        let mut dot = T::zero();
        for i in 0..u {
            n2 = n2 + row[i] * row[i];
            dot = dot + row[i] * grow[i];
        }
        let n = n2.sqrt();
        let denom = (T::one() + n2) * (T::one() + n2);
        let (c, dc_dn) = match form {
            SquashForm::Cited => (n / (T::one() + n2), (T::one() - n2) / denom),
            SquashForm::PaperLiteral => {
                (T::one() / (T::one() + n2), -(n + n) / denom)
            }
        };
        // dv_k/ds_u = δ_ku·c + s_k·c'(n)·s_u/n
        let coef = dot * dc_dn / n;
        for i in 0..u {
            dx[r * u + i] = c * grow[i] + coef * row[i];
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

// ── affine (dense) ──────────────────────────────────────────────────

pub(crate) fn affine_fwd<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let d = w.shape()[1];
    let l = w.shape()[0];
    let s = x.len() / d;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![T::zero(); s * l];
    for si in 0..s {
        let xrow = &xd[si * d..(si + 1) * d];
        for li in 0..l {
            let wrow = &wd[li * d..(li + 1) * d];
            let mut acc = bd[li];
            for (xi, wi) in xrow.iter().zip(wrow) {
                acc = acc + *xi * *wi;
            }
            out[si * l + li] = acc;
        }
    }
    let out_shape: Vec<usize> = if x.rank() == 1 {
        vec![l]
    } else {
        let mut sh = x.shape()[..x.rank() - 1].to_vec();
        sh.push(l);
        sh
    };
    Tensor::new(out_shape, out).unwrap()
}

pub(crate) fn affine_bwd<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = w.shape()[1];
    let l = w.shape()[0];
    let s = x.len() / d;
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); l];
    for si in 0..s {
        let xrow = &xd[si * d..(si + 1) * d];
        let grow = &gd[si * l..(si + 1) * l];
        let dxrow = &mut dx[si * d..(si + 1) * d];
        for li in 0..l {
            let gv = grow[li];
            db[li] = db[li] + gv;
            let wrow = &wd[li * d..(li + 1) * d];
            let dwrow = &mut dw[li * d..(li + 1) * d];
            for i in 0..d {
                dxrow[i] = dxrow[i] + gv * wrow[i];
                dwrow[i] = dwrow[i] + gv * xrow[i];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![l], db).unwrap(),
    )
}

// ── 2-d convolution (same padding, odd kernels) ─────────────────────

pub(crate) fn conv2d_out_hw(
    h: usize,
    w: usize,
    stride: (usize, usize),
) -> (usize, usize) {
    ((h + stride.0 - 1) / stride.0, (w + stride.1 - 1) / stride.1)
}

struct ConvGeom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    /// Output-row range for kernel row `kh` such that the input row is valid.
    fn oh_range(&self, kh: usize) -> (usize, usize) {
        let lo = if kh >= self.ph {
            0
        } else {
            (self.ph - kh + self.sh - 1) / self.sh
        };
        let hi = if self.h - 1 + self.ph >= kh {
            core::cmp::min(self.ho, (self.h - 1 + self.ph - kh) / self.sh + 1)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn ow_range(&self, kw: usize) -> (usize, usize) {
        let lo = if kw >= self.pw {
            0
        } else {
            (self.pw - kw + self.sw - 1) / self.sw
        };
        let hi = if self.w - 1 + self.pw >= kw {
            core::cmp::min(self.wo, (self.w - 1 + self.pw - kw) / self.sw + 1)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv_geom(h: usize, w: usize, kh: usize, kw: usize, stride: (usize, usize)) -> ConvGeom {
    let (ho, wo) = conv2d_out_hw(h, w, stride);
    ConvGeom {
        h,
        w,
        ho,
        wo,
        sh: stride.0,
        sw: stride.1,
        ph: (kh - 1) / 2,
        pw: (kw - 1) / 2,
    }
}

pub(crate) fn conv2d_fwd<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
) -> Tensor<T> {
    let (bsz, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let geo = conv_geom(h, w, kh, kw, stride);
    let (ho, wo) = (geo.ho, geo.wo);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); bsz * cout * ho * wo];
    for b in 0..bsz {
        for o in 0..cout {
            let oplane = &mut out[(b * cout + o) * ho * wo..(b * cout + o + 1) * ho * wo];
            if let Some(bt) = bias {
                let bv = bt.data()[o];
                for v in oplane.iter_mut() {
                    *v = bv;
                }
            }
            for c in 0..cin {
                let xplane = &xd[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                for ki in 0..kh {
                    let (oh_lo, oh_hi) = geo.oh_range(ki);
                    for kj in 0..kw {
                        let wgt = kd[((o * cin + c) * kh + ki) * kw + kj];
                        let (ow_lo, ow_hi) = geo.ow_range(kj);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * geo.sh + ki - geo.ph;
                            let xrow = &xplane[ih * w..ih * w + w];
                            let orow = &mut oplane[oh * wo..oh * wo + wo];
                            if geo.sw == 1 {
                                let iw0 = ow_lo + kj - geo.pw;
                                let n = ow_hi - ow_lo;
                                for (ov, xv) in
                                    orow[ow_lo..ow_hi].iter_mut().zip(&xrow[iw0..iw0 + n])
                                {
                                    *ov = *ov + wgt * *xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * geo.sw + kj - geo.pw;
                                    orow[ow] = orow[ow] + wgt * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz, cout, ho, wo], out).unwrap()
}

pub(crate) fn conv2d_bwd<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    has_bias: bool,
    stride: (usize, usize),
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (bsz, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let geo = conv_geom(h, w, kh, kw, stride);
    let (ho, wo) = (geo.ho, geo.wo);
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut db = vec![T::zero(); cout];
    for b in 0..bsz {
        for o in 0..cout {
            let gplane = &gd[(b * cout + o) * ho * wo..(b * cout + o + 1) * ho * wo];
            if has_bias {
                let mut acc = T::zero();
                for &gv in gplane {
                    acc = acc + gv;
                }
                db[o] = db[o] + acc;
            }
            for c in 0..cin {
                let xplane = &xd[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                let dxplane_base = (b * cin + c) * h * w;
                for ki in 0..kh {
                    let (oh_lo, oh_hi) = geo.oh_range(ki);
                    for kj in 0..kw {
                        let wgt = kd[((o * cin + c) * kh + ki) * kw + kj];
                        let (ow_lo, ow_hi) = geo.ow_range(kj);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let mut wacc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * geo.sh + ki - geo.ph;
                            let grow = &gplane[oh * wo..oh * wo + wo];
                            if geo.sw == 1 {
                                let iw0 = ow_lo + kj - geo.pw;
                                let n = ow_hi - ow_lo;
                                let xrow = &xplane[ih * w + iw0..ih * w + iw0 + n];
                                let dxrow =
                                    &mut dx[dxplane_base + ih * w + iw0..dxplane_base + ih * w + iw0 + n];
                                for i in 0..n {
                                    let gv = grow[ow_lo + i];
                                    wacc = wacc + gv * xrow[i];
                                    dxrow[i] = dxrow[i] + wgt * gv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * geo.sw + kj - geo.pw;
                                    let gv = grow[ow];
                                    wacc = wacc + gv * xplane[ih * w + iw];
                                    dx[dxplane_base + ih * w + iw] =
                                        dx[dxplane_base + ih * w + iw] + wgt * gv;
                                }
                            }
                        }
                        let slot = ((o * cin + c) * kh + ki) * kw + kj;
                        dk[slot] = dk[slot] + wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(k.shape().to_vec(), dk).unwrap(),
        has_bias.then(|| Tensor::new(vec![cout], db).unwrap()),
    )
}

// ── max pooling (ceil mode, ties to the first element) ──────────────

pub(crate) fn maxpool2d_fwd<T: Element>(
    x: &Tensor<T>,
    window: (usize, usize),
) -> (Tensor<T>, Vec<usize>) {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wh, ww) = window;
    let ho = (h + wh - 1) / wh;
    let wo = (w + ww - 1) / ww;
    let xd = x.data();
    let mut out = vec![T::zero(); bsz * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for bc in 0..bsz * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_at = 0usize;
                for ih in oh * wh..core::cmp::min((oh + 1) * wh, h) {
                    for iw in ow * ww..core::cmp::min((ow + 1) * ww, w) {
                        let v = plane[ih * w + iw];
                        if v > best {
                            best = v;
                            best_at = ih * w + iw;
                        }
                    }
                }
                let slot = (bc * ho + oh) * wo + ow;
                out[slot] = best;
                arg[slot] = bc * h * w + best_at;
            }
        }
    }
    (Tensor::new(vec![bsz, c, ho, wo], out).unwrap(), arg)
}

pub(crate) fn maxpool2d_bwd<T: Element>(
    in_shape: &[usize],
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for (slot, &src) in argmax.iter().enumerate() {
        dx[src] = dx[src] + g.data()[slot];
    }
    Tensor::new(in_shape.to_vec(), dx).unwrap()
}

// ── batch normalization over (batch, spatial) per channel ───────────

pub(crate) struct BnForward<T> {
    pub y: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub(crate) fn batchnorm_train_fwd<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> BnForward<T> {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = (bsz * h * w) as f64;
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for b in 0..bsz {
            let plane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for &v in plane {
                acc += v.to_f64().unwrap();
            }
        }
        let mu = acc / m;
        let mut vacc = 0.0f64;
        for b in 0..bsz {
            let plane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for &v in plane {
                let d = v.to_f64().unwrap() - mu;
                vacc += d * d;
            }
        }
        mean[ci] = num(mu);
        var[ci] = num(vacc / m);
    }
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..bsz {
        for ci in 0..c {
            let inv = T::one() / (var[ci] + eps).sqrt();
            let (ga, be, mu) = (gamma.data()[ci], beta.data()[ci], mean[ci]);
            let base = (b * c + ci) * h * w;
            for i in 0..h * w {
                y[base + i] = ga * (xd[base + i] - mu) * inv + be;
            }
        }
    }
    BnForward {
        y: Tensor::new(x.shape().to_vec(), y).unwrap(),
        mean: Tensor::new(vec![c], mean).unwrap(),
        var: Tensor::new(vec![c], var).unwrap(),
    }
}

pub(crate) fn batchnorm_train_bwd<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = num::<T>((bsz * h * w) as f64);
    let xd = x.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let mu = mean.data()[ci];
        let inv = T::one() / (var.data()[ci] + eps).sqrt();
        let mut sum_g = T::zero();
        let mut sum_gxh = T::zero();
        for b in 0..bsz {
            let base = (b * c + ci) * h * w;
            for i in 0..h * w {
                let xh = (xd[base + i] - mu) * inv;
                sum_g = sum_g + gd[base + i];
                sum_gxh = sum_gxh + gd[base + i] * xh;
            }
        }
        dgamma[ci] = sum_gxh;
        dbeta[ci] = sum_g;
        let scale = gamma.data()[ci] * inv / m;
        for b in 0..bsz {
            let base = (b * c + ci) * h * w;
            for i in 0..h * w {
                let xh = (xd[base + i] - mu) * inv;
                dx[base + i] = scale * (m * gd[base + i] - sum_g - xh * sum_gxh);
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

pub(crate) fn batchnorm_infer_fwd<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let (bsz, c, hw) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2] * x.shape()[3],
    );
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..bsz {
        for ci in 0..c {
            let inv = T::one() / (var.data()[ci] + eps).sqrt();
            let (ga, be, mu) = (gamma.data()[ci], beta.data()[ci], mean.data()[ci]);
            let base = (b * c + ci) * hw;
            for i in 0..hw {
                y[base + i] = ga * (xd[base + i] - mu) * inv + be;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y).unwrap()
}

pub(crate) fn batchnorm_infer_bwd<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (bsz, c, hw) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2] * x.shape()[3],
    );
    let xd = x.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let inv = T::one() / (var.data()[ci] + eps).sqrt();
        let mu = mean.data()[ci];
        let ga = gamma.data()[ci];
        for b in 0..bsz {
            let base = (b * c + ci) * hw;
            for i in 0..hw {
                let xh = (xd[base + i] - mu) * inv;
                dgamma[ci] = dgamma[ci] + gd[base + i] * xh;
                dbeta[ci] = dbeta[ci] + gd[base + i];
                dx[base + i] = gd[base + i] * ga * inv;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

// ── capsule contractions ────────────────────────────────────────────

/// û[s,m,n,·] = W[n,m]·u[s,m,·] for every slice s, input capsule m, output
/// capsule n.
pub(crate) fn capsule_predict_fwd<T: Element>(w: &Tensor<T>, u: &Tensor<T>) -> Tensor<T> {
    let (n, m, uo, ui) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let s = u.shape()[0];
    let wd = w.data();
    let ud = u.data();
    let mut out = vec![T::zero(); s * m * n * uo];
    for si in 0..s {
        for mi in 0..m {
            let urow = &ud[(si * m + mi) * ui..(si * m + mi + 1) * ui];
            for ni in 0..n {
                let wbase = ((ni * m + mi) * uo) * ui;
                let obase = ((si * m + mi) * n + ni) * uo;
                for oi in 0..uo {
                    let wrow = &wd[wbase + oi * ui..wbase + (oi + 1) * ui];
                    let mut acc = T::zero();
                    for (uv, wv) in urow.iter().zip(wrow) {
                        acc = acc + *uv * *wv;
                    }
                    out[obase + oi] = acc;
                }
            }
        }
    }
    Tensor::new(vec![s, m, n, uo], out).unwrap()
}

pub(crate) fn capsule_predict_bwd<T: Element>(
    w: &Tensor<T>,
    u: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, m, uo, ui) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let s = u.shape()[0];
    let wd = w.data();
    let ud = u.data();
    let gd = g.data();
    let mut dw = vec![T::zero(); wd.len()];
    let mut du = vec![T::zero(); ud.len()];
    for si in 0..s {
        for mi in 0..m {
            let ubase = (si * m + mi) * ui;
            for ni in 0..n {
                let wbase = ((ni * m + mi) * uo) * ui;
                let gbase = ((si * m + mi) * n + ni) * uo;
                for oi in 0..uo {
                    let gv = gd[gbase + oi];
                    for ii in 0..ui {
                        dw[wbase + oi * ui + ii] = dw[wbase + oi * ui + ii] + gv * ud[ubase + ii];
                        du[ubase + ii] = du[ubase + ii] + gv * wd[wbase + oi * ui + ii];
                    }
                }
            }
        }
    }
    (
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(u.shape().to_vec(), du).unwrap(),
    )
}

/// s[s,n,·] = Σ_m α[s,m,n]·û[s,m,n,·]
pub(crate) fn coupling_sum_fwd<T: Element>(alpha: &Tensor<T>, uhat: &Tensor<T>) -> Tensor<T> {
    let (s, m, n, uo) = (
        uhat.shape()[0],
        uhat.shape()[1],
        uhat.shape()[2],
        uhat.shape()[3],
    );
    let ad = alpha.data();
    let ud = uhat.data();
    let mut out = vec![T::zero(); s * n * uo];
    for si in 0..s {
        for mi in 0..m {
            for ni in 0..n {
                let a = ad[(si * m + mi) * n + ni];
                let ubase = ((si * m + mi) * n + ni) * uo;
                let obase = (si * n + ni) * uo;
                for oi in 0..uo {
                    out[obase + oi] = out[obase + oi] + a * ud[ubase + oi];
                }
            }
        }
    }
    Tensor::new(vec![s, n, uo], out).unwrap()
}

pub(crate) fn coupling_sum_bwd<T: Element>(
    alpha: &Tensor<T>,
    uhat: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (s, m, n, uo) = (
        uhat.shape()[0],
        uhat.shape()[1],
        uhat.shape()[2],
        uhat.shape()[3],
    );
    let ad = alpha.data();
    let ud = uhat.data();
    let gd = g.data();
    let mut da = vec![T::zero(); ad.len()];
    let mut du = vec![T::zero(); ud.len()];
    for si in 0..s {
        for mi in 0..m {
            for ni in 0..n {
                let slot = (si * m + mi) * n + ni;
                let ubase = slot * uo;
                let gbase = (si * n + ni) * uo;
                let a = ad[slot];
                let mut acc = T::zero();
                for oi in 0..uo {
                    let gv = gd[gbase + oi];
                    acc = acc + gv * ud[ubase + oi];
                    du[ubase + oi] = du[ubase + oi] + a * gv;
                }
                da[slot] = acc;
            }
        }
    }
    (
        Tensor::new(alpha.shape().to_vec(), da).unwrap(),
        Tensor::new(uhat.shape().to_vec(), du).unwrap(),
    )
}

/// a[s,m,n] = v[s,n,·]·û[s,m,n,·]
pub(crate) fn agreement_fwd<T: Element>(v: &Tensor<T>, uhat: &Tensor<T>) -> Tensor<T> {
    let (s, m, n, uo) = (
        uhat.shape()[0],
        uhat.shape()[1],
        uhat.shape()[2],
        uhat.shape()[3],
    );
    let vd = v.data();
    let ud = uhat.data();
    let mut out = vec![T::zero(); s * m * n];
    for si in 0..s {
        for mi in 0..m {
            for ni in 0..n {
                let ubase = ((si * m + mi) * n + ni) * uo;
                let vbase = (si * n + ni) * uo;
                let mut acc = T::zero();
                for oi in 0..uo {
                    acc = acc + vd[vbase + oi] * ud[ubase + oi];
                }
                out[(si * m + mi) * n + ni] = acc;
            }
        }
    }
    Tensor::new(vec![s, m, n], out).unwrap()
}

pub(crate) fn agreement_bwd<T: Element>(
    v: &Tensor<T>,
    uhat: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (s, m, n, uo) = (
        uhat.shape()[0],
        uhat.shape()[1],
        uhat.shape()[2],
        uhat.shape()[3],
    );
    let vd = v.data();
    let ud = uhat.data();
    let gd = g.data();
    let mut dv = vec![T::zero(); vd.len()];
    let mut du = vec![T::zero(); ud.len()];
    for si in 0..s {
        for mi in 0..m {
            for ni in 0..n {
                let gv = gd[(si * m + mi) * n + ni];
                let ubase = ((si * m + mi) * n + ni) * uo;
                let vbase = (si * n + ni) * uo;
                for oi in 0..uo {
                    dv[vbase + oi] = dv[vbase + oi] + gv * ud[ubase + oi];
                    du[ubase + oi] = du[ubase + oi] + gv * vd[vbase + oi];
                }
            }
        }
    }
    (
        Tensor::new(v.shape().to_vec(), dv).unwrap(),
        Tensor::new(uhat.shape().to_vec(), du).unwrap(),
    )
}

// ── axis permutation ────────────────────────────────────────────────

pub(crate) fn permute_fwd<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out = vec![T::zero(); x.len()];
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &ax) in axes.iter().enumerate() {
            src += idx[i] * in_strides[ax];
        }
        *slot = xd[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
