//! Event extraction from probability curves: thresholding, morphological
//! closing, and run detection.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{Element, Tensor};

/// Detection post-processing parameters. `tag_threshold` gates clip-level
/// tags (τ1), `frame_threshold` binarizes slice curves (τ2); the closing uses
/// a flat dilation element of `dilation` slices followed by erosion with
/// `erosion` slices.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PostprocessConfig {
    pub tag_threshold: f64,
    pub frame_threshold: f64,
    pub dilation: usize,
    pub erosion: usize,
    /// Seconds covered by one time slice (clip duration / slice count).
    pub slice_duration: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            tag_threshold: 0.3,
            frame_threshold: 0.6,
            dilation: 10,
            erosion: 5,
            slice_duration: 1.0 / 3.0,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tag_threshold", self.tag_threshold),
            ("frame_threshold", self.frame_threshold),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(CoreError::invalid(
                    "postprocess_config",
                    alloc::format!("{name} must lie strictly between 0 and 1"),
                ));
            }
        }
        if self.slice_duration <= 0.0 {
            return Err(CoreError::invalid(
                "postprocess_config",
                "slice duration must be positive",
            ));
        }
        Ok(())
    }
}

/// A detected (or annotated) sound event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
}

/// Clip-level tag decision: classes with probability strictly above the
/// threshold, ascending.
pub fn tag_decision<T: Element>(y: &[T], tag_threshold: f64) -> Vec<usize> {
    y.iter()
        .enumerate()
        .filter(|(_, v)| v.to_f64().unwrap() > tag_threshold)
        .map(|(l, _)| l)
        .collect()
}

/// Offsets of a centered flat structuring element of `size` slices; even
/// sizes extend one further to the right.
fn element_offsets(size: usize) -> impl Iterator<Item = isize> {
    let lo = -((size.saturating_sub(1) / 2) as isize);
    let hi = (size / 2) as isize;
    lo..=hi
}

/// Binary dilation with a centered flat element; sizes 0 and 1 are the
/// identity. Results outside the sequence are discarded.
pub fn dilate(bits: &[bool], size: usize) -> Vec<bool> {
    if size <= 1 {
        return bits.to_vec();
    }
    let n = bits.len() as isize;
    let mut out = vec![false; bits.len()];
    for (i, &b) in bits.iter().enumerate() {
        if !b {
            continue;
        }
        for off in element_offsets(size) {
            let j = i as isize + off;
            if (0..n).contains(&j) {
                out[j as usize] = true;
            }
        }
    }
    out
}

/// Binary erosion with a centered flat element; positions whose window
/// leaves the sequence see zeros.
pub fn erode(bits: &[bool], size: usize) -> Vec<bool> {
    if size <= 1 {
        return bits.to_vec();
    }
    let n = bits.len() as isize;
    let mut out = vec![false; bits.len()];
    for i in 0..bits.len() {
        out[i] = element_offsets(size).all(|off| {
            let j = i as isize + off;
            (0..n).contains(&j) && bits[j as usize]
        });
    }
    out
}

/// Morphological closing: dilation followed by erosion. The pair is
/// evaluated on a zero-padded extension of the sequence so the erosion sees
/// the full dilated support, then clipped back to the original length.
pub fn close(bits: &[bool], dilation: usize, erosion: usize) -> Vec<bool> {
    if bits.is_empty() {
        return Vec::new();
    }
    let margin = dilation + erosion;
    let mut padded = vec![false; bits.len() + 2 * margin];
    padded[margin..margin + bits.len()].copy_from_slice(bits);
    let eroded = erode(&dilate(&padded, dilation), erosion);
    eroded[margin..margin + bits.len()].to_vec()
}

/// Extracts events for the tagged classes: binarize `o_l(t) > τ2`, apply the
/// morphological closing, and turn each maximal run of ones into an event
/// spanning `[start·slice, (end+1)·slice)` seconds. Events are sorted by
/// onset, then class.
pub fn extract_events<T: Element>(
    o: &Tensor<T>,
    tags: &[usize],
    cfg: &PostprocessConfig,
) -> Result<Vec<Event>> {
    cfg.validate()?;
    if o.rank() != 2 {
        return Err(CoreError::invalid(
            "extract_events",
            "expected [slices, classes] probabilities",
        ));
    }
    let (t, l) = (o.shape()[0], o.shape()[1]);
    let mut events = Vec::new();
    for &class in tags {
        if class >= l {
            return Err(CoreError::invalid(
                "extract_events",
                alloc::format!("tag {class} out of range for {l} classes"),
            ));
        }
        let active: Vec<bool> = (0..t)
            .map(|ti| o.get(&[ti, class]).to_f64().unwrap() > cfg.frame_threshold)
            .collect();
        let closed = close(&active, cfg.dilation, cfg.erosion);
        let mut start = None;
        for (i, &on) in closed.iter().chain(core::iter::once(&false)).enumerate() {
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    events.push(Event {
                        class,
                        onset: s as f64 * cfg.slice_duration,
                        offset: i as f64 * cfg.slice_duration,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    events.sort_by(|a, b| {
        a.onset
            .partial_cmp(&b.onset)
            .unwrap()
            .then(a.class.cmp(&b.class))
    });
    Ok(events)
}
