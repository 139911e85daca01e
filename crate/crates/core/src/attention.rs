//! Temporal attention and the attention-weighted merge of per-slice
//! detections into clip-level predictions.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{dense, Activation};
use crate::tensor::{num, Element};

/// Epsilon added to the attention normalizer. Sigmoid output is never
/// exactly zero mathematically but can underflow in f32.
pub const MERGE_EPS: f64 = 1e-7;

/// Temporal-attention layer: one shared dense layer with `L` units and a
/// sigmoid activation applied to every time slice. `slices` is `[B,T,D]` or
/// `[T,D]`, the output matches with `D` replaced by `L`.
pub fn temporal_attention<T: Element>(
    g: &mut Graph<T>,
    slices: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    if g.value(slices).rank() < 2 {
        return Err(CoreError::invalid(
            "temporal_attention",
            "expected at least one time axis before the feature axis",
        ));
    }
    dense(g, slices, w, b, Activation::Sigmoid)
}

/// Attention-weighted mean over time:
/// `y_l = Σ_t o_l(t)·z_l(t) / (Σ_t z_l(t) + eps)`.
///
/// `o` and `z` are `[B,T,L]` (or `[T,L]`); the result drops the time axis.
/// The division makes `y_l` a convex combination of `{o_l(t)}`, so each
/// prediction lies between the smallest and largest slice value.
pub fn merge<T: Element>(g: &mut Graph<T>, o: Var, z: Var) -> Result<Var> {
    if g.shape(o) != g.shape(z) {
        return Err(CoreError::ShapeMismatch {
            op: "merge",
            lhs: g.shape(o).to_vec(),
            rhs: g.shape(z).to_vec(),
        });
    }
    let rank = g.value(o).rank();
    if rank < 2 {
        return Err(CoreError::invalid("merge", "inputs must be [..,T,L]"));
    }
    let t_axis = rank - 2;
    let weighted = g.mul(o, z)?;
    let numer = g.sum_axis(weighted, t_axis)?;
    let mass = g.sum_axis(z, t_axis)?;
    let denom = g.add_scalar(mass, num(MERGE_EPS))?;
    g.div(numer, denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::random_tensor;
    use crate::rng;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn zero_weights_give_half_saliency_everywhere() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([5, 3], |i| i as f64)).unwrap();
        let w = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([2])).unwrap();
        let z = temporal_attention(&mut g, x, w, b).unwrap();
        assert_eq!(g.shape(z), &[5, 2]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_slices_give_identical_rows() {
        let mut r = rng::seeded(31, rng::stream::CHECK);
        let mut g = Graph::<f64>::new();
        let row = random_tensor::<f64>(&mut r, &[4], -1.0, 1.0);
        let x = g
            .constant(Tensor::from_fn([6, 4], |i| row.data()[i % 4]))
            .unwrap();
        let w = g.constant(random_tensor(&mut r, &[3, 4], -1.0, 1.0)).unwrap();
        let b = g.constant(random_tensor(&mut r, &[3], -0.5, 0.5)).unwrap();
        let z = temporal_attention(&mut g, x, w, b).unwrap();
        let zt = g.value(z);
        for t in 1..6 {
            for l in 0..3 {
                assert_eq!(zt.get(&[t, l]), zt.get(&[0, l]));
            }
        }
    }

    #[test]
    fn single_unit_weights_reproduce_sigmoid_of_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 2], vec![0.5, -1.0]).unwrap()).unwrap();
        let w = g.constant(Tensor::new([1, 2], vec![2.0, 1.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::new([1], vec![0.25]).unwrap()).unwrap();
        let z = temporal_attention(&mut g, x, w, b).unwrap();
        let expect = 1.0 / (1.0 + (-(0.5f64 * 2.0 - 1.0 + 0.25)).exp());
        assert!((g.value(z).item() - expect).abs() < 1e-12);
    }

    fn merge_values(o: &[f64], z: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let t = o.len();
        let ov = g.constant(Tensor::new([t, 1], o.to_vec()).unwrap()).unwrap();
        let zv = g.constant(Tensor::new([t, 1], z.to_vec()).unwrap()).unwrap();
        let y = merge(&mut g, ov, zv).unwrap();
        g.value(y).item()
    }

    #[test]
    fn uniform_attention_reduces_to_the_mean() {
        assert!((merge_values(&[0.2, 0.8], &[0.7, 0.7]) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn point_mass_attention_selects_one_slice() {
        assert!((merge_values(&[0.2, 0.8], &[0.0, 1.0]) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn hand_evaluated_weighted_mean() {
        // (0.2*0.25 + 0.8*0.75) / (0.25 + 0.75) = 0.65
        assert!((merge_values(&[0.2, 0.8], &[0.25, 0.75]) - 0.65).abs() < 1e-7);
    }

    #[test]
    fn invariant_under_positive_rescaling_of_attention() {
        let mut r = rng::seeded(32, rng::stream::CHECK);
        for _ in 0..20 {
            let o = random_tensor::<f64>(&mut r, &[7], 0.0, 1.0);
            let z = random_tensor::<f64>(&mut r, &[7], 0.05, 1.0);
            let scaled: alloc::vec::Vec<f64> = z.data().iter().map(|x| x * 37.5).collect();
            let a = merge_values(o.data(), z.data());
            let b = merge_values(o.data(), &scaled);
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn merge_is_a_convex_combination() {
        let mut r = rng::seeded(33, rng::stream::CHECK);
        for _ in 0..50 {
            let o = random_tensor::<f64>(&mut r, &[9], 0.0, 1.0);
            let z = random_tensor::<f64>(&mut r, &[9], 0.01, 1.0);
            let y = merge_values(o.data(), z.data());
            let lo = o.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = o.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
        }
    }

    #[test]
    fn normalized_attention_is_a_distribution() {
        let mut r = rng::seeded(34, rng::stream::CHECK);
        let z = random_tensor::<f64>(&mut r, &[11], 0.01, 1.0);
        let mass: f64 = z.data().iter().sum();
        let q: f64 = z.data().iter().map(|x| x / mass).sum();
        assert!((q - 1.0).abs() < 1e-6);
    }

    #[test]
    fn merge_requires_equal_shapes() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::zeros([3, 2])).unwrap();
        let z = g.constant(Tensor::zeros([4, 2])).unwrap();
        assert!(merge(&mut g, o, z).is_err());
    }

    #[test]
    fn batched_merge_keeps_batch_axis() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::full([2, 5, 3], 0.4)).unwrap();
        let z = g.constant(Tensor::full([2, 5, 3], 0.9)).unwrap();
        let y = merge(&mut g, o, z).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }
}
