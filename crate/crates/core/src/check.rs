//! Finite-difference gradient verification.
//!
//! The checker is the independent oracle for every differentiable operation:
//! it re-evaluates the forward pass with perturbed inputs and never touches
//! the reverse-mode path it is checking.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{num, Element, Tensor};

/// Central-difference steps matching the verification tolerances: 1e-3 for
/// f32 runs, 1e-5 for f64 runs.
pub const STEP_F32: f64 = 1e-3;
pub const STEP_F64: f64 = 1e-5;

/// Guarded relative error: |a-n| / max(|a|, |n|, floor). The floor keeps
/// finite-difference noise on true-zero gradients from reading as failure
/// while still flagging any absolute disagreement above it.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the reverse-mode gradients of `build` against central finite
/// differences for every element of every input, returning the worst guarded
/// relative error.
///
/// `build` receives a fresh graph and the inputs registered as parameters
/// `in0..inN`, and must return a scalar loss variable.
pub fn max_grad_error<T, F>(build: F, inputs: &[Tensor<T>], step: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&alloc::format!("in{i}"), t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item().to_f64().unwrap())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&alloc::format!("in{i}"), t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.param(&alloc::format!("in{i}")).unwrap();
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] = plus[i].data()[e] + num::<T>(step);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] = minus[i].data()[e] - num::<T>(step);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let err = rel_err(analytic.data()[e].to_f64().unwrap(), numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Random tensor with entries uniform in `lo..hi`, for gradient-check
/// instances.
pub fn random_tensor<T: Element>(
    rng: &mut impl rand::Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        num(lo + (hi - lo) * rng.gen::<f64>())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn finite_differences_catch_a_wrong_gradient() {
        // Loss uses x twice but the builder hides one path behind a constant,
        // so the analytic gradient is deliberately wrong.
        let mut r = rng::seeded(3, rng::stream::CHECK);
        let x = random_tensor::<f64>(&mut r, &[3], 0.5, 1.5);
        let err = max_grad_error(
            |g, vars| {
                let frozen = g.constant(g.value(vars[0]).clone())?;
                let y = g.mul(vars[0], frozen)?;
                g.sum_all(y)
            },
            &[x],
            STEP_F64,
        )
        .unwrap();
        assert!(err > 1e-2, "expected detectable mismatch, got {err}");
    }

    #[test]
    fn correct_gradient_passes_tightly() {
        let mut r = rng::seeded(4, rng::stream::CHECK);
        let x = random_tensor::<f64>(&mut r, &[4], -1.0, 1.0);
        let err = max_grad_error(
            |g, vars| {
                let y = g.sigmoid(vars[0])?;
                g.sum_all(y)
            },
            &[x],
            STEP_F64,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
