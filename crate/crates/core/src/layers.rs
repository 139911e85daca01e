//! Non-capsule building blocks: gated convolutions, batch-norm state,
//! dense layers, dropout.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{num, Element, Tensor};

/// Geometry of the gated-convolution encoder. Each block stacks
/// `layers_per_block` gated layers and ends with a 2x2 max-pool; the linear
/// and gate branches always use the same filter count, so one field covers
/// both.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GatedConvSpec {
    pub filters_per_branch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub layers_per_block: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl Default for GatedConvSpec {
    fn default() -> Self {
        GatedConvSpec {
            filters_per_branch: 64,
            kernel: (3, 3),
            stride: (1, 1),
            layers_per_block: 2,
            blocks: 3,
            dropout: 0.2,
        }
    }
}

impl GatedConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.filters_per_branch == 0 || self.layers_per_block == 0 || self.blocks == 0 {
            return Err(CoreError::invalid(
                "gated_conv_spec",
                "filters, layers_per_block and blocks must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::invalid(
                "gated_conv_spec",
                "dropout must lie in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Batch-norm hyperparameters; the per-channel scale/shift and running
/// statistics themselves live in the parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Updates a running statistic in place: `(1-momentum)*old + momentum*new`.
pub fn update_running<T: Element>(running: &mut Tensor<T>, batch: &Tensor<T>, momentum: f64) {
    let m = num::<T>(momentum);
    let keep = T::one() - m;
    for (dst, src) in running.data_mut().iter_mut().zip(batch.data()) {
        *dst = keep * *dst + m * *src;
    }
}

/// Forward-pass mode: training draws dropout masks from the session RNG and
/// uses batch statistics; evaluation is a pure function.
pub struct Session<'r> {
    pub training: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Session<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Session {
            training: true,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        Session {
            training: false,
            rng: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

/// Dense layer: affine transform plus activation.
pub fn dense<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    activation: Activation,
) -> Result<Var> {
    let y = g.affine(x, w, b)?;
    match activation {
        Activation::Linear => Ok(y),
        Activation::Relu => g.relu(y),
        Activation::Sigmoid => g.sigmoid(y),
    }
}

/// Gated convolution: `conv_linear(x) ⊙ sigmoid(conv_gate(x))`, two
/// independent convolutions with their own kernels and biases.
pub fn gated_conv<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    lin_kernel: Var,
    lin_bias: Var,
    gate_kernel: Var,
    gate_bias: Var,
    stride: (usize, usize),
) -> Result<Var> {
    if g.shape(lin_kernel) != g.shape(gate_kernel) {
        return Err(CoreError::ShapeMismatch {
            op: "gated_conv",
            lhs: g.shape(lin_kernel).to_vec(),
            rhs: g.shape(gate_kernel).to_vec(),
        });
    }
    let lin = g.conv2d(x, lin_kernel, Some(lin_bias), stride)?;
    let gate = g.conv2d(x, gate_kernel, Some(gate_bias), stride)?;
    let gate = g.sigmoid(gate)?;
    g.mul(lin, gate)
}

/// Inverted dropout mask: kept entries are scaled by `1/(1-rate)` so
/// inference needs no rescaling.
pub fn dropout_mask<T: Element>(
    shape: &[usize],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let keep_scale = num::<T>(1.0 / (1.0 - rate));
    Tensor::from_fn(shape.to_vec(), |_| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep_scale
        }
    })
}

/// Applies inverted dropout in training mode; identity at inference or at
/// rate zero.
pub fn dropout<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    session: &mut Session<'_>,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::invalid("dropout", "rate must lie in [0, 1)"));
    }
    if !session.training || rate == 0.0 {
        return Ok(x);
    }
    let rng = session
        .rng
        .as_deref_mut()
        .ok_or_else(|| CoreError::invalid("dropout", "training session has no rng"))?;
    let mask = dropout_mask(g.shape(x), rate, rng);
    g.mul_const(x, mask)
}

/// Parameter handles for one gated layer (bound into the current graph).
pub struct GatedLayerVars {
    pub lin_kernel: Var,
    pub lin_bias: Var,
    pub gate_kernel: Var,
    pub gate_bias: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

/// Output of the encoder stack: the pooled feature map plus this batch's
/// batch-norm statistics (one `(mean, var)` pair per layer, training only).
pub struct StackOutput<T: Element> {
    pub out: Var,
    pub batch_stats: Vec<(Tensor<T>, Tensor<T>)>,
}

/// The gated encoder: `blocks` x (`layers_per_block` gated layers, each
/// followed by batch norm and dropout) with a 2x2 max-pool closing each
/// block.
pub fn gated_block_stack<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    layers: &[GatedLayerVars],
    running: &[(Tensor<T>, Tensor<T>)],
    spec: &GatedConvSpec,
    bn: &BatchNormConfig,
    session: &mut Session<'_>,
) -> Result<StackOutput<T>> {
    spec.validate()?;
    let shape = g.shape(x);
    if shape.len() != 4 {
        return Err(CoreError::invalid(
            "gated_block_stack",
            "input must be [batch, channels, time, freq]",
        ));
    }
    let min_extent = 1usize << spec.blocks;
    if shape[2] < min_extent || shape[3] < min_extent {
        return Err(CoreError::invalid(
            "gated_block_stack",
            alloc::format!(
                "input {}x{} too small to pool {} times",
                shape[2],
                shape[3],
                spec.blocks
            ),
        ));
    }
    let expect = spec.blocks * spec.layers_per_block;
    if layers.len() != expect || running.len() != expect {
        return Err(CoreError::invalid(
            "gated_block_stack",
            alloc::format!("expected {expect} layer parameter sets, got {}", layers.len()),
        ));
    }

    let eps = num::<T>(bn.eps);
    let mut h = x;
    let mut batch_stats = Vec::new();
    for block in 0..spec.blocks {
        for layer in 0..spec.layers_per_block {
            let li = block * spec.layers_per_block + layer;
            let lv = &layers[li];
            h = gated_conv(
                g,
                h,
                lv.lin_kernel,
                lv.lin_bias,
                lv.gate_kernel,
                lv.gate_bias,
                spec.stride,
            )?;
            if session.training {
                let (out, mean, var) = g.batch_norm_train(h, lv.bn_gamma, lv.bn_beta, eps)?;
                h = out;
                batch_stats.push((mean, var));
            } else {
                let (rm, rv) = &running[li];
                h = g.batch_norm_infer(h, lv.bn_gamma, lv.bn_beta, rm, rv, eps)?;
            }
            h = dropout(g, h, spec.dropout, session)?;
        }
        h = g.max_pool2d(h, (2, 2))?;
    }
    Ok(StackOutput {
        out: h,
        batch_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn graph_with<T: Element>(t: Tensor<T>) -> (Graph<T>, Var) {
        let mut g = Graph::new();
        let v = g.constant(t).unwrap();
        (g, v)
    }

    #[test]
    fn zero_gate_halves_linear_branch() {
        // sigmoid(0) = 0.5, so a zero gate pre-activation scales the linear
        // branch by exactly one half.
        let (mut g, x) = graph_with(Tensor::<f64>::from_fn([1, 4, 4], |i| i as f64));
        let lin_k = g.constant(Tensor::new([1, 1, 1, 1], alloc::vec![1.0]).unwrap()).unwrap();
        let lin_b = g.constant(Tensor::zeros([1])).unwrap();
        let gate_k = g.constant(Tensor::zeros([1, 1, 1, 1])).unwrap();
        let gate_b = g.constant(Tensor::zeros([1])).unwrap();
        let y = gated_conv(&mut g, x, lin_k, lin_b, gate_k, gate_b, (1, 1)).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            assert!((v - 0.5 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_closes_output() {
        let (mut g, x) = graph_with(Tensor::<f64>::full([1, 2, 2], 3.0));
        let lin_k = g.constant(Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        let lin_b = g.constant(Tensor::zeros([1])).unwrap();
        let gate_k = g.constant(Tensor::zeros([1, 1, 1, 1])).unwrap();
        let gate_b = g.constant(Tensor::full([1], -40.0)).unwrap();
        let y = gated_conv(&mut g, x, lin_k, lin_b, gate_k, gate_b, (1, 1)).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_one_by_one_kernels_give_identity() {
        // linear kernel 2, gate 0 with zero biases: out = 2x * 0.5 = x.
        let (mut g, x) = graph_with(Tensor::<f64>::from_fn([1, 4, 4], |i| (i as f64).sin()));
        let lin_k = g.constant(Tensor::full([1, 1, 1, 1], 2.0)).unwrap();
        let lin_b = g.constant(Tensor::zeros([1])).unwrap();
        let gate_k = g.constant(Tensor::zeros([1, 1, 1, 1])).unwrap();
        let gate_b = g.constant(Tensor::zeros([1])).unwrap();
        let y = gated_conv(&mut g, x, lin_k, lin_b, gate_k, gate_b, (1, 1)).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_bound_holds_elementwise() {
        let mut r = rng::seeded(11, rng::stream::CHECK);
        let (mut g, x) = graph_with(crate::check::random_tensor::<f64>(&mut r, &[2, 3, 5], -2.0, 2.0));
        let lin_k = g.constant(crate::check::random_tensor(&mut r, &[4, 2, 3, 3], -1.0, 1.0)).unwrap();
        let lin_b = g.constant(crate::check::random_tensor(&mut r, &[4], -0.5, 0.5)).unwrap();
        let gate_k = g.constant(crate::check::random_tensor(&mut r, &[4, 2, 3, 3], -1.0, 1.0)).unwrap();
        let gate_b = g.constant(crate::check::random_tensor(&mut r, &[4], -0.5, 0.5)).unwrap();
        let lin = g.conv2d(x, lin_k, Some(lin_b), (1, 1)).unwrap();
        let y = gated_conv(&mut g, x, lin_k, lin_b, gate_k, gate_b, (1, 1)).unwrap();
        for (yo, lo) in g.value(y).data().iter().zip(g.value(lin).data()) {
            assert!(yo.abs() <= lo.abs() + 1e-12);
        }
    }

    #[test]
    fn dense_identity_and_saturation_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2], alloc::vec![2.0, 1.0]).unwrap()).unwrap();
        let w_id = g.constant(Tensor::new([2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::zeros([2])).unwrap();
        let y = dense(&mut g, x, w_id, b, Activation::Linear).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 1.0]);

        let w0 = g.constant(Tensor::zeros([3, 2])).unwrap();
        let b3 = g.constant(Tensor::zeros([3])).unwrap();
        let s = dense(&mut g, x, w0, b3, Activation::Sigmoid).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn dense_hand_evaluated_sigmoid() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2], alloc::vec![2.0, 1.0]).unwrap()).unwrap();
        let w = g.constant(Tensor::new([1, 2], alloc::vec![1.0, -1.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::zeros([1])).unwrap();
        let y = dense(&mut g, x, w, b, Activation::Sigmoid).unwrap();
        assert!((g.value(y).item() - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = rng::seeded(1, rng::stream::DROPOUT);
        let mut session = Session::train(&mut rng);
        let (mut g, x) = graph_with(Tensor::<f32>::full([8], 1.0));
        let y = dropout(&mut g, x, 0.0, &mut session).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_masks_are_reproducible() {
        let a: Tensor<f32> =
            dropout_mask(&[32], 0.5, &mut rng::seeded(9, rng::stream::DROPOUT));
        let b: Tensor<f32> =
            dropout_mask(&[32], 0.5, &mut rng::seeded(9, rng::stream::DROPOUT));
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte Carlo: the mean over many masks stays within 5% of the input.
        let mut r = rng::seeded(2, rng::stream::DROPOUT);
        let trials = 10_000;
        let mut acc = 0.0f64;
        for _ in 0..trials {
            let mask: Tensor<f64> = dropout_mask(&[1], 0.2, &mut r);
            acc += mask.data()[0];
        }
        let mean = acc / trials as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn inference_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_fn([4], |i| i as f32)).unwrap();
            let mut session = Session::eval();
            let y = dropout(&mut g, x, 0.5, &mut session).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
        assert_eq!(run(), alloc::vec![0.0, 1.0, 2.0, 3.0]);
    }
}
