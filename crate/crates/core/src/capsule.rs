//! Capsule layers: squashing, primary-capsule formation, dynamic
//! routing-by-agreement, and capsule-length readout.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, SquashForm, Var};
use crate::tensor::{num, Element, Tensor};

/// Epsilon under the square root of every capsule norm, so gradients at the
/// zero capsule stay finite.
pub const NORM_EPS: f64 = 1e-12;

/// Routing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RoutingConfig {
    pub iterations: usize,
    pub squash_form: SquashForm,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iterations: 3,
            squash_form: SquashForm::Cited,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CoreError::invalid(
                "routing",
                "iteration count must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Norm-limiting nonlinearity over the last axis; zero maps to zero and the
/// output norm is strictly below one.
pub fn squash<T: Element>(g: &mut Graph<T>, s: Var, form: SquashForm) -> Result<Var> {
    g.squash(s, form, num(NORM_EPS))
}

/// Euclidean length of each capsule (last axis), in `[0, 1)` after a squash.
pub fn capsule_lengths<T: Element>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    g.l2_norm(v, num(NORM_EPS))
}

/// One iteration's state, recorded for inspection: the logits the softmax
/// consumed, the couplings, the squashed outputs, and the agreements added
/// to the logits.
#[derive(Debug, Clone)]
pub struct RoutingIteration<T: Element> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
    pub outputs: Tensor<T>,
    pub agreements: Tensor<T>,
}

/// Dynamic routing-by-agreement over prediction vectors `û`.
///
/// `uhat` is `[S,M,N,U]` (or `[M,N,U]` for a single slice): S independent
/// slices, M input capsules, N output capsules of size U. Logits start at
/// zero each invocation; every iteration applies softmax over the output
/// axis, forms the coupled sums, squashes, and adds the agreements back into
/// the logits. Gradients flow through all iterations.
pub fn dynamic_routing<T: Element>(
    g: &mut Graph<T>,
    uhat: Var,
    config: &RoutingConfig,
) -> Result<Var> {
    Ok(route(g, uhat, config, false)?.0)
}

/// As [`dynamic_routing`], additionally returning per-iteration state.
pub fn dynamic_routing_traced<T: Element>(
    g: &mut Graph<T>,
    uhat: Var,
    config: &RoutingConfig,
) -> Result<(Var, Vec<RoutingIteration<T>>)> {
    let (v, trace) = route(g, uhat, config, true)?;
    Ok((v, trace))
}

fn route<T: Element>(
    g: &mut Graph<T>,
    uhat: Var,
    config: &RoutingConfig,
    traced: bool,
) -> Result<(Var, Vec<RoutingIteration<T>>)> {
    config.validate()?;
    let single = g.value(uhat).rank() == 3;
    let uhat = if single {
        let mut sh = alloc::vec![1usize];
        sh.extend_from_slice(g.shape(uhat));
        g.reshape(uhat, sh)?
    } else {
        uhat
    };
    let shape = g.shape(uhat).to_vec();
    if shape.len() != 4 {
        return Err(CoreError::invalid(
            "routing",
            alloc::format!("prediction vectors must be [S,M,N,U], got {shape:?}"),
        ));
    }
    let (s, m, n) = (shape[0], shape[1], shape[2]);

    let mut beta = g.constant(Tensor::zeros([s, m, n]))?;
    let mut out = None;
    let mut trace = Vec::new();
    for _ in 0..config.iterations {
        let alpha = g.softmax(beta, 2)?;
        let coupled = g.coupling_sum(alpha, uhat)?;
        let v = squash(g, coupled, config.squash_form)?;
        let agree = g.agreement(v, uhat)?;
        if traced {
            trace.push(RoutingIteration {
                logits: g.value(beta).clone(),
                couplings: g.value(alpha).clone(),
                outputs: g.value(v).clone(),
                agreements: g.value(agree).clone(),
            });
        }
        beta = g.add(beta, agree)?;
        out = Some(v);
    }
    let mut v = out.expect("at least one routing iteration");
    if single {
        let sh = g.shape(v)[1..].to_vec();
        v = g.reshape(v, sh)?;
    }
    Ok((v, trace))
}

/// Densely connected capsule layer: prediction vectors `û[j|i] = W[j,i]·u[i]`
/// followed by dynamic routing. `w` is `[N,M,U_out,U_in]`, `u` is
/// `[S,M,U_in]` (or `[M,U_in]`); no bias term is used inside capsule layers.
pub fn capsule_dense_layer<T: Element>(
    g: &mut Graph<T>,
    u: Var,
    w: Var,
    config: &RoutingConfig,
) -> Result<Var> {
    let single = g.value(u).rank() == 2;
    let u = if single {
        let mut sh = alloc::vec![1usize];
        sh.extend_from_slice(g.shape(u));
        g.reshape(u, sh)?
    } else {
        u
    };
    let uhat = g.capsule_predict(w, u)?;
    let v = dynamic_routing(g, uhat, config)?;
    if single {
        let sh = g.shape(v)[1..].to_vec();
        g.reshape(v, sh)
    } else {
        Ok(v)
    }
}

/// Reinterprets a convolutional map `[B,C,T,F]` as capsules `[B,T,K,U]` and
/// squashes. Channels are grouped contiguously: capsule `k = f*(C/U) + group`
/// takes channels `[U*group, U*group+U)` at frequency position `f`.
pub fn capsules_from_conv<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    capsule_size: usize,
    form: SquashForm,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(CoreError::invalid(
            "primary_capsules",
            "input must be [batch, channels, time, freq]",
        ));
    }
    let (b, c, t, f) = (shape[0], shape[1], shape[2], shape[3]);
    if capsule_size == 0 || c % capsule_size != 0 {
        return Err(CoreError::invalid(
            "primary_capsules",
            alloc::format!("{c} channels not divisible by capsule size {capsule_size}"),
        ));
    }
    let x = g.permute(x, &[0, 2, 3, 1])?;
    let k = f * (c / capsule_size);
    let x = g.reshape(x, [b, t, k, capsule_size])?;
    g.squash(x, form, num(NORM_EPS))
}

/// Primary capsule layer: ReLU convolution (stride 1 in time, 2 in
/// frequency for the reference geometry), reshaped into `[B,T,K,U]` capsule
/// slices and squashed. Input is `[B,C,T,F]` or `[C,T,F]`.
pub fn primary_capsules<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    kernel: Var,
    bias: Var,
    stride: (usize, usize),
    capsule_size: usize,
    form: SquashForm,
) -> Result<Var> {
    let single = g.value(x).rank() == 3;
    let x = if single {
        let mut sh = alloc::vec![1usize];
        sh.extend_from_slice(g.shape(x));
        g.reshape(x, sh)?
    } else {
        x
    };
    let conv = g.conv2d(x, kernel, Some(bias), stride)?;
    let act = g.relu(conv)?;
    let caps = capsules_from_conv(g, act, capsule_size, form)?;
    if single {
        let sh = g.shape(caps)[1..].to_vec();
        g.reshape(caps, sh)
    } else {
        Ok(caps)
    }
}
