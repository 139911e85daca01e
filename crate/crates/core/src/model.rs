//! Full detector: gated-convolution encoder, primary capsules, routed class
//! capsules, temporal attention, and the merge into clip predictions.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{merge, temporal_attention};
use crate::capsule::{capsules_from_conv, dynamic_routing, capsule_lengths, RoutingConfig};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    dropout, gated_block_stack, update_running, BatchNormConfig, GatedConvSpec, GatedLayerVars,
    Session,
};
use crate::rng;
use crate::tensor::{num, Element, Tensor};

/// Architecture hyperparameters. `paper` is the reference geometry
/// (240x64 logmel input, three gated blocks of 64+64 filters); `desk` is a
/// reduced preset for fast end-to-end runs (60x64 input, two blocks of
/// 16+16 filters).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub input_frames: usize,
    pub mel_bins: usize,
    pub conv: GatedConvSpec,
    pub bn: BatchNormConfig,
    pub primary_filters: usize,
    pub primary_kernel: (usize, usize),
    pub primary_stride: (usize, usize),
    pub primary_dropout: f64,
    pub capsule_size: usize,
    pub class_capsule_size: usize,
    pub n_classes: usize,
    pub routing: RoutingConfig,
}

impl ModelConfig {
    pub fn paper(n_classes: usize) -> Self {
        ModelConfig {
            input_frames: 240,
            mel_bins: 64,
            conv: GatedConvSpec::default(),
            bn: BatchNormConfig::default(),
            primary_filters: 64,
            primary_kernel: (3, 3),
            primary_stride: (1, 2),
            primary_dropout: 0.5,
            capsule_size: 4,
            class_capsule_size: 8,
            n_classes,
            routing: RoutingConfig::default(),
        }
    }

    pub fn desk(n_classes: usize) -> Self {
        ModelConfig {
            input_frames: 60,
            mel_bins: 64,
            conv: GatedConvSpec {
                filters_per_branch: 16,
                blocks: 2,
                ..GatedConvSpec::default()
            },
            primary_filters: 32,
            ..ModelConfig::paper(n_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        self.routing.validate()?;
        if self.n_classes == 0 {
            return Err(CoreError::invalid("model_config", "need at least one class"));
        }
        if self.capsule_size == 0 || self.primary_filters % self.capsule_size != 0 {
            return Err(CoreError::invalid(
                "model_config",
                "primary filter count must be a positive multiple of the capsule size",
            ));
        }
        if self.primary_kernel.0 % 2 == 0 || self.primary_kernel.1 % 2 == 0 {
            return Err(CoreError::invalid("model_config", "primary kernel must be odd"));
        }
        if !(0.0..1.0).contains(&self.primary_dropout) {
            return Err(CoreError::invalid("model_config", "dropout must lie in [0, 1)"));
        }
        let min_extent = 1usize << self.conv.blocks;
        if self.input_frames < min_extent || self.mel_bins < min_extent {
            return Err(CoreError::invalid(
                "model_config",
                "input too small to pool once per block",
            ));
        }
        Ok(())
    }

    fn pooled(extent: usize, blocks: usize) -> usize {
        (0..blocks).fold(extent, |e, _| (e + 1) / 2)
    }

    /// Number of time slices after the encoder and primary convolution.
    pub fn time_slices(&self) -> usize {
        let t = Self::pooled(self.input_frames, self.conv.blocks);
        (t + self.primary_stride.0 - 1) / self.primary_stride.0
    }

    /// Primary capsules per time slice.
    pub fn capsules_per_slice(&self) -> usize {
        let f = Self::pooled(self.mel_bins, self.conv.blocks);
        let f = (f + self.primary_stride.1 - 1) / self.primary_stride.1;
        f * (self.primary_filters / self.capsule_size)
    }

    /// Width of the flattened slice fed to the temporal-attention layer.
    pub fn attention_input_dim(&self) -> usize {
        self.capsules_per_slice() * self.capsule_size
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        // 17 classes in the reference setup
        ModelConfig::paper(17)
    }
}

/// A named tensor in the parameter set. Buffers (batch-norm running
/// statistics) are saved and restored but never receive gradients.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter set; iteration order is the sorted name order, which the
/// determinism contract relies on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Element> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.entries.insert(
            name.into(),
            ParamEntry { tensor, trainable },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| CoreError::invalid("params", alloc::format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| CoreError::invalid("params", alloc::format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.tensor.cast(), e.trainable);
        }
        out
    }
}

fn glorot<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        num::<T>((rng.gen::<f64>() * 2.0 - 1.0) * limit)
    })
}

/// Initializes all parameters and batch-norm buffers for the given
/// architecture. Deterministic in `seed`.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut r = rng::seeded(seed, rng::stream::INIT);
    let mut params = ParamSet::new();

    let mut channels = 1usize;
    let (kh, kw) = cfg.conv.kernel;
    for block in 0..cfg.conv.blocks {
        for layer in 0..cfg.conv.layers_per_block {
            let prefix = alloc::format!("encoder.block{block}.layer{layer}");
            let filters = cfg.conv.filters_per_branch;
            let kshape = [filters, channels, kh, kw];
            let fan_in = channels * kh * kw;
            let fan_out = filters * kh * kw;
            for branch in ["lin", "gate"] {
                params.insert(
                    alloc::format!("{prefix}.{branch}.kernel"),
                    glorot(&mut r, &kshape, fan_in, fan_out),
                    true,
                );
                params.insert(
                    alloc::format!("{prefix}.{branch}.bias"),
                    Tensor::zeros([filters]),
                    true,
                );
            }
            params.insert(alloc::format!("{prefix}.bn.gamma"), Tensor::full([filters], T::one()), true);
            params.insert(alloc::format!("{prefix}.bn.beta"), Tensor::zeros([filters]), true);
            params.insert(
                alloc::format!("{prefix}.bn.running_mean"),
                Tensor::zeros([filters]),
                false,
            );
            params.insert(
                alloc::format!("{prefix}.bn.running_var"),
                Tensor::full([filters], T::one()),
                false,
            );
            channels = filters;
        }
    }

    let (pkh, pkw) = cfg.primary_kernel;
    let fan_in = channels * pkh * pkw;
    let fan_out = cfg.primary_filters * pkh * pkw;
    params.insert(
        "primary.conv.kernel",
        glorot(&mut r, &[cfg.primary_filters, channels, pkh, pkw], fan_in, fan_out),
        true,
    );
    params.insert("primary.conv.bias", Tensor::zeros([cfg.primary_filters]), true);
    params.insert("primary.bn.gamma", Tensor::full([cfg.primary_filters], T::one()), true);
    params.insert("primary.bn.beta", Tensor::zeros([cfg.primary_filters]), true);
    params.insert("primary.bn.running_mean", Tensor::zeros([cfg.primary_filters]), false);
    params.insert(
        "primary.bn.running_var",
        Tensor::full([cfg.primary_filters], T::one()),
        false,
    );

    let (m, ui, uo, n) = (
        cfg.capsules_per_slice(),
        cfg.capsule_size,
        cfg.class_capsule_size,
        cfg.n_classes,
    );
    params.insert(
        "class_caps.weight",
        glorot(&mut r, &[n, m, uo, ui], ui, uo),
        true,
    );

    let d = cfg.attention_input_dim();
    params.insert(
        "attention.weight",
        glorot(&mut r, &[cfg.n_classes, d], d, cfg.n_classes),
        true,
    );
    params.insert("attention.bias", Tensor::zeros([cfg.n_classes]), true);

    Ok(params)
}

/// Handles produced by one forward pass: clip probabilities `y [B,L]`,
/// per-slice capsule lengths `o [B,T,L]`, attention curves `z [B,T,L]`, and
/// the batch-norm statistics gathered in training mode.
pub struct ForwardPass<T: Element> {
    pub y: Var,
    pub o: Var,
    pub z: Var,
    pub batch_stats: Vec<(String, Tensor<T>, Tensor<T>)>,
}

/// Runs the detector on `x: [B,1,T,F]`, binding every trainable parameter
/// into the graph so a following backward pass reports named gradients.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    x: Var,
    session: &mut Session<'_>,
) -> Result<ForwardPass<T>> {
    cfg.validate()?;
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != 1 || xs[2] != cfg.input_frames || xs[3] != cfg.mel_bins {
        return Err(CoreError::invalid(
            "model",
            alloc::format!(
                "input must be [B,1,{},{}], got {:?}",
                cfg.input_frames,
                cfg.mel_bins,
                xs
            ),
        ));
    }
    let batch = xs[0];

    let bind = |g: &mut Graph<T>, name: &str| -> Result<Var> {
        g.param(name, params.get(name)?.clone())
    };

    // encoder
    let mut layer_vars = Vec::new();
    let mut running = Vec::new();
    let mut bn_names = Vec::new();
    for block in 0..cfg.conv.blocks {
        for layer in 0..cfg.conv.layers_per_block {
            let p = alloc::format!("encoder.block{block}.layer{layer}");
            layer_vars.push(GatedLayerVars {
                lin_kernel: bind(g, &alloc::format!("{p}.lin.kernel"))?,
                lin_bias: bind(g, &alloc::format!("{p}.lin.bias"))?,
                gate_kernel: bind(g, &alloc::format!("{p}.gate.kernel"))?,
                gate_bias: bind(g, &alloc::format!("{p}.gate.bias"))?,
                bn_gamma: bind(g, &alloc::format!("{p}.bn.gamma"))?,
                bn_beta: bind(g, &alloc::format!("{p}.bn.beta"))?,
            });
            running.push((
                params.get(&alloc::format!("{p}.bn.running_mean"))?.clone(),
                params.get(&alloc::format!("{p}.bn.running_var"))?.clone(),
            ));
            bn_names.push(alloc::format!("{p}.bn"));
        }
    }
    let stack = gated_block_stack(g, x, &layer_vars, &running, &cfg.conv, &cfg.bn, session)?;
    let mut batch_stats: Vec<(String, Tensor<T>, Tensor<T>)> = bn_names
        .into_iter()
        .zip(stack.batch_stats)
        .map(|(name, (mean, var))| (name, mean, var))
        .collect();

    // primary capsules: ReLU conv, batch norm, dropout, reshape, squash
    let pk = bind(g, "primary.conv.kernel")?;
    let pb = bind(g, "primary.conv.bias")?;
    let conv = g.conv2d(stack.out, pk, Some(pb), cfg.primary_stride)?;
    let act = g.relu(conv)?;
    let gamma = bind(g, "primary.bn.gamma")?;
    let beta = bind(g, "primary.bn.beta")?;
    let act = if session.training {
        let (out, mean, var) = g.batch_norm_train(act, gamma, beta, num(cfg.bn.eps))?;
        batch_stats.push((String::from("primary.bn"), mean, var));
        out
    } else {
        g.batch_norm_infer(
            act,
            gamma,
            beta,
            params.get("primary.bn.running_mean")?,
            params.get("primary.bn.running_var")?,
            num(cfg.bn.eps),
        )?
    };
    let act = dropout(g, act, cfg.primary_dropout, session)?;
    let prim = capsules_from_conv(g, act, cfg.capsule_size, cfg.routing.squash_form)?;

    let t = cfg.time_slices();
    let k = cfg.capsules_per_slice();
    let u = cfg.capsule_size;

    // class capsules over every slice
    let slices = g.reshape(prim, [batch * t, k, u])?;
    let w = bind(g, "class_caps.weight")?;
    let uhat = g.capsule_predict(w, slices)?;
    let v = dynamic_routing(g, uhat, &cfg.routing)?;
    let lengths = capsule_lengths(g, v)?;
    let o = g.reshape(lengths, [batch, t, cfg.n_classes])?;

    // temporal attention over the same flattened slices
    let flat = g.reshape(prim, [batch, t, k * u])?;
    let aw = bind(g, "attention.weight")?;
    let ab = bind(g, "attention.bias")?;
    let z = temporal_attention(g, flat, aw, ab)?;

    let y = merge(g, o, z)?;
    Ok(ForwardPass { y, o, z, batch_stats })
}

/// Folds a training batch's statistics into the running buffers.
pub fn apply_bn_updates<T: Element>(
    params: &mut ParamSet<T>,
    stats: &[(String, Tensor<T>, Tensor<T>)],
    momentum: f64,
) -> Result<()> {
    for (prefix, mean, var) in stats {
        update_running(
            params.get_mut(&alloc::format!("{prefix}.running_mean"))?,
            mean,
            momentum,
        );
        update_running(
            params.get_mut(&alloc::format!("{prefix}.running_var"))?,
            var,
            momentum,
        );
    }
    Ok(())
}

/// Clip-level prediction: tag probabilities plus the per-slice capsule
/// length and attention curves used for localization.
#[derive(Debug, Clone)]
pub struct ClipPrediction<T: Element> {
    pub y: Tensor<T>,
    pub o: Tensor<T>,
    pub z: Tensor<T>,
}

/// Stacks per-clip feature matrices `[T,F]` into a model input `[B,1,T,F]`.
pub fn batch_input<T: Element>(features: &[&Tensor<T>], cfg: &ModelConfig) -> Result<Tensor<T>> {
    if features.is_empty() {
        return Err(CoreError::invalid("batch", "empty batch"));
    }
    let want = [cfg.input_frames, cfg.mel_bins];
    let mut data = Vec::with_capacity(features.len() * cfg.input_frames * cfg.mel_bins);
    for f in features {
        if f.shape() != want {
            return Err(CoreError::ShapeMismatch {
                op: "batch",
                lhs: f.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(
        [features.len(), 1, cfg.input_frames, cfg.mel_bins],
        data,
    )
}

/// Evaluation-mode prediction for a set of clips. Clips are processed in
/// fixed-size chunks; inference is per-example pure so chunking does not
/// change results.
pub fn predict<T: Element>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    features: &[Tensor<T>],
) -> Result<Vec<ClipPrediction<T>>> {
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(16) {
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        let x = batch_input(&refs, cfg)?;
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let mut session = Session::eval();
        let pass = forward(&mut g, cfg, params, xv, &mut session)?;
        let (t, l) = (cfg.time_slices(), cfg.n_classes);
        let y = g.value(pass.y);
        let o = g.value(pass.o);
        let z = g.value(pass.z);
        for (b, _) in chunk.iter().enumerate() {
            out.push(ClipPrediction {
                y: Tensor::new([l], y.data()[b * l..(b + 1) * l].to_vec())?,
                o: Tensor::new([t, l], o.data()[b * t * l..(b + 1) * t * l].to_vec())?,
                z: Tensor::new([t, l], z.data()[b * t * l..(b + 1) * t * l].to_vec())?,
            });
        }
    }
    Ok(out)
}

/// Averages the predictions of several parameter sets (checkpoint
/// ensembling): `y`, `o`, and `z` are averaged elementwise.
pub fn ensemble_predict<T: Element>(
    cfg: &ModelConfig,
    members: &[&ParamSet<T>],
    features: &[Tensor<T>],
) -> Result<Vec<ClipPrediction<T>>> {
    if members.is_empty() {
        return Err(CoreError::invalid("ensemble", "no checkpoints selected"));
    }
    let mut acc: Vec<ClipPrediction<T>> = predict(cfg, members[0], features)?;
    for member in &members[1..] {
        let preds = predict(cfg, member, features)?;
        for (a, p) in acc.iter_mut().zip(preds) {
            for (dst, src) in a.y.data_mut().iter_mut().zip(p.y.data()) {
                *dst = *dst + *src;
            }
            for (dst, src) in a.o.data_mut().iter_mut().zip(p.o.data()) {
                *dst = *dst + *src;
            }
            for (dst, src) in a.z.data_mut().iter_mut().zip(p.z.data()) {
                *dst = *dst + *src;
            }
        }
    }
    let scale = num::<T>(1.0 / members.len() as f64);
    for a in &mut acc {
        for v in a.y.data_mut() {
            *v = *v * scale;
        }
        for v in a.o.data_mut() {
            *v = *v * scale;
        }
        for v in a.z.data_mut() {
            *v = *v * scale;
        }
    }
    Ok(acc)
}
