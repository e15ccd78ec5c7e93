//! The SCA-attention residual segmentation network.
//!
//! A configurable trunk of strided convolutions and SCA-VoxRes residual
//! blocks feeds four multi-resolution taps; each tap is deconvolved back to
//! input resolution and the concatenation goes through a 1x1x1 segmentation
//! head with a per-voxel class softmax. The full-scale preset carries 25
//! conv/deconv layers, 6 SCA-VoxRes modules, 3 stride-2 convolutions and a
//! 224-channel tap concatenation; the toy preset keeps the topology at 1/8
//! of the channel widths so everything runs on a desk.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, BnStats, NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Spatial-channel attention hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScaConfig {
    /// Channel-attention bottleneck divisor; module channels must divide by it.
    pub reduction: usize,
    /// Initial value of the learnable spatial-attention weight.
    pub omega_init: f64,
    /// Largest attention resolution N = D*H*W the affinity matrix may take.
    pub attention_limit: usize,
}

impl Default for ScaConfig {
    fn default() -> Self {
        ScaConfig { reduction: 8, omega_init: 0.0, attention_limit: 4096 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TrunkLayer {
    Conv { out_channels: usize, stride: usize },
    ScaVoxRes,
}

/// A multi-resolution tap: feature map taken after `after_layer`, sent through
/// a chain of stride-2 deconvolutions (k=4, pad=1) back to input resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TapSpec {
    pub after_layer: usize,
    /// Output channels of each deconvolution in the chain.
    pub chain: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub trunk: Vec<TrunkLayer>,
    pub taps: Vec<TapSpec>,
    pub n_classes: usize,
    pub sca: ScaConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Counts reported by the config validator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigSummary {
    pub conv_deconv_layers: usize,
    pub sca_voxres_modules: usize,
    pub stride2_convs: usize,
    pub tap_channels: usize,
}

impl ModelConfig {
    /// Full-scale preset: trunk L1 conv32, L2 conv32, L3 conv64/s2 [tap],
    /// 2 SCA-VoxRes [tap after the first], conv64/s2, 2 SCA-VoxRes [tap],
    /// conv64/s2, 2 SCA-VoxRes [tap]; tap chains upsample with 1/1/2/3
    /// deconvolutions to 32+64+64+64 = 224 features per voxel.
    pub fn paper() -> Self {
        Self::with_widths(32, 64, ScaConfig::default())
    }

    /// Same topology at 1/8 of the channel widths.
    pub fn toy() -> Self {
        Self::with_widths(4, 8, ScaConfig { reduction: 4, ..ScaConfig::default() })
    }

    fn with_widths(w_stem: usize, w_body: usize, sca: ScaConfig) -> Self {
        use TrunkLayer::*;
        ModelConfig {
            in_channels: 2,
            trunk: vec![
                Conv { out_channels: w_stem, stride: 1 }, // L1
                Conv { out_channels: w_stem, stride: 1 }, // L2
                Conv { out_channels: w_body, stride: 2 }, // L3
                ScaVoxRes,                                // L4-5
                ScaVoxRes,                                // L6-7
                Conv { out_channels: w_body, stride: 2 }, // L8
                ScaVoxRes,                                // L9-10
                ScaVoxRes,                                // L11-12
                Conv { out_channels: w_body, stride: 2 }, // L13
                ScaVoxRes,                                // L14-15
                ScaVoxRes,                                // L16-17
            ],
            taps: vec![
                TapSpec { after_layer: 2, chain: vec![w_stem] },
                TapSpec { after_layer: 3, chain: vec![w_body] },
                TapSpec { after_layer: 7, chain: vec![w_body, w_body] },
                TapSpec { after_layer: 10, chain: vec![w_body, w_body, w_body] },
            ],
            n_classes: 2,
            sca,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Channels flowing out of trunk layer `i`.
    fn channels_after(&self, layer: usize) -> Result<usize> {
        let mut c = self.in_channels;
        for (i, l) in self.trunk.iter().enumerate() {
            if let TrunkLayer::Conv { out_channels, .. } = l {
                c = *out_channels;
            }
            if i == layer {
                return Ok(c);
            }
        }
        Err(Error::InvalidConfig(format!("trunk layer {layer} out of range")))
    }

    /// Stride-2 layers at or before trunk layer `i`.
    fn downsamples_before(&self, layer: usize) -> usize {
        self.trunk[..=layer]
            .iter()
            .filter(|l| matches!(l, TrunkLayer::Conv { stride: 2, .. }))
            .count()
    }

    /// Total concatenated tap channels (the segmentation head input).
    pub fn tap_channels(&self) -> usize {
        self.taps.iter().map(|t| *t.chain.last().unwrap_or(&0)).sum()
    }

    /// Total downsampling factor; input extents must divide by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self
            .trunk
            .iter()
            .filter(|l| matches!(l, TrunkLayer::Conv { stride: 2, .. }))
            .count()
    }

    /// Structural validation; returns the layer-count summary.
    pub fn validate(&self) -> Result<ConfigSummary> {
        if self.trunk.is_empty() {
            return Err(Error::InvalidConfig("empty trunk".into()));
        }
        if !matches!(self.trunk[0], TrunkLayer::Conv { .. }) {
            return Err(Error::InvalidConfig("trunk must start with a convolution".into()));
        }
        let mut conv_deconv = 0usize;
        let mut modules = 0usize;
        let mut stride2 = 0usize;
        for (i, l) in self.trunk.iter().enumerate() {
            match l {
                TrunkLayer::Conv { out_channels, stride } => {
                    if *out_channels == 0 {
                        return Err(Error::InvalidConfig(format!("layer {i}: zero channels")));
                    }
                    if !(*stride == 1 || *stride == 2) {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: stride {stride} unsupported"
                        )));
                    }
                    conv_deconv += 1;
                    if *stride == 2 {
                        stride2 += 1;
                    }
                }
                TrunkLayer::ScaVoxRes => {
                    let c = self.channels_after(i)?;
                    if c % self.sca.reduction != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: {c} channels not divisible by SCA reduction {}",
                            self.sca.reduction
                        )));
                    }
                    conv_deconv += 2;
                    modules += 1;
                }
            }
        }
        if self.taps.is_empty() {
            return Err(Error::InvalidConfig("no taps".into()));
        }
        for (t, tap) in self.taps.iter().enumerate() {
            if tap.after_layer >= self.trunk.len() {
                return Err(Error::InvalidConfig(format!("tap {t}: layer index out of range")));
            }
            if tap.chain.is_empty() {
                return Err(Error::InvalidConfig(format!("tap {t}: empty deconvolution chain")));
            }
            let down = self.downsamples_before(tap.after_layer);
            if tap.chain.len() != down {
                return Err(Error::InvalidConfig(format!(
                    "tap {t}: {} deconvolutions cannot restore {down} downsamplings",
                    tap.chain.len()
                )));
            }
            conv_deconv += tap.chain.len();
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        conv_deconv += 1; // segmentation head
        Ok(ConfigSummary {
            conv_deconv_layers: conv_deconv,
            sca_voxres_modules: modules,
            stride2_convs: stride2,
            tap_channels: self.tap_channels(),
        })
    }
}

/// A named parameter tensor; non-trainable entries carry running statistics.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// The flat set of learnable parameters plus batch-norm running statistics,
/// keyed by stable names so iteration order is deterministic.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
    /// Train-mode batches folded into the running statistics so far.
    pub bn_batches: u64,
}

impl<T: Scalar> ModelParams<T> {
    pub fn empty() -> Self {
        ModelParams { entries: BTreeMap::new(), bn_batches: 0 }
    }

    /// Fan-in-scaled uniform initialization, deterministic for a fixed seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::derive(seed, 0x6d6f64656c);
        let mut params = ModelParams::empty();

        let mut channels = cfg.in_channels;
        for (i, layer) in cfg.trunk.iter().enumerate() {
            let prefix = format!("trunk{i:02}");
            match layer {
                TrunkLayer::Conv { out_channels, .. } => {
                    params.insert_conv(&mut rng, &format!("{prefix}.conv"), *out_channels, channels, 3)?;
                    params.insert_bn(&format!("{prefix}.bn"), *out_channels)?;
                    channels = *out_channels;
                }
                TrunkLayer::ScaVoxRes => {
                    let c = channels;
                    params.insert_bn(&format!("{prefix}.bn1"), c)?;
                    params.insert_conv(&mut rng, &format!("{prefix}.conv1"), c, c, 3)?;
                    params.insert_bn(&format!("{prefix}.bn2"), c)?;
                    params.insert_conv(&mut rng, &format!("{prefix}.conv2"), c, c, 3)?;
                    let hidden = c / cfg.sca.reduction;
                    params.insert_fc(&mut rng, &format!("{prefix}.sca.fc1"), hidden, c)?;
                    params.insert_fc(&mut rng, &format!("{prefix}.sca.fc2"), c, hidden)?;
                    for proj in ["proj_a", "proj_b", "proj_c"] {
                        params.insert_conv(&mut rng, &format!("{prefix}.sca.{proj}"), c, c, 1)?;
                    }
                    params.insert(
                        format!("{prefix}.sca.omega"),
                        Tensor::new(&[1], vec![T::of_f64(cfg.sca.omega_init)])?,
                        true,
                    );
                }
            }
        }

        for (t, tap) in cfg.taps.iter().enumerate() {
            let mut c_in = cfg.channels_after(tap.after_layer)?;
            for (j, &c_out) in tap.chain.iter().enumerate() {
                params.insert_deconv(&mut rng, &format!("tap{t}.deconv{j}"), c_in, c_out, 4, 2)?;
                params.insert_bn(&format!("tap{t}.bn{j}"), c_out)?;
                c_in = c_out;
            }
        }

        params.insert_conv(&mut rng, "head", cfg.n_classes, cfg.tap_channels(), 1)?;
        Ok(params)
    }

    /// Head-only parameter set for decision-level fusion over `paths` paths.
    pub fn init_fusion_head(cfg: &ModelConfig, paths: usize, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::derive(seed, 0x68656164);
        let mut params = ModelParams::empty();
        params.insert_conv(&mut rng, "head", cfg.n_classes, paths * cfg.tap_channels(), 1)?;
        Ok(params)
    }

    fn uniform_tensor(rng: &mut SplitMix64, shape: &[usize], bound: f64) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of_f64(rng.uniform(-bound, bound))).collect();
        Tensor::new(shape, data)
    }

    fn insert_conv(
        &mut self,
        rng: &mut SplitMix64,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) -> Result<()> {
        let bound = 1.0 / ((c_in * k * k * k) as f64).sqrt();
        let w = Self::uniform_tensor(rng, &[c_out, c_in, k, k, k], bound)?;
        self.insert(format!("{prefix}.weight"), w, true);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]), true);
        Ok(())
    }

    fn insert_deconv(
        &mut self,
        rng: &mut SplitMix64,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<()> {
        // Each output voxel receives k^3 / stride^3 contributions.
        let fan_in = (c_in * k * k * k) / (stride * stride * stride);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Self::uniform_tensor(rng, &[c_in, c_out, k, k, k], bound)?;
        self.insert(format!("{prefix}.weight"), w, true);
        Ok(())
    }

    fn insert_fc(
        &mut self,
        rng: &mut SplitMix64,
        prefix: &str,
        out: usize,
        inp: usize,
    ) -> Result<()> {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = Self::uniform_tensor(rng, &[out, inp], bound)?;
        self.insert(format!("{prefix}.weight"), w, true);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]), true);
        Ok(())
    }

    fn insert_bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::filled(&[c], T::one()), true);
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), true);
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false);
        self.insert(format!("{prefix}.running_var"), Tensor::filled(&[c], T::one()), false);
        Ok(())
    }

    pub fn insert(&mut self, name: String, tensor: Tensor<T>, trainable: bool) {
        self.entries.insert(name, Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter().filter(|(_, p)| p.trainable).map(|(n, p)| (n, &p.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (n.clone(), Param { tensor: p.tensor.cast::<U>(), trainable: p.trainable })
                })
                .collect(),
            bn_batches: self.bn_batches,
        }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(
        &mut self,
        updates: &[(String, BnStats<T>)],
        momentum: f64,
    ) -> Result<()> {
        let m = T::of_f64(momentum);
        let one_m = T::of_f64(1.0 - momentum);
        for (prefix, stats) in updates {
            let rm = self.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = *r * one_m + b * m;
            }
            let rv = self.get_mut(&format!("{prefix}.running_var"))?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = *r * one_m + b * m;
            }
        }
        if !updates.is_empty() {
            self.bn_batches += 1;
        }
        Ok(())
    }
}

/// Forward execution mode: train uses batch statistics, eval running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter name -> tape node for one forward pass.
pub type Bound = BTreeMap<String, NodeId>;

/// Registers every parameter tensor on the tape.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Bound {
    let mut bound = BTreeMap::new();
    for (name, param) in params.iter() {
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            continue; // read directly, never differentiated
        }
        let mut t = param.tensor.clone();
        t.requires_grad = param.trainable;
        bound.insert(name.clone(), tape.leaf(&t));
    }
    bound
}

fn bound_id(bound: &Bound, name: &str) -> Result<NodeId> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("parameter `{name}` not bound")))
}

/// Output of a network forward pass.
pub struct ForwardOut<T: Scalar> {
    pub output: NodeId,
    /// Batch statistics per BN prefix, in execution order (train mode only).
    pub bn_updates: Vec<(String, BnStats<T>)>,
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    cfg: &'a ModelConfig,
    params: &'a ModelParams<T>,
    bound: &'a Bound,
    mode: Mode,
    bn_updates: Vec<(String, BnStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn bn(&mut self, prefix: &str, input: NodeId) -> Result<NodeId> {
        let gamma = bound_id(self.bound, &format!("{prefix}.gamma"))?;
        let beta = bound_id(self.bound, &format!("{prefix}.beta"))?;
        let eps = T::of_f64(self.cfg.bn_eps);
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.tape.batch_norm(input, gamma, beta, BnMode::Train, eps)?;
                self.bn_updates.push((prefix.to_string(), stats.expect("train stats")));
                Ok(out)
            }
            Mode::Eval => {
                if self.params.bn_batches == 0 {
                    return Err(Error::UninitializedStatistics);
                }
                let rm = self.params.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                let rv = self.params.get(&format!("{prefix}.running_var"))?.data().to_vec();
                let (out, _) = self.tape.batch_norm(
                    input,
                    gamma,
                    beta,
                    BnMode::Eval { running_mean: &rm, running_var: &rv },
                    eps,
                )?;
                Ok(out)
            }
        }
    }

    fn conv(&mut self, prefix: &str, input: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = bound_id(self.bound, &format!("{prefix}.weight"))?;
        let b = bound_id(self.bound, &format!("{prefix}.bias"))?;
        self.tape.conv3d(input, w, b, stride, pad)
    }

    fn deconv(&mut self, prefix: &str, input: NodeId) -> Result<NodeId> {
        let w = bound_id(self.bound, &format!("{prefix}.weight"))?;
        self.tape.conv_transpose3d(input, w, 2, 1)
    }
}

/// Squeeze-excitation style channel gate:
/// X = sigmoid(FC2(relu(FC1(avgpool(F))))), output[c] = X[c] * F[c].
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    f: NodeId,
) -> Result<NodeId> {
    let pooled = tape.global_avg_pool(f)?;
    let w1 = bound_id(bound, &format!("{prefix}.fc1.weight"))?;
    let b1 = bound_id(bound, &format!("{prefix}.fc1.bias"))?;
    let h = tape.fully_connected(pooled, w1, b1)?;
    let h = tape.relu(h);
    let w2 = bound_id(bound, &format!("{prefix}.fc2.weight"))?;
    let b2 = bound_id(bound, &format!("{prefix}.fc2.bias"))?;
    let gate = tape.fully_connected(h, w2, b2)?;
    let gate = tape.sigmoid(gate);
    tape.scale_channels(f, gate)
}

fn attention_projection<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    name: &str,
    f: NodeId,
) -> Result<NodeId> {
    let w = bound_id(bound, &format!("{prefix}.{name}.weight"))?;
    let b = bound_id(bound, &format!("{prefix}.{name}.bias"))?;
    tape.conv3d(f, w, b, 1, 0)
}

/// The [N, N] attention map E = softmax over i of (B·Aᵀ): every column sums
/// to 1, so E_ij weights how much voxel i contributes to voxel j.
pub fn spatial_affinity<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    f: NodeId,
) -> Result<NodeId> {
    let shape = tape.shape(f).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let a = attention_projection(tape, bound, prefix, "proj_a", f)?;
    let b = attention_projection(tape, bound, prefix, "proj_b", f)?;
    // Channel-major [C, N] is already the transpose of the [N, C] reshape.
    let a_cn = tape.reshape(a, &[c, n])?;
    let b_cn = tape.reshape(b, &[c, n])?;
    let b_nc = tape.transpose2d(b_cn)?;
    let affinity = tape.matmul(b_nc, a_cn)?; // [N, N], entry (i, j) = B_i · A_j
    tape.softmax(affinity, 0)
}

/// Voxel-affinity spatial attention:
/// A, B, C = 1x1x1 convolutions of F; E = softmax_i(B·Aᵀ) over the i axis;
/// O_j = omega * sum_i(E_ij C_i) + F_j.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    f: NodeId,
    attention_limit: usize,
) -> Result<NodeId> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("spatial_attention", format!("input must be [C,D,H,W], got {shape:?}")));
    }
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    if n > attention_limit {
        return Err(Error::AttentionTooLarge { n, limit: attention_limit });
    }
    // Work with Eᵀ throughout: Eᵀ = softmax over axis 1 of (B·Aᵀ)ᵀ = A·Bᵀ,
    // which keeps every softmax lane contiguous and avoids an N x N transpose.
    let a = attention_projection(tape, bound, prefix, "proj_a", f)?;
    let b = attention_projection(tape, bound, prefix, "proj_b", f)?;
    let cmap = attention_projection(tape, bound, prefix, "proj_c", f)?;
    let a_cn = tape.reshape(a, &[c, n])?;
    let b_cn = tape.reshape(b, &[c, n])?;
    let c_cn = tape.reshape(cmap, &[c, n])?;
    let a_nc = tape.transpose2d(a_cn)?;
    let affinity_t = tape.matmul(a_nc, b_cn)?; // [N, N], entry (j, i) = B_i · A_j
    let e_t = tape.softmax(affinity_t, 1)?; // row j: weights E_ij over i
    let c_nc = tape.transpose2d(c_cn)?;
    let mixed = tape.matmul(e_t, c_nc)?; // [N, C], row j = sum_i E_ij C_i
    let mixed_cn = tape.transpose2d(mixed)?;
    let mixed_vol = tape.reshape(mixed_cn, &shape)?;
    let omega = bound_id(bound, &format!("{prefix}.omega"))?;
    let scaled = tape.scale_by_scalar(mixed_vol, omega)?;
    tape.add(scaled, f)
}

/// Pre-activation residual block with the SCA module on the transform branch:
/// y = x + SCA(conv(relu(bn(conv(relu(bn(x))))))).
pub fn sca_voxres_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    bound: &Bound,
    prefix: &str,
    input: NodeId,
    mode: Mode,
) -> Result<ForwardOut<T>> {
    let mut ctx = Ctx { tape, cfg, params, bound, mode, bn_updates: Vec::new() };
    let out = sca_voxres_in_ctx(&mut ctx, prefix, input)?;
    Ok(ForwardOut { output: out, bn_updates: ctx.bn_updates })
}

fn sca_voxres_in_ctx<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId> {
    let in_shape = ctx.tape.shape(input).to_vec();
    let h = ctx.bn(&format!("{prefix}.bn1"), input)?;
    let h = ctx.tape.relu(h);
    let h = ctx.conv(&format!("{prefix}.conv1"), h, 1, 1)?;
    let h = ctx.bn(&format!("{prefix}.bn2"), h)?;
    let h = ctx.tape.relu(h);
    let h = ctx.conv(&format!("{prefix}.conv2"), h, 1, 1)?;
    let h = channel_attention(ctx.tape, ctx.bound, &format!("{prefix}.sca"), h)?;
    let h = spatial_attention(
        ctx.tape,
        ctx.bound,
        &format!("{prefix}.sca"),
        h,
        ctx.cfg.sca.attention_limit,
    )?;
    if ctx.tape.shape(h) != in_shape {
        return Err(Error::shape(
            "sca_voxres",
            format!("shape drift inside block: {:?} -> {:?}", in_shape, ctx.tape.shape(h)),
        ));
    }
    ctx.tape.add(input, h)
}

/// Runs the trunk, deconvolves the taps back to input resolution, and
/// concatenates them into the per-voxel feature stack.
pub fn base_model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    bound: &Bound,
    input: NodeId,
    mode: Mode,
) -> Result<ForwardOut<T>> {
    let ishape = tape.shape(input).to_vec();
    if ishape.len() != 4 || ishape[0] != cfg.in_channels {
        return Err(Error::shape(
            "base_model",
            format!("input must be [{}, P, P, P], got {ishape:?}", cfg.in_channels),
        ));
    }
    let factor = cfg.downsample_factor();
    for &d in &ishape[1..] {
        if d % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "input extent {d} not divisible by the downsampling factor {factor}"
            )));
        }
    }

    let mut ctx = Ctx { tape, cfg, params, bound, mode, bn_updates: Vec::new() };
    let mut x = input;
    let mut tap_sources: Vec<Option<NodeId>> = vec![None; cfg.taps.len()];
    for (i, layer) in cfg.trunk.iter().enumerate() {
        let prefix = format!("trunk{i:02}");
        x = match layer {
            TrunkLayer::Conv { stride, .. } => {
                let h = ctx.conv(&format!("{prefix}.conv"), x, *stride, 1)?;
                let h = ctx.bn(&format!("{prefix}.bn"), h)?;
                ctx.tape.relu(h)
            }
            TrunkLayer::ScaVoxRes => sca_voxres_in_ctx(&mut ctx, &prefix, x)?,
        };
        for (t, tap) in cfg.taps.iter().enumerate() {
            if tap.after_layer == i {
                tap_sources[t] = Some(x);
            }
        }
    }

    let mut tap_features = Vec::with_capacity(cfg.taps.len());
    for (t, tap) in cfg.taps.iter().enumerate() {
        let mut y = tap_sources[t]
            .ok_or_else(|| Error::InvalidConfig(format!("tap {t} source missing")))?;
        for j in 0..tap.chain.len() {
            y = ctx.deconv(&format!("tap{t}.deconv{j}"), y)?;
            y = ctx.bn(&format!("tap{t}.bn{j}"), y)?;
            y = ctx.tape.relu(y);
        }
        tap_features.push(y);
    }
    let features = ctx.tape.concat_channels(&tap_features)?;
    let expected = cfg.tap_channels();
    if ctx.tape.shape(features)[0] != expected {
        return Err(Error::shape(
            "base_model",
            format!("tap concatenation has {} channels, expected {expected}", ctx.tape.shape(features)[0]),
        ));
    }
    Ok(ForwardOut { output: features, bn_updates: ctx.bn_updates })
}

/// 1x1x1 classification convolution + per-voxel class softmax.
pub fn segmentation_head<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    features: NodeId,
) -> Result<NodeId> {
    let w = bound_id(bound, "head.weight")?;
    let b = bound_id(bound, "head.bias")?;
    let logits = tape.conv3d(features, w, b, 1, 0)?;
    tape.softmax(logits, 0)
}

/// Full single-path model: base features -> head probabilities.
pub fn single_path_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    bound: &Bound,
    input: NodeId,
    mode: Mode,
) -> Result<ForwardOut<T>> {
    let base = base_model_forward(tape, cfg, params, bound, input, mode)?;
    let probs = segmentation_head(tape, bound, base.output)?;
    Ok(ForwardOut { output: probs, bn_updates: base.bn_updates })
}

/// Decision-level fusion: one base model per modality, feature maps
/// concatenated, then a shared segmentation head over 2x the tap channels.
#[allow(clippy::too_many_arguments)]
pub fn two_path_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    flair_params: &ModelParams<T>,
    t1_params: &ModelParams<T>,
    flair_bound: &Bound,
    t1_bound: &Bound,
    head_bound: &Bound,
    flair_in: NodeId,
    t1_in: NodeId,
    mode: Mode,
) -> Result<TwoPathOut<T>> {
    if tape.shape(flair_in) != tape.shape(t1_in) {
        return Err(Error::shape(
            "two_path",
            format!(
                "modality dims differ: {:?} vs {:?}",
                tape.shape(flair_in),
                tape.shape(t1_in)
            ),
        ));
    }
    let flair = base_model_forward(tape, cfg, flair_params, flair_bound, flair_in, mode)?;
    let t1 = base_model_forward(tape, cfg, t1_params, t1_bound, t1_in, mode)?;
    let fused = tape.concat_channels(&[flair.output, t1.output])?;
    let probs = segmentation_head(tape, head_bound, fused)?;
    Ok(TwoPathOut {
        output: probs,
        fused_features: fused,
        flair_bn_updates: flair.bn_updates,
        t1_bn_updates: t1.bn_updates,
    })
}

pub struct TwoPathOut<T: Scalar> {
    pub output: NodeId,
    pub fused_features: NodeId,
    pub flair_bn_updates: Vec<(String, BnStats<T>)>,
    pub t1_bn_updates: Vec<(String, BnStats<T>)>,
}

#[cfg(test)]
mod tests;
