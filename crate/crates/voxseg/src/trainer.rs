//! Training loop (shuffle, batch, focal Tversky, Adam, exponential LR decay,
//! best-validation checkpointing) and tiled whole-volume prediction.

use crate::error::{Error, Result};
use crate::loss::{focal_tversky_loss, one_hot_labels, tversky_loss, LossConfig};
use crate::network::{
    bind_params, single_path_forward, ModelConfig, ModelParams, Mode,
};
use crate::network::checkpoint::save_checkpoint;
use crate::optim::{adam_step, lr_at_epoch, AdamConfig, AdamState};
use crate::preprocess::MultiChannelVolume;
use crate::rng::SplitMix64;
use crate::sampler::{tile_plan, Patch};
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::volume::LabelVolume;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Tversky,
    FocalTversky,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Per-epoch multiplier of the exponential schedule.
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr0: 1e-4,
            decay: 0.97,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            loss_kind: LossKind::FocalTversky,
        }
    }
}

/// One row of the loss history. Epoch 0 records the untrained model; epoch i
/// records the state after the i-th pass, trained at `lr`.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainState {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint_base: PathBuf,
}

fn patch_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    patch: &Patch,
    tcfg: &TrainConfig,
) -> Result<f64> {
    let (loss_value, _, _) = patch_forward_backward(cfg, params, patch, tcfg, false)?;
    Ok(loss_value)
}

type Grads<T> = BTreeMap<String, Vec<T>>;
type BnUpdates<T> = Vec<(String, crate::tensor::BnStats<T>)>;

/// Runs one patch through the network and the loss; optionally backpropagates
/// and returns parameter gradients plus BN batch statistics.
fn patch_forward_backward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    patch: &Patch,
    tcfg: &TrainConfig,
    with_grads: bool,
) -> Result<(f64, Option<Grads<T>>, BnUpdates<T>)> {
    let p = patch.size;
    let mut tape = Tape::<T>::new();
    let bound = bind_params(&mut tape, params);
    let data: Vec<T> = patch.data.iter().map(|&v| T::of_f64(v as f64)).collect();
    let input = tape.constant(&[patch.channels, p, p, p], data)?;
    let out = single_path_forward(&mut tape, cfg, params, &bound, input, Mode::Train)?;
    let (truth, _) = one_hot_labels::<T>(&patch.label);
    let g = tape.constant(&[2, p, p, p], truth)?;
    let loss = match tcfg.loss_kind {
        LossKind::Tversky => tversky_loss(&mut tape, out.output, g, &tcfg.loss)?,
        LossKind::FocalTversky => focal_tversky_loss(&mut tape, out.output, g, &tcfg.loss)?,
    };
    let loss_value = tape.value(loss)[0].as_f64();
    if !with_grads {
        return Ok((loss_value, None, out.bn_updates));
    }
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, tensor) in params.trainable() {
        let id = bound[name];
        let g = tape
            .grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
        grads.insert(name.clone(), g);
    }
    Ok((loss_value, Some(grads), out.bn_updates))
}

fn mean_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    patches: &[Patch],
    tcfg: &TrainConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    for patch in patches {
        sum += patch_loss(cfg, params, patch, tcfg)?;
    }
    Ok(sum / patches.len() as f64)
}

/// Trains in place. Writes `checkpoint_base.{json,raw}` whenever the
/// validation loss improves; on a divergence abort the last good checkpoint
/// stays on disk.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    params: &mut ModelParams<T>,
    train_patches: &[Patch],
    val_patches: &[Patch],
    tcfg: &TrainConfig,
    checkpoint_base: &Path,
) -> Result<TrainState> {
    if train_patches.is_empty() || val_patches.is_empty() {
        return Err(Error::invalid("train", "training and validation sets must be non-empty"));
    }
    tcfg.loss.validate()?;
    // lr 0 is a valid null update (used to probe the loop itself).
    if tcfg.lr0 < 0.0 || !(0.0 < tcfg.decay && tcfg.decay <= 1.0) {
        return Err(Error::invalid("train", "need lr0 >= 0 and decay in (0, 1]"));
    }
    if tcfg.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be >= 1"));
    }

    // Epoch-0 row: losses of the untrained model, checkpointed as the
    // starting best.
    let initial_train = mean_loss(cfg, params, train_patches, tcfg)?;
    let initial_val = mean_loss(cfg, params, val_patches, tcfg)?;
    save_checkpoint(checkpoint_base, cfg, params)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
        lr: lr_at_epoch(tcfg.lr0, tcfg.decay, 0),
    }];
    let mut best_epoch = 0usize;
    let mut best_val = initial_val;

    let mut adam = AdamState::<T>::new();
    let mut order: Vec<usize> = (0..train_patches.len()).collect();

    for epoch in 1..=tcfg.epochs {
        let lr = lr_at_epoch(tcfg.lr0, tcfg.decay, epoch - 1);
        let mut rng = SplitMix64::derive(tcfg.seed, epoch as u64);
        rng.shuffle(&mut order);

        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let scale = T::of_f64(1.0 / batch.len() as f64);
            let mut batch_grads: Grads<T> = BTreeMap::new();
            for &idx in batch {
                let patch = &train_patches[idx];
                let (loss_value, grads, bn_updates) =
                    patch_forward_backward(cfg, params, patch, tcfg, true)?;
                if !loss_value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("loss became {loss_value} on subject {}", patch.source_id),
                    });
                }
                epoch_loss_sum += loss_value;
                params.apply_bn_updates(&bn_updates, cfg.bn_momentum)?;
                for (name, g) in grads.expect("gradients requested") {
                    let entry = batch_grads
                        .entry(name)
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    for (acc, gv) in entry.iter_mut().zip(&g) {
                        *acc += *gv * scale;
                    }
                }
            }
            adam_step(params, &batch_grads, &mut adam, lr, &tcfg.adam)?;
        }
        let train_loss = epoch_loss_sum / train_patches.len() as f64;
        let val_loss = mean_loss(cfg, params, val_patches, tcfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss became {val_loss}"),
            });
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            save_checkpoint(checkpoint_base, cfg, params)?;
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, lr });
    }

    Ok(TrainState {
        history,
        best_epoch,
        best_val_loss: best_val,
        checkpoint_base: checkpoint_base.to_path_buf(),
    })
}

/// Mean loss of `params` over a patch set, using the training-mode loss
/// definition (matches the recorded history rows).
pub fn evaluate_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    patches: &[Patch],
    tcfg: &TrainConfig,
) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::invalid("evaluate_loss", "empty patch set"));
    }
    mean_loss(cfg, params, patches, tcfg)
}

/// Tiled whole-volume inference: non-overlapping windows over the zero-padded
/// volume, eval-mode forward per tile, lesion probability thresholded
/// strictly above 0.5 (exact ties map to background).
pub fn predict_volume<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    mcv: &MultiChannelVolume,
    patch_size: usize,
) -> Result<LabelVolume> {
    let factor = cfg.downsample_factor();
    if patch_size == 0 || !patch_size.is_multiple_of(factor) {
        return Err(Error::InvalidConfig(format!(
            "patch size {patch_size} must be a positive multiple of {factor}"
        )));
    }
    if mcv.channels != cfg.in_channels {
        return Err(Error::shape(
            "predict_volume",
            format!("volume has {} channels, model expects {}", mcv.channels, cfg.in_channels),
        ));
    }
    let plan = tile_plan(mcv.dims, patch_size)?;
    let p = patch_size;
    let [pd, ph, pw] = plan.padded_dims;
    let [d, h, w] = mcv.dims;
    let voxels = d * h * w;

    let mut lesion_prob = vec![0.0f64; pd * ph * pw];
    for window in &plan.windows {
        let [z0, y0, x0] = window.start;
        // Extract the window from each channel, zero-filled outside the
        // original volume.
        let mut data = vec![T::zero(); mcv.channels * p * p * p];
        for c in 0..mcv.channels {
            let chan = &mcv.data[c * voxels..(c + 1) * voxels];
            for z in 0..p {
                let vz = z0 + z;
                if vz >= d {
                    continue;
                }
                for y in 0..p {
                    let vy = y0 + y;
                    if vy >= h {
                        continue;
                    }
                    let n_copy = p.min(w.saturating_sub(x0));
                    let src = (vz * h + vy) * w + x0;
                    let dst = ((c * p + z) * p + y) * p;
                    for x in 0..n_copy {
                        data[dst + x] = T::of_f64(chan[src + x] as f64);
                    }
                }
            }
        }
        let mut tape = Tape::<T>::new();
        let bound = bind_params(&mut tape, params);
        let input = tape.constant(&[mcv.channels, p, p, p], data)?;
        let out = single_path_forward(&mut tape, cfg, params, &bound, input, Mode::Eval)?;
        let probs = tape.value(out.output);
        let lesion = &probs[p * p * p..2 * p * p * p];
        for z in 0..p {
            for y in 0..p {
                for x in 0..p {
                    let idx = ((z0 + z) * ph + y0 + y) * pw + x0 + x;
                    lesion_prob[idx] = lesion[(z * p + y) * p + x].as_f64();
                }
            }
        }
    }

    let mut mask = vec![0u8; voxels];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if lesion_prob[(z * ph + y) * pw + x] > 0.5 {
                    mask[(z * h + y) * w + x] = 1;
                }
            }
        }
    }
    LabelVolume::new(mcv.dims, mask)
}
