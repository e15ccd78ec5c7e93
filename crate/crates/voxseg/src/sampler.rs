//! Seeded 4D patch sampling and the deterministic inference tiling.
//!
//! Training draws a lesion-centered / background-centered mixture: exactly
//! `round(lesion_fraction * count)` patches get a mask-positive center voxel.
//! Windows are clamped so every patch lies fully inside the volume. Inference
//! uses a non-overlapping tiling of the zero-padded volume instead.

use crate::error::{Error, Result};
use crate::preprocess::MultiChannelVolume;
use crate::rng::SplitMix64;
use crate::volume::LabelVolume;

/// One training unit: a channel-major 4D crop with its label crop.
#[derive(Debug, Clone)]
pub struct Patch {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
    pub label: Vec<u8>,
    /// Center voxel in volume coordinates ([z, y, x]).
    pub center: [usize; 3],
    pub source_id: u32,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub patch_size: usize,
    /// Fraction of patches centered on a lesion voxel (default 0.6).
    pub lesion_fraction: f64,
    pub count: usize,
    pub seed: u64,
    /// Stamped into each patch's `source_id`.
    pub source_id: u32,
}

impl SamplerConfig {
    pub fn lesion_count(&self) -> usize {
        (((self.lesion_fraction * self.count as f64) + 0.5).floor() as usize).min(self.count)
    }
}

/// Non-fatal irregularities during sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleWarning {
    /// Mask had no lesion voxels; the lesion quota was drawn from background.
    EmptyMask,
    /// Mask had no background voxels; the background quota was drawn from lesions.
    FullMask,
}

#[derive(Debug)]
pub struct SampleResult {
    pub patches: Vec<Patch>,
    pub warnings: Vec<SampleWarning>,
}

/// Window start for a desired center: center - P/2, clamped into the volume.
fn clamp_start(center: usize, p: usize, dim: usize) -> usize {
    let half = p / 2;
    let start = center.saturating_sub(half);
    start.min(dim - p)
}

pub fn sample_patches(
    mcv: &MultiChannelVolume,
    mask: &LabelVolume,
    cfg: &SamplerConfig,
) -> Result<SampleResult> {
    let p = cfg.patch_size;
    if mcv.dims != mask.dims {
        return Err(Error::shape(
            "sample_patches",
            format!("volume dims {:?} differ from mask dims {:?}", mcv.dims, mask.dims),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.lesion_fraction) {
        return Err(Error::invalid("sample_patches", "lesion_fraction must be in [0, 1]"));
    }
    if mcv.dims.iter().any(|&d| d < p) {
        return Err(Error::invalid(
            "sample_patches",
            format!("volume dims {:?} smaller than patch size {p}", mcv.dims),
        ));
    }

    let mut lesion_voxels = Vec::new();
    let mut background_voxels = Vec::new();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 1 {
            lesion_voxels.push(i);
        } else {
            background_voxels.push(i);
        }
    }

    if cfg.count > 0 && lesion_voxels.is_empty() && background_voxels.is_empty() {
        return Err(Error::invalid("sample_patches", "empty volume"));
    }
    let mut warnings = Vec::new();
    let mut n_lesion = cfg.lesion_count();
    if lesion_voxels.is_empty() && n_lesion > 0 {
        warnings.push(SampleWarning::EmptyMask);
        n_lesion = 0;
    }
    if background_voxels.is_empty() && cfg.count > n_lesion {
        warnings.push(SampleWarning::FullMask);
        n_lesion = cfg.count;
    }

    let [dd, hh, ww] = mcv.dims;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut patches = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let pool = if i < n_lesion { &lesion_voxels } else { &background_voxels };
        let flat = pool[rng.below(pool.len())];
        let center = [flat / (hh * ww), (flat / ww) % hh, flat % ww];
        let start = [
            clamp_start(center[0], p, dd),
            clamp_start(center[1], p, hh),
            clamp_start(center[2], p, ww),
        ];
        patches.push(extract_patch(mcv, mask, start, center, p, cfg.source_id));
    }
    Ok(SampleResult { patches, warnings })
}

fn extract_patch(
    mcv: &MultiChannelVolume,
    mask: &LabelVolume,
    start: [usize; 3],
    center: [usize; 3],
    p: usize,
    source_id: u32,
) -> Patch {
    let [_, hh, ww] = mcv.dims;
    let n = mcv.dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(mcv.channels * p * p * p);
    for c in 0..mcv.channels {
        let chan = &mcv.data[c * n..(c + 1) * n];
        for z in 0..p {
            for y in 0..p {
                let row = ((start[0] + z) * hh + start[1] + y) * ww + start[2];
                data.extend_from_slice(&chan[row..row + p]);
            }
        }
    }
    let mut label = Vec::with_capacity(p * p * p);
    for z in 0..p {
        for y in 0..p {
            let row = ((start[0] + z) * hh + start[1] + y) * ww + start[2];
            label.extend_from_slice(&mask.data[row..row + p]);
        }
    }
    Patch { channels: mcv.channels, size: p, data, label, center, source_id }
}

/// One window of the inference tiling, in padded-volume coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileWindow {
    pub start: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct TilePlan {
    pub patch_size: usize,
    pub original_dims: [usize; 3],
    /// Original dims rounded up to the next multiple of the patch size.
    pub padded_dims: [usize; 3],
    pub windows: Vec<TileWindow>,
}

/// Non-overlapping P^3 windows covering the volume zero-padded up to the
/// next multiple of P per axis. Reassembly crops back to the original dims.
pub fn tile_plan(dims: [usize; 3], p: usize) -> Result<TilePlan> {
    if p == 0 {
        return Err(Error::invalid("tile_plan", "patch size must be >= 1"));
    }
    let padded = [dims[0].div_ceil(p) * p, dims[1].div_ceil(p) * p, dims[2].div_ceil(p) * p];
    let mut windows = Vec::new();
    for z in (0..padded[0]).step_by(p) {
        for y in (0..padded[1]).step_by(p) {
            for x in (0..padded[2]).step_by(p) {
                windows.push(TileWindow { start: [z, y, x] });
            }
        }
    }
    Ok(TilePlan { patch_size: p, original_dims: dims, padded_dims: padded, windows })
}
