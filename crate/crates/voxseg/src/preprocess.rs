//! Raw volume -> 2-channel network input.
//!
//! Channel 0 is the contrast-enhanced image (CLAHE per axial slice), channel
//! 1 the 6-neighbor Laplacian edge map of the enhanced image; both are
//! z-scored over the nonzero support of the original image so they enter the
//! network on comparable scales.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Stacked per-channel volumes, channel-major.
#[derive(Debug, Clone)]
pub struct MultiChannelVolume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub voxel_mm: [f32; 3],
    pub data: Vec<f32>,
}

impl MultiChannelVolume {
    pub fn from_channels(chans: &[&Volume]) -> Result<Self> {
        let first = chans.first().ok_or_else(|| Error::invalid("mcv", "no channels"))?;
        let mut data = Vec::with_capacity(chans.len() * first.voxels());
        for c in chans {
            if c.dims != first.dims {
                return Err(Error::shape(
                    "mcv",
                    format!("channel dims differ: {:?} vs {:?}", first.dims, c.dims),
                ));
            }
            data.extend_from_slice(&c.data);
        }
        Ok(MultiChannelVolume {
            channels: chans.len(),
            dims: first.dims,
            voxel_mm: first.voxel_mm,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.iter().product::<usize>();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Which voxels define the normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSupport {
    All,
    /// Voxels that are nonzero in the reference image (skull-stripped
    /// background is zero in MRI practice).
    Nonzero,
}

const HIST_BINS: usize = 256;

/// Contrast-limited adaptive histogram equalization, applied per axial slice
/// (fixed D index) on the volume rescaled to [0,1].
///
/// Each slice is split into `tiles[0] x tiles[1]` regions; each region's
/// 256-bin histogram is clipped at `clip_limit x (mean bin count)` with the
/// excess redistributed uniformly, the per-tile CDF becomes the value
/// mapping, and mappings are interpolated bilinearly between tile centers.
/// A constant volume (or slice) passes through unchanged.
pub fn clahe(v: &Volume, clip_limit: f64, tiles: [usize; 2]) -> Result<Volume> {
    if clip_limit <= 0.0 {
        return Err(Error::invalid("clahe", "clip_limit must be positive"));
    }
    if tiles[0] == 0 || tiles[1] == 0 {
        return Err(Error::invalid("clahe", "tile counts must be >= 1"));
    }
    let [d, h, w] = v.dims;
    let lo = v.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("clahe", "non-finite input"));
    }
    if hi <= lo {
        // Degenerate histogram: constant volume passes through.
        return Ok(v.clone());
    }
    let scale = 1.0 / (hi - lo) as f64;
    let rescaled: Vec<f64> = v.data.iter().map(|&x| (x - lo) as f64 * scale).collect();

    let ty = tiles[0].min(h);
    let tx = tiles[1].min(w);
    let mut out = vec![0.0f32; v.data.len()];
    let mut cdfs = vec![0.0f64; ty * tx * HIST_BINS];
    let mut hist = vec![0.0f64; HIST_BINS];

    for z in 0..d {
        let slice = &rescaled[z * h * w..(z + 1) * h * w];
        let smin = slice.iter().cloned().fold(f64::INFINITY, f64::min);
        let smax = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let oslice = &mut out[z * h * w..(z + 1) * h * w];
        if smax <= smin {
            // Constant slice: identity on the rescaled values.
            for (o, &s) in oslice.iter_mut().zip(slice) {
                *o = s as f32;
            }
            continue;
        }

        // Per-tile clipped CDFs.
        for iy in 0..ty {
            let y0 = iy * h / ty;
            let y1 = (iy + 1) * h / ty;
            for ix in 0..tx {
                let x0 = ix * w / tx;
                let x1 = (ix + 1) * w / tx;
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                hist.fill(0.0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        hist[bin_of(slice[y * w + x])] += 1.0;
                    }
                }
                let thresh = clip_limit * area / HIST_BINS as f64;
                let mut excess = 0.0;
                for hv in hist.iter_mut() {
                    if *hv > thresh {
                        excess += *hv - thresh;
                        *hv = thresh;
                    }
                }
                let bonus = excess / HIST_BINS as f64;
                let cdf = &mut cdfs[(iy * tx + ix) * HIST_BINS..(iy * tx + ix + 1) * HIST_BINS];
                let mut acc = 0.0;
                for (c, hv) in cdf.iter_mut().zip(hist.iter()) {
                    acc += (*hv + bonus) / area;
                    *c = acc;
                }
            }
        }

        // Bilinear interpolation between tile-center mappings.
        let tile_h = h as f64 / ty as f64;
        let tile_w = w as f64 / tx as f64;
        for y in 0..h {
            let fy = (y as f64 + 0.5) / tile_h - 0.5;
            let y1 = fy.floor().max(0.0) as usize;
            let y2 = (y1 + 1).min(ty - 1);
            let wy = (fy - fy.floor()).clamp(0.0, 1.0);
            let wy = if fy < 0.0 { 0.0 } else { wy };
            for x in 0..w {
                let fx = (x as f64 + 0.5) / tile_w - 0.5;
                let x1 = fx.floor().max(0.0) as usize;
                let x2 = (x1 + 1).min(tx - 1);
                let wx = (fx - fx.floor()).clamp(0.0, 1.0);
                let wx = if fx < 0.0 { 0.0 } else { wx };
                let b = bin_of(slice[y * w + x]);
                let m11 = cdfs[(y1 * tx + x1) * HIST_BINS + b];
                let m12 = cdfs[(y1 * tx + x2) * HIST_BINS + b];
                let m21 = cdfs[(y2 * tx + x1) * HIST_BINS + b];
                let m22 = cdfs[(y2 * tx + x2) * HIST_BINS + b];
                let top = m11 * (1.0 - wx) + m12 * wx;
                let bot = m21 * (1.0 - wx) + m22 * wx;
                oslice[y * w + x] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
    }
    Volume::new(v.dims, v.voxel_mm, out)
}

#[inline]
fn bin_of(v: f64) -> usize {
    ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// 6-neighbor discrete Laplacian with replicate (clamp) borders:
/// out[p] = sum(face neighbors) - 6 * v[p].
pub fn laplacian3d(v: &Volume) -> Result<Volume> {
    let [d, h, w] = v.dims;
    if d < 3 || h < 3 || w < 3 {
        return Err(Error::invalid(
            "laplacian3d",
            format!("dims {:?} must be >= 3 per axis", v.dims),
        ));
    }
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![0.0f32; v.data.len()];
    for z in 0..d {
        let zm = z.saturating_sub(1);
        let zp = (z + 1).min(d - 1);
        for y in 0..h {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                let s = v.data[idx(zm, y, x)]
                    + v.data[idx(zp, y, x)]
                    + v.data[idx(z, ym, x)]
                    + v.data[idx(z, yp, x)]
                    + v.data[idx(z, y, xm)]
                    + v.data[idx(z, y, xp)];
                out[idx(z, y, x)] = s - 6.0 * v.data[idx(z, y, x)];
            }
        }
    }
    Volume::new(v.dims, v.voxel_mm, out)
}

/// (v - mean) / std with moments taken over `mask`-selected voxels and the
/// transform applied to every voxel. Statistics accumulate in f64.
pub fn zscore_over_mask(v: &Volume, mask: &[bool]) -> Result<Volume> {
    if mask.len() != v.data.len() {
        return Err(Error::shape("zscore", "support mask length differs from volume"));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "normalization support has {n} voxels, need at least 2"
        )));
    }
    let mut sum = 0.0f64;
    for (val, &m) in v.data.iter().zip(mask) {
        if m {
            sum += *val as f64;
        }
    }
    let mean = sum / n as f64;
    let mut var = 0.0f64;
    for (val, &m) in v.data.iter().zip(mask) {
        if m {
            var += (*val as f64 - mean).powi(2);
        }
    }
    var /= n as f64;
    if var < 1e-20 {
        return Err(Error::DegenerateInput(
            "zero variance over the normalization support".to_string(),
        ));
    }
    let inv_std = 1.0 / var.sqrt();
    let data: Vec<f32> = v.data.iter().map(|&x| ((x as f64 - mean) * inv_std) as f32).collect();
    Volume::new(v.dims, v.voxel_mm, data)
}

/// Zero-mean unit-variance normalization; the support is derived from `v`
/// itself.
pub fn zscore_normalize(v: &Volume, support: NormSupport) -> Result<Volume> {
    let mask: Vec<bool> = match support {
        NormSupport::All => vec![true; v.data.len()],
        NormSupport::Nonzero => v.data.iter().map(|&x| x != 0.0).collect(),
    };
    zscore_over_mask(v, &mask)
}

/// The full 2-channel representation:
/// channel 0 = zscore(clahe(rescale(v))), channel 1 = zscore(laplacian(clahe(rescale(v)))),
/// both normalized over the nonzero support of the original image.
pub fn build_channels(v: &Volume, clip_limit: f64, tiles: [usize; 2]) -> Result<MultiChannelVolume> {
    let enhanced = clahe(v, clip_limit, [tiles[0], tiles[1]])?;
    let edges = laplacian3d(&enhanced)?;
    let mask: Vec<bool> = v.data.iter().map(|&x| x != 0.0).collect();
    let ch0 = zscore_over_mask(&enhanced, &mask)?;
    let ch1 = zscore_over_mask(&edges, &mask)?;
    MultiChannelVolume::from_channels(&[&ch0, &ch1])
}
