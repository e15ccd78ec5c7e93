//! Seeded synthetic lesion datasets.
//!
//! Substitute for clinical data: the background is box-blurred uniform noise
//! in [0,1] (3 passes, radius 2, clamped borders) plus optional fine noise,
//! and lesions are random hyperintense ellipsoids whose interiors form the
//! ground-truth mask. Fully deterministic for a fixed spec.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub n_lesions: usize,
    /// Ellipsoid semi-axes are drawn uniformly from this range (voxels).
    pub lesion_radius_range: [f64; 2],
    /// Intensity multiplier applied inside lesions (clamped to 1.0).
    pub lesion_intensity: f64,
    /// Amplitude of per-voxel uniform noise added after blurring.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: [48, 48, 48],
            n_lesions: 3,
            lesion_radius_range: [3.0, 6.0],
            lesion_intensity: 2.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Logged lesion geometry; membership is sum(((x-c)/r)^2) <= 1.
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    /// Center in voxel coordinates, [z, y, x] order matching [D, H, W].
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let dz = (z as f64 - self.center[0]) / self.radii[0];
        let dy = (y as f64 - self.center[1]) / self.radii[1];
        let dx = (x as f64 - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub volume: Volume,
    pub mask: LabelVolume,
    /// The generated geometry, for reproducibility checks and manifests.
    pub lesions: Vec<Ellipsoid>,
}

const BLUR_RADIUS: usize = 2;
const BLUR_PASSES: usize = 3;

/// One box-blur pass along a single axis with clamped borders.
fn box_blur_axis(data: &mut Vec<f64>, dims: [usize; 3], axis: usize) {
    let [_, h, w] = dims;
    let strides = [h * w, w, 1usize];
    let extent = dims[axis];
    let stride = strides[axis];
    let window = 2 * BLUR_RADIUS + 1;
    let mut out = vec![0.0; data.len()];
    // Iterate over every line along `axis`.
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for i1 in 0..dims[o1] {
        for i2 in 0..dims[o2] {
            let base = i1 * strides[o1] + i2 * strides[o2];
            for i in 0..extent {
                let mut acc = 0.0;
                for k in 0..window {
                    let j = (i + k).saturating_sub(BLUR_RADIUS).min(extent - 1);
                    acc += data[base + j * stride];
                }
                out[base + i * stride] = acc / window as f64;
            }
        }
    }
    *data = out;
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthOutput> {
    let [rmin, rmax] = spec.lesion_radius_range;
    if !(1.0 <= rmin && rmin <= rmax) {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("radius range [{rmin}, {rmax}] must satisfy 1 <= min <= max"),
        ));
    }
    let margin = rmax + 1.0;
    for (i, &d) in spec.dims.iter().enumerate() {
        if (d as f64) <= 2.0 * margin {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("axis {i} extent {d} too small for max lesion radius {rmax}"),
            ));
        }
    }

    let [d, h, w] = spec.dims;
    let n = d * h * w;
    let mut rng = SplitMix64::new(spec.seed);

    let mut bg: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
    for _ in 0..BLUR_PASSES {
        for axis in 0..3 {
            box_blur_axis(&mut bg, spec.dims, axis);
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut bg {
            *v = (*v + rng.uniform(-spec.noise_sigma, spec.noise_sigma)).clamp(0.0, 1.0);
        }
    }

    let mut lesions = Vec::with_capacity(spec.n_lesions);
    for _ in 0..spec.n_lesions {
        let radii = [
            rng.uniform(rmin, rmax),
            rng.uniform(rmin, rmax),
            rng.uniform(rmin, rmax),
        ];
        let mut center = [0.0; 3];
        for axis in 0..3 {
            let lo = radii[axis] + 1.0;
            let hi = spec.dims[axis] as f64 - 1.0 - radii[axis] - 1.0;
            center[axis] = rng.uniform(lo, hi);
        }
        lesions.push(Ellipsoid { center, radii });
    }

    let mut mask = vec![0u8; n];
    for les in &lesions {
        let z0 = (les.center[0] - les.radii[0]).floor().max(0.0) as usize;
        let z1 = ((les.center[0] + les.radii[0]).ceil() as usize).min(d - 1);
        let y0 = (les.center[1] - les.radii[1]).floor().max(0.0) as usize;
        let y1 = ((les.center[1] + les.radii[1]).ceil() as usize).min(h - 1);
        let x0 = (les.center[2] - les.radii[2]).floor().max(0.0) as usize;
        let x1 = ((les.center[2] + les.radii[2]).ceil() as usize).min(w - 1);
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if les.contains(z, y, x) {
                        mask[(z * h + y) * w + x] = 1;
                    }
                }
            }
        }
    }

    let data: Vec<f32> = bg
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| {
            let out = if m == 1 { (v * spec.lesion_intensity).min(1.0) } else { v };
            out as f32
        })
        .collect();

    Ok(SynthOutput {
        volume: Volume::new(spec.dims, [1.0, 1.0, 1.0], data)?,
        mask: LabelVolume::new(spec.dims, mask)?,
        lesions,
    })
}
