//! Lesion-wise and voxel-wise evaluation.
//!
//! Lesions are 18-connected components (steps share a face or an edge;
//! corner-only contact does not connect). DSC/LTPR/LFPR/AVD follow the usual
//! lesion-challenge conventions, with the empty-mask cases pinned explicitly:
//! both-empty DSC = 1, no-GT LTPR = 1, no-prediction LFPR = 0, and AVD is
//! undefined for an empty prediction (its denominator).

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// The 18-neighborhood: offsets with at most two nonzero coordinates.
pub const OFFSETS_18: [(i32, i32, i32); 18] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
    (-1, -1, 0),
    (-1, 1, 0),
    (1, -1, 0),
    (1, 1, 0),
    (-1, 0, -1),
    (-1, 0, 1),
    (1, 0, -1),
    (1, 0, 1),
    (0, -1, -1),
    (0, -1, 1),
    (0, 1, -1),
    (0, 1, 1),
];

#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    pub dims: [usize; 3],
    /// 0 = background; foreground labels are contiguous 1..=n_components.
    pub labels: Vec<u32>,
    pub n_components: usize,
    pub component_sizes: Vec<usize>,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            // Path halving.
            self.parent[i as usize] = self.parent[self.parent[i as usize] as usize];
            i = self.parent[i as usize];
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins, keeping labels in scan order.
            if ra < rb {
                self.parent[rb as usize] = ra;
            } else {
                self.parent[ra as usize] = rb;
            }
        }
    }
}

/// Labels 18-connected foreground components, numbering them 1.. in scan
/// order of their first voxel.
pub fn connected_components_18(mask: &LabelVolume) -> ComponentLabeling {
    let [d, h, w] = mask.dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let n = mask.data.len();
    let mut dsu = DisjointSet::new(n);
    // Union each foreground voxel with its already-visited 18-neighbors.
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if mask.data[i] == 0 {
                    continue;
                }
                for &(dz, dy, dx) in &OFFSETS_18 {
                    // Only look backward in scan order; the forward half is
                    // covered when the neighbor is visited.
                    if (dz, dy, dx) >= (0, 0, 0) {
                        continue;
                    }
                    let nz = z as i32 + dz;
                    let ny = y as i32 + dy;
                    let nx = x as i32 + dx;
                    if nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= d as i32
                        || ny >= h as i32
                        || nx >= w as i32
                    {
                        continue;
                    }
                    let j = idx(nz as usize, ny as usize, nx as usize);
                    if mask.data[j] == 1 {
                        dsu.union(i as u32, j as u32);
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut remap: Vec<u32> = vec![0; n];
    let mut sizes = Vec::new();
    let mut next = 0u32;
    for (i, label) in labels.iter_mut().enumerate() {
        if mask.data[i] == 0 {
            continue;
        }
        let root = dsu.find(i as u32) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
            sizes.push(0);
        }
        *label = remap[root];
        sizes[(remap[root] - 1) as usize] += 1;
    }
    ComponentLabeling {
        dims: mask.dims,
        labels,
        n_components: next as usize,
        component_sizes: sizes,
    }
}

fn check_dims(op: &'static str, a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(
            op,
            format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims),
        ));
    }
    Ok(())
}

/// Dice similarity coefficient 2|A ∩ B| / (|A| + |B|); 1.0 when both empty.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_dims("dsc", pred, gt)?;
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&p, &g)| p == 1 && g == 1)
        .count();
    let total = pred.volume() + gt.volume();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Fraction of ground-truth lesions touched (>= 1 shared voxel) by the
/// prediction; 1.0 when there are no ground-truth lesions.
pub fn ltpr(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_dims("ltpr", pred, gt)?;
    let gt_cc = connected_components_18(gt);
    if gt_cc.n_components == 0 {
        return Ok(1.0);
    }
    let mut touched = vec![false; gt_cc.n_components];
    for (i, &label) in gt_cc.labels.iter().enumerate() {
        if label > 0 && pred.data[i] == 1 {
            touched[(label - 1) as usize] = true;
        }
    }
    let hit = touched.iter().filter(|&&t| t).count();
    Ok(hit as f64 / gt_cc.n_components as f64)
}

/// Fraction of predicted lesions sharing no voxel with the ground truth;
/// 0.0 when nothing is predicted.
pub fn lfpr(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_dims("lfpr", pred, gt)?;
    let pred_cc = connected_components_18(pred);
    if pred_cc.n_components == 0 {
        return Ok(0.0);
    }
    let mut touched = vec![false; pred_cc.n_components];
    for (i, &label) in pred_cc.labels.iter().enumerate() {
        if label > 0 && gt.data[i] == 1 {
            touched[(label - 1) as usize] = true;
        }
    }
    let false_positive = touched.iter().filter(|&&t| !t).count();
    Ok(false_positive as f64 / pred_cc.n_components as f64)
}

/// Which total volume divides the absolute difference in `avd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AvdDenominator {
    /// |M_R|, the predicted volume (as printed in the source formula).
    #[default]
    Prediction,
    /// |M_A|, the ground-truth volume.
    GroundTruth,
}

/// Absolute volume difference: (max - min) / denominator volume; undefined
/// when the denominator mask is empty.
pub fn avd(pred: &LabelVolume, gt: &LabelVolume, denom: AvdDenominator) -> Result<f64> {
    check_dims("avd", pred, gt)?;
    let vp = pred.volume();
    let vg = gt.volume();
    let d = match denom {
        AvdDenominator::Prediction => vp,
        AvdDenominator::GroundTruth => vg,
    };
    if d == 0 {
        return Err(Error::UndefinedMetric(
            "absolute volume difference: denominator mask is empty".to_string(),
        ));
    }
    Ok((vp.max(vg) - vp.min(vg)) as f64 / d as f64)
}

/// Per-lesion (ground-truth volume, matched predicted volume) pairs: each GT
/// component pairs with the union of predicted components overlapping it.
/// Unmatched GT lesions produce no pair.
pub fn lesion_volume_pairs(pred: &LabelVolume, gt: &LabelVolume) -> Result<Vec<(f64, f64)>> {
    check_dims("lesion_volume_pairs", pred, gt)?;
    let gt_cc = connected_components_18(gt);
    let pred_cc = connected_components_18(pred);
    // Predicted components overlapping each GT component.
    let mut overlaps: Vec<Vec<u32>> = vec![Vec::new(); gt_cc.n_components];
    for i in 0..gt.data.len() {
        let gl = gt_cc.labels[i];
        let pl = pred_cc.labels[i];
        if gl > 0 && pl > 0 {
            let list = &mut overlaps[(gl - 1) as usize];
            if !list.contains(&pl) {
                list.push(pl);
            }
        }
    }
    let mut pairs = Vec::new();
    for (g, preds) in overlaps.iter().enumerate() {
        if preds.is_empty() {
            continue;
        }
        let pred_volume: usize =
            preds.iter().map(|&pl| pred_cc.component_sizes[(pl - 1) as usize]).sum();
        pairs.push((gt_cc.component_sizes[g] as f64, pred_volume as f64));
    }
    Ok(pairs)
}

/// Pearson correlation and least-squares slope (intercept fitted) of
/// predicted volumes regressed on ground-truth volumes.
pub fn volume_agreement(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "volume agreement needs >= 2 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in pairs {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric(
            "volume agreement: a series has zero variance".to_string(),
        ));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    let slope = sxy / sxx;
    Ok((r, slope))
}

/// The evaluation quartet for one subject plus lesion counts and pairs.
#[derive(Debug, Clone)]
pub struct SubjectEval {
    pub dsc: f64,
    pub ltpr: f64,
    pub lfpr: f64,
    /// None when the prediction is empty (AVD undefined).
    pub avd: Option<f64>,
    pub n_gt_lesions: usize,
    pub n_pred_lesions: usize,
    pub lesion_volume_pairs: Vec<(f64, f64)>,
}

pub fn evaluate_subject(pred: &LabelVolume, gt: &LabelVolume) -> Result<SubjectEval> {
    Ok(SubjectEval {
        dsc: dsc(pred, gt)?,
        ltpr: ltpr(pred, gt)?,
        lfpr: lfpr(pred, gt)?,
        avd: avd(pred, gt, AvdDenominator::Prediction).ok(),
        n_gt_lesions: connected_components_18(gt).n_components,
        n_pred_lesions: connected_components_18(pred).n_components,
        lesion_volume_pairs: lesion_volume_pairs(pred, gt)?,
    })
}
