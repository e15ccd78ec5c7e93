//! Patch archive: `<base>.json` manifest + `<base>.raw` payload.
//!
//! The payload holds train patches then validation patches; each patch is
//! channels*P^3 little-endian f32 values followed by P^3 u8 labels.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use voxseg::sampler::Patch;

#[derive(Serialize, Deserialize)]
pub struct PatchMeta {
    pub subject: u32,
    pub center: [usize; 3],
}

#[derive(Serialize, Deserialize)]
pub struct PatchArchiveHeader {
    pub version: u32,
    pub patch_size: usize,
    pub channels: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub train_subjects: Vec<usize>,
    pub val_subject: usize,
    pub holdout_subject: usize,
    /// Train metas first, then validation metas.
    pub entries: Vec<PatchMeta>,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub struct PatchArchive {
    pub header: PatchArchiveHeader,
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
}

pub fn save(
    base: &Path,
    train: &[Patch],
    val: &[Patch],
    train_subjects: &[usize],
    val_subject: usize,
    holdout_subject: usize,
) -> Result<()> {
    let first = train.first().or_else(|| val.first()).context("no patches to save")?;
    let p = first.size;
    let channels = first.channels;
    let mut entries = Vec::with_capacity(train.len() + val.len());
    let mut payload = Vec::new();
    for patch in train.iter().chain(val) {
        if patch.size != p || patch.channels != channels {
            bail!("inconsistent patch geometry in archive");
        }
        entries.push(PatchMeta { subject: patch.source_id, center: patch.center });
        for v in &patch.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(&patch.label);
    }
    let header = PatchArchiveHeader {
        version: 1,
        patch_size: p,
        channels,
        train_count: train.len(),
        val_count: val.len(),
        train_subjects: train_subjects.to_vec(),
        val_subject,
        holdout_subject,
        entries,
    };
    std::fs::write(with_ext(base, "json"), serde_json::to_string_pretty(&header)?)
        .with_context(|| format!("writing {}.json", base.display()))?;
    std::fs::write(with_ext(base, "raw"), payload)
        .with_context(|| format!("writing {}.raw", base.display()))?;
    Ok(())
}

pub fn load(base: &Path) -> Result<PatchArchive> {
    let jp = with_ext(base, "json");
    let header: PatchArchiveHeader = serde_json::from_str(
        &std::fs::read_to_string(&jp).with_context(|| format!("reading {}", jp.display()))?,
    )
    .with_context(|| format!("parsing {}", jp.display()))?;
    if header.version != 1 {
        bail!("unsupported patch archive version {}", header.version);
    }
    let rp = with_ext(base, "raw");
    let payload = std::fs::read(&rp).with_context(|| format!("reading {}", rp.display()))?;
    let p3 = header.patch_size.pow(3);
    let stride = header.channels * p3 * 4 + p3;
    let total = header.train_count + header.val_count;
    if payload.len() != total * stride {
        bail!(
            "patch archive payload is {} bytes, header implies {}",
            payload.len(),
            total * stride
        );
    }
    if header.entries.len() != total {
        bail!("patch archive has {} metas for {} patches", header.entries.len(), total);
    }
    let mut patches = Vec::with_capacity(total);
    for (i, meta) in header.entries.iter().enumerate() {
        let chunk = &payload[i * stride..(i + 1) * stride];
        let data: Vec<f32> = chunk[..header.channels * p3 * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let label = chunk[header.channels * p3 * 4..].to_vec();
        patches.push(Patch {
            channels: header.channels,
            size: header.patch_size,
            data,
            label,
            center: meta.center,
            source_id: meta.subject,
        });
    }
    let val = patches.split_off(header.train_count);
    Ok(PatchArchive { header, train: patches, val })
}
