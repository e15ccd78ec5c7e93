//! Dataset directory conventions.
//!
//! A dataset directory holds per-subject containers named
//! `subjectNNN_<kind>.{json,raw}`: `flair` (raw volume) and `mask` from
//! `synth`; `chan0`/`chan1` (plus the copied `mask`) from `preprocess`;
//! `pred` from `predict`.

use crate::{usage_error, CliError};
use std::path::{Path, PathBuf};
use voxseg::preprocess::MultiChannelVolume;
use voxseg::volume::Volume;

pub fn subject_name(index: usize) -> String {
    format!("subject{index:03}")
}

pub fn subject_base(dir: &Path, index: usize, kind: &str) -> PathBuf {
    dir.join(format!("{}_{kind}", subject_name(index)))
}

/// Subjects present in a directory, identified by `subjectNNN_<kind>.json`.
pub fn list_subjects(dir: &Path, kind: &str) -> Result<Vec<usize>, CliError> {
    if !dir.is_dir() {
        return Err(usage_error(format!("input directory {} does not exist", dir.display())));
    }
    let mut subjects = Vec::new();
    let suffix = format!("_{kind}.json");
    let entries = std::fs::read_dir(dir)
        .map_err(|e| usage_error(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("subject") {
            if let Some(num) = rest.strip_suffix(&suffix) {
                if let Ok(idx) = num.parse::<usize>() {
                    subjects.push(idx);
                }
            }
        }
    }
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.is_empty() {
        return Err(usage_error(format!(
            "no subject*_{kind}.json files found in {}",
            dir.display()
        )));
    }
    Ok(subjects)
}

/// Loads the 2-channel representation written by `preprocess`.
pub fn load_mcv(dir: &Path, subject: usize) -> Result<MultiChannelVolume, CliError> {
    let ch0 = Volume::read(&subject_base(dir, subject, "chan0"))?;
    let ch1 = Volume::read(&subject_base(dir, subject, "chan1"))?;
    Ok(MultiChannelVolume::from_channels(&[&ch0, &ch1])?)
}

/// Runs `job` over the subjects, optionally on several worker threads.
/// Subjects are independent, so the outputs match the serial order exactly.
pub fn for_each_subject<F>(subjects: &[usize], threads: usize, job: F) -> Result<(), CliError>
where
    F: Fn(usize) -> Result<(), CliError> + Sync,
{
    if threads <= 1 || subjects.len() <= 1 {
        for &s in subjects {
            job(s)?;
        }
        return Ok(());
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let failure = std::sync::Mutex::new(None::<CliError>);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(subjects.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= subjects.len() {
                    break;
                }
                if let Err(e) = job(subjects[i]) {
                    *failure.lock().unwrap() = Some(e);
                    break;
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
