//! Run manifests: every subcommand records its resolved configuration,
//! inputs/outputs, seed, and wall-clock duration alongside its artifacts.
//! Replaying the recorded invocation reproduces the outputs bit-identically
//! in single-thread mode (the manifest itself carries timing, so it is the
//! one file excluded from byte comparisons).

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::Path;
use std::time::Instant;

#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    /// All flags with defaults materialized.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_ms: u128,
}

pub struct ManifestBuilder {
    subcommand: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(self, dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            tool_version: voxseg::VERSION.to_string(),
            subcommand: self.subcommand,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_ms: self.started.elapsed().as_millis(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
