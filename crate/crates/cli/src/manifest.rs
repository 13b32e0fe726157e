use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// Sidecar record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments plus every setting resolved from files or defaults.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub build: String,
    pub wall_ms: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            workers: rayon::current_num_threads(),
            build: format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("L2R_BUILD_ID")),
            wall_ms: 0.0,
        }
    }

    /// `out.json` -> `out.manifest.json`; a directory gets `manifest.json`.
    pub fn path_for(out: &Path) -> PathBuf {
        if out.is_dir() {
            return out.join("manifest.json");
        }
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        out.with_file_name(format!("{stem}.manifest.json"))
    }

    pub fn write(&self, primary_out: &Path) -> anyhow::Result<PathBuf> {
        let p = Self::path_for(primary_out);
        std::fs::write(&p, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}
