//! Run manifest written atomically alongside every command's outputs.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use aga3d_core::error::{Error, Result};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
    pub duration_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: u64,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            started: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        self.config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Write `manifest.json` under `out_dir` via a temp file + rename.
    pub fn write(self, out_dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Contract(format!("manifest serialization: {e}")))?;
        let tmp = out_dir.join("manifest.json.tmp");
        let final_path = out_dir.join("manifest.json");
        fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, &final_path).map_err(|e| Error::io(final_path.display().to_string(), e))?;
        Ok(())
    }
}
