//! Per-run manifest: what ran, on which inputs, producing which files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hprobe::store;
use hprobe::Result;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

pub struct Run {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Run {
    pub fn new(command: &str, argv: &[String], config: &impl Serialize, seed: u64) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = store::hash_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        store::write_json(path, value)?;
        self.output(path);
        Ok(())
    }

    /// Writes `manifest-<command>.json` into `dir` and returns its path.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let config_bytes = serde_json::to_vec(&self.config).expect("config serializes");
        let manifest = RunManifest {
            command: self.command.clone(),
            argv: self.argv,
            config_hash: store::sha256_hex(&config_bytes),
            config: self.config,
            inputs: self.inputs,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join(format!("manifest-{}.json", self.command));
        store::write_json(&path, &manifest)?;
        Ok(path)
    }
}
