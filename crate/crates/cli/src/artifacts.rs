//! Run directories: every file is written atomically, and each directory
//! carries `config.toml`, `manifest.json` (version, seed, input hashes) and
//! the subcommand's own outputs. Wall-clock timings go to `timing.json` so
//! that everything else is reproducible byte-for-byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use onion_core::container::write_atomic;
use onion_core::trainer::MetricRecord;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::failure::Failure;

pub const VERSION: &str = env!("ONIONLAB_VERSION");

pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    data_seed: u64,
    inputs: &'a BTreeMap<String, String>,
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> Result<Self, Failure> {
        std::fs::create_dir_all(root).map_err(|e| Failure::io(root, e))?;
        Ok(Self {
            root: root.to_owned(),
            command: command.to_owned(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Record the SHA-256 of an input file under `label`.
    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<(), Failure> {
        let hash = sha256_file(path)?;
        self.inputs.insert(label.to_owned(), hash);
        Ok(())
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        Ok(write_atomic(&self.path(name), bytes)?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn write_metrics(&self, metrics: &[MetricRecord]) -> Result<(), Failure> {
        let mut s = String::new();
        for m in metrics {
            s.push_str(&serde_json::to_string(m).expect("serializable"));
            s.push('\n');
        }
        self.write("metrics.jsonl", s.as_bytes())
    }

    pub fn write_timing(&self, seconds: f64) -> Result<(), Failure> {
        self.write_json("timing.json", &serde_json::json!({ "wall_seconds": seconds }))
    }

    /// Resolved config and manifest; call once inputs are registered.
    pub fn write_provenance(&self, cfg: &ExperimentConfig, seed: u64) -> Result<(), Failure> {
        self.write("config.toml", cfg.to_toml().as_bytes())?;
        self.write_json(
            "manifest.json",
            &Manifest {
                version: VERSION,
                command: &self.command,
                seed,
                data_seed: cfg.task.seed,
                inputs: &self.inputs,
            },
        )
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
