//! Run directories: manifest plus JSON/JSONL artifact writers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    /// Input path to `sha256:<hex>` of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_input(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: BTreeMap::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
        }
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), format!("sha256:{}", sha256_hex(bytes)));
    }
}

/// Output directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create(path: PathBuf, manifest: RunManifest) -> CliResult<Self> {
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(RunDir { path, manifest })
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
        self.write_text(name, &text)
    }

    pub fn jsonl(&self, name: &str) -> CliResult<JsonlWriter> {
        let p = self.path.join(name);
        let file = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(JsonlWriter { path: p, out: std::io::BufWriter::new(file) })
    }

    /// Stamps the finish time and writes the single manifest of this run.
    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.manifest.finished_unix_ms = Some(now_ms());
        self.write_json(MANIFEST_FILE, &self.manifest)?;
        Ok(self.manifest)
    }
}

pub struct JsonlWriter {
    path: PathBuf,
    out: std::io::BufWriter<fs::File>,
}

impl JsonlWriter {
    pub fn write<T: Serialize>(&mut self, value: &T) -> CliResult<()> {
        let line = serde_json::to_string(value).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}
