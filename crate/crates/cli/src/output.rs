//! Report records, run manifests and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Bumped whenever a record layout changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance header emitted as the first record of every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub record: &'static str,
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seeds: Value,
    pub inputs: Vec<InputDigest>,
    pub tool_version: &'static str,
    pub wall_time_ms: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<InputDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Hash of the effective configuration in its JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let text = serde_json::to_vec(config).expect("config serializes");
    sha256_hex(&text)
}

/// Accumulates the records and summary table of one command.
pub struct Report {
    command: String,
    started: Instant,
    config_hash: String,
    seeds: Value,
    inputs: Vec<InputDigest>,
    records: Vec<Value>,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            config_hash: String::new(),
            seeds: json!({}),
            inputs: Vec::new(),
            records: Vec::new(),
            headers: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        self.config_hash = config_hash(config);
    }

    pub fn set_seeds(&mut self, seeds: Value) {
        self.seeds = seeds;
    }

    pub fn add_input(&mut self, digest: InputDigest) {
        self.inputs.push(digest);
    }

    /// Appends a record tagged with `kind`.
    pub fn push<T: Serialize>(&mut self, kind: &str, body: &T) {
        let mut v = serde_json::to_value(body).expect("record serializes");
        match v.as_object_mut() {
            Some(map) => {
                map.insert("record".into(), Value::String(kind.into()));
            }
            None => v = json!({ "record": kind, "value": v }),
        }
        self.records.push(v);
    }

    pub fn table(&mut self, headers: &[&str]) {
        self.headers = headers.iter().map(|h| h.to_string()).collect();
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            record: "manifest",
            schema_version: SCHEMA_VERSION,
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            seeds: self.seeds.clone(),
            inputs: self.inputs.clone(),
            tool_version: env!("CARGO_PKG_VERSION"),
            wall_time_ms: self.started.elapsed().as_millis() as u64,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.manifest()).expect("manifest serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for row in &self.rows {
            for (i, c) in row.iter().enumerate() {
                if i < widths.len() {
                    widths[i] = widths[i].max(c.len());
                } else {
                    widths.push(c.len());
                }
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{c:<w$}", w = widths[i]))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        if !self.headers.is_empty() {
            out.push_str(&line(&self.headers));
            out.push('\n');
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&line(&rule));
            out.push('\n');
        }
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Writes `bytes` to `path` through a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}

pub fn report_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.jsonl"))
}
