//! Output sinks, provenance and the exit-code mapping.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Relative `--out` paths resolve under this directory when it is set.
pub const OUT_DIR_VAR: &str = "PICARD_OUT_DIR";

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit 1.
    User(String),
    /// Failure inside the tool: exit 2.
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<picard_mc::Error> for CliError {
    fn from(e: picard_mc::Error) -> Self {
        match e {
            picard_mc::Error::EstimatorFailure { .. } => CliError::Internal(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

pub fn resolve_out(path: Option<&Path>) -> Option<PathBuf> {
    let p = path?;
    if p.is_relative() {
        if let Some(dir) = std::env::var_os(OUT_DIR_VAR) {
            return Some(Path::new(&dir).join(p));
        }
    }
    Some(p.to_path_buf())
}

/// Write to `path`, creating parent directories, or to stdout.
pub fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(format!("stdout: {e}"))),
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)
                    .map_err(|e| user(format!("cannot create {}: {e}", parent.display())))?;
            }
            std::fs::write(p, text).map_err(|e| user(format!("cannot write {}: {e}", p.display())))
        }
    }
}

/// Sidecar path for the JSON companion of a CSV output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Who produced an artifact and from what.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    /// SHA-256 of the canonical config, or of the argument list for
    /// flag-only commands.
    pub config_hash: String,
}

impl Provenance {
    pub fn new(command: &str, seed: Option<u64>, canonical: &str) -> Self {
        Self {
            tool: "picard",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config_hash: sha256_hex(canonical.as_bytes()),
        }
    }
}

/// Pretty JSON with a `provenance` block and a trailing newline.
pub fn json_document(provenance: &Provenance, body: Value) -> CliResult<String> {
    let mut doc = json!({ "provenance": provenance });
    if let (Value::Object(target), Value::Object(fields)) = (&mut doc, body) {
        target.extend(fields);
    }
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// RFC 4180 text from a header and rows.
pub fn csv_text(header: &[String], rows: &[Vec<String>]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(header).map_err(internal)?;
    for r in rows {
        w.write_record(r).map_err(internal)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Internal(e.to_string()))
}
