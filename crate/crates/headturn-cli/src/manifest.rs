//! Run provenance. Every command that produces artifacts drops a manifest
//! next to them recording what was run, with which seed and version, and
//! what came out.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use headturn::error::{Error, Result};
use serde::Serialize;

/// Package version string stamped into every manifest.
pub const VERSION: &str = concat!("headturn-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: u64,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn begin(command: &str, config: Option<&Path>, seed: u64) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config: config.map(|p| p.display().to_string()),
            seed,
            version: VERSION.to_string(),
            started_unix: now_unix(),
            finished_unix: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn push_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Stamps the end time and writes the manifest to `path` atomically.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now_unix();
        write_json_atomic(path, &self)
    }
}

/// Serializes `value` as pretty JSON and moves it into place via a temporary
/// file in the same directory, so readers never see a partial document.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::invalid(format!("json encoding for {}: {e}", path.display())))?;
    bytes.push(b'\n');
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Emits one JSON object per line on stderr, the log format shared by all
/// commands.
pub fn log_line(value: serde_json::Value) {
    eprintln!("{value}");
}

/// Default manifest location for commands whose artifacts live in `dir`.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("run_manifest.json")
}
