use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use pairalign::eval::EvalReport;
use pairalign::trainer::{AblationTable, MetricsTrace};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::Invalid;

pub const RECORD_SCHEMA: &str = "pairalign.record.v1";
pub const RECORD_FILE: &str = "record.json";
pub const LOCK_FILE: &str = ".pairalign.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Relative to the record's directory.
    pub path: String,
    pub sha256: String,
}

/// Metadata written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    pub schema: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub binary_sha256: String,
    pub seed: u64,
    pub trace: Option<MetricsTrace>,
    pub report: Option<EvalReport>,
    pub ablation: Option<AblationTable>,
    pub artifacts: Vec<Artifact>,
    pub started_unix_ms: u128,
    pub duration_secs: f64,
}

impl ExperimentRecord {
    pub fn new(command: &str, config: &ExperimentConfig, seed: u64) -> Self {
        Self {
            schema: RECORD_SCHEMA.into(),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config: config.clone(),
            config_hash: config.hash(),
            binary_sha256: binary_hash(),
            seed,
            trace: None,
            report: None,
            ablation: None,
            artifacts: Vec::new(),
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or(Duration::ZERO)
                .as_millis(),
            duration_secs: 0.0,
        }
    }

    /// Hashes each listed file under `dir` and writes `record.json`.
    pub fn finish(mut self, dir: &Path, files: &[&str], elapsed: Duration) -> Result<Self> {
        self.artifacts = files
            .iter()
            .map(|f| {
                Ok(Artifact {
                    path: f.to_string(),
                    sha256: file_hash(&dir.join(f))?,
                })
            })
            .collect::<Result<_>>()?;
        self.duration_secs = elapsed.as_secs_f64();
        write_file(dir, RECORD_FILE, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(self)
    }

    /// Loads a record from a file or from `record.json` inside a directory,
    /// then checks its config hash and artifact digests.
    pub fn load_verified(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(RECORD_FILE) } else { path.to_path_buf() };
        if !file.exists() {
            return Err(Invalid(format!("record not found: {}", file.display())).into());
        }
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let record: Self =
            serde_json::from_str(&text).map_err(|e| Invalid(format!("malformed record {}: {e}", file.display())))?;
        if record.schema != RECORD_SCHEMA {
            return Err(Invalid(format!("{}: schema {:?}", file.display(), record.schema)).into());
        }
        if record.config.hash() != record.config_hash {
            bail!("{}: config does not match its recorded hash", file.display());
        }
        let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        for a in &record.artifacts {
            let digest = file_hash(&dir.join(&a.path))?;
            if digest != a.sha256 {
                bail!("{}: artifact {} changed since it was recorded", file.display(), a.path);
            }
        }
        Ok((record, dir))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn binary_hash() -> String {
    std::env::current_exe()
        .ok()
        .and_then(|p| file_hash(&p).ok())
        .unwrap_or_default()
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Advisory lock on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    /// Creates `path` if needed. A directory holding anything other than a
    /// stale lock is refused unless `force` is set.
    pub fn claim(path: &Path, force: bool) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                return Err(Invalid(format!("{} exists and is not a directory", path.display())).into());
            }
            let lock = path.join(LOCK_FILE);
            if lock.exists() {
                bail!(
                    "{} is locked by another invocation (remove {} if none is running)",
                    path.display(),
                    lock.display()
                );
            }
            let occupied = fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .next()
                .is_some();
            if occupied && !force {
                return Err(Invalid(format!("{} is not empty; pass --force to overwrite", path.display())).into());
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        let mut f: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("{} is locked by another invocation", path.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
