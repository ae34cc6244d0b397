//! Output directory layout, lock file and provenance log.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dfr_core::checkpoint::sha256_file;
use dfr_core::error::{DfrError, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DFR_OUT";

/// One line of `provenance.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    /// Path relative to the root → sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub struct Workspace {
    pub root: PathBuf,
}

/// Exclusive writer lock; removed on drop.
pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn lock(&self) -> Result<Lock> {
        fs::create_dir_all(&self.root).map_err(|e| DfrError::io(&self.root, e))?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DfrError::Config(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(DfrError::io(&path, e)),
        }
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| DfrError::io(dir, e))?;
        }
        fs::write(&p, bytes).map_err(|e| DfrError::io(&p, e))?;
        Ok(p)
    }

    pub fn read_string(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(|e| DfrError::io(&p, e))
    }

    pub fn records(&self) -> Result<Vec<Provenance>> {
        let p = self.path("provenance.jsonl");
        if !p.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&p).map_err(|e| DfrError::io(&p, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(DfrError::from))
            .collect()
    }

    /// sha256 of `rel`, checked against the newest provenance record that
    /// produced it. A file no record mentions is accepted as is.
    pub fn verified_hash(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(DfrError::Config(format!(
                "missing input {} (run the command that produces it first)",
                p.display()
            )));
        }
        let got = sha256_file(&p)?;
        let recorded = self.records()?.into_iter().rev().find_map(|r| r.outputs.get(rel).cloned());
        match recorded {
            Some(h) if h != got => Err(DfrError::Integrity(format!(
                "{} changed since it was written (recorded {h}, found {got})",
                p.display()
            ))),
            _ => Ok(got),
        }
    }

    /// Verifies `inputs`, then appends a record hashing them and `outputs`.
    pub fn record(&self, command: &str, config_hash: &str, inputs: &[&str], outputs: &[&str]) -> Result<()> {
        let mut rec = Provenance {
            command: command.into(),
            config_hash: config_hash.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        for i in inputs {
            rec.inputs.insert(i.to_string(), self.verified_hash(i)?);
        }
        for o in outputs {
            rec.outputs.insert(o.to_string(), sha256_file(&self.path(o))?);
        }
        let p = self.path("provenance.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| DfrError::io(&p, e))?;
        writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| DfrError::io(&p, e))?;
        Ok(())
    }
}

/// Output root: explicit flag, then the environment, then `./runs`.
pub fn resolve_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
