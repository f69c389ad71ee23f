//! Run manifests: written when a run starts, rewritten after every phase,
//! marked complete at the end.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::write_file;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: String,
    /// Canonical config text the run was started with.
    pub config: String,
    /// SHA-256 over `blob <len>\0<config>`, the way git hashes blobs.
    pub input_hash: String,
    pub complete: bool,
    pub phases: Vec<PhaseTime>,
    pub failed_phase: Option<String>,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

/// Hex SHA-256 of `bytes` framed as a git blob.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn file_name(run: &str) -> String {
        format!("manifest_{run}.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "run manifest",
            reason: e.to_string(),
        })
    }

    /// Checks that every listed file under `dir` exists with its recorded
    /// size and that no path is listed twice.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let bad = |reason: String| Error::Format {
            what: "run manifest",
            reason,
        };
        for (i, f) in self.files.iter().enumerate() {
            if self.files[..i].iter().any(|g| g.path == f.path) {
                return Err(bad(format!("{} listed twice", f.path)));
            }
            let path = dir.join(&f.path);
            let meta = fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            if meta.len() != f.bytes {
                return Err(bad(format!("{}: {} bytes on disk, {} recorded", f.path, meta.len(), f.bytes)));
            }
        }
        Ok(())
    }
}

/// Owns a run directory and keeps its manifest current.
pub struct RunRecorder {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn start(dir: &Path, run: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = cfg.to_text();
        let rec = RunRecorder {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                run: run.to_string(),
                input_hash: content_hash(config.as_bytes()),
                config,
                complete: false,
                phases: Vec::new(),
                failed_phase: None,
                error: None,
                files: Vec::new(),
            },
        };
        rec.flush()?;
        Ok(rec)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(RunManifest::file_name(&self.manifest.run))
    }

    fn flush(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.manifest_path();
        let tmp = path.with_extension("json.tmp");
        write_file(&tmp, json.as_bytes())?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Runs `f` as a named, timed phase. A failure is recorded in the
    /// manifest before it is returned.
    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        match f(self) {
            Ok(v) => {
                self.manifest.phases.push(PhaseTime {
                    name: name.to_string(),
                    seconds: t.elapsed().as_secs_f64(),
                });
                self.flush()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.failed_phase = Some(name.to_string());
                self.manifest.error = Some(e.to_string());
                self.flush()?;
                Err(e)
            }
        }
    }

    /// Writes `bytes` to `rel` under the run directory and lists it.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        write_file(&path, bytes)?;
        self.track(&path)?;
        Ok(path)
    }

    /// Lists a file some other writer put inside the run directory.
    pub fn track(&mut self, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(&self.dir)
            .map_err(|_| Error::invalid(format!("{} is outside the run directory", path.display())))?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let bytes = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        match self.manifest.files.iter_mut().find(|f| f.path == rel) {
            Some(f) => f.bytes = bytes,
            None => self.manifest.files.push(FileEntry { path: rel, bytes }),
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.complete = true;
        self.flush()?;
        Ok(self.manifest)
    }
}
