//! Append-only run directory keyed by the config's content hash.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Stages in execution order; each leaves a marker file when it completes.
pub const STAGES: [&str; 8] = [
    "data", "cohort", "labels", "splits", "features", "fit", "evaluate", "select",
];

pub struct RunStore {
    root: PathBuf,
    run_id: String,
}

impl RunStore {
    pub fn open(output_dir: &Path, run_id: &str) -> Result<Self> {
        let root = output_dir.join(run_id);
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root,
            run_id: run_id.to_string(),
        })
    }

    /// Opens an existing run directory.
    pub fn existing(dir: &Path) -> Result<Self> {
        if !dir.join("config.json").is_file() {
            bail!("{} is not a run directory (no config.json)", dir.display());
        }
        let run_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            root: dir.to_path_buf(),
            run_id,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Writes `rel` once. An existing file is left untouched: identical configs
    /// produce identical bytes, so a second write would be a no-op.
    pub fn put(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        if path.exists() {
            return Ok(path);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension(format!(
            "{}.tmp",
            path.extension().and_then(|e| e.to_str()).unwrap_or("")
        ));
        {
            let mut f =
                fs::File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Renders with `f` into memory, then [`put`](Self::put)s the bytes.
    pub fn put_with<F>(&self, rel: &str, f: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        if self.exists(rel) {
            return Ok(self.path(rel));
        }
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(rel, &buf)
    }

    pub fn read(&self, rel: &str) -> Result<String> {
        fs::read_to_string(self.path(rel))
            .with_context(|| format!("reading {}", self.path(rel).display()))
    }

    pub fn mark_done(&self, stage: &str) -> Result<()> {
        self.put(&format!("stages/{stage}.done"), b"")?;
        Ok(())
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.exists(&format!("stages/{stage}.done"))
    }

    /// First stage without a completion marker.
    pub fn first_missing_stage(&self) -> Option<&'static str> {
        STAGES.into_iter().find(|s| !self.is_done(s))
    }

    /// Appends a line to `run.log`.
    pub fn log_line(&self, line: &str) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path("run.log"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
