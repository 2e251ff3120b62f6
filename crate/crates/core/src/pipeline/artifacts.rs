use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{GazeError, Result};

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct ArtifactLayout {
    pub root: PathBuf,
}

impl ArtifactLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn registry(&self) -> PathBuf {
        self.root.join("registry.json")
    }

    pub fn expert(&self, region: usize) -> PathBuf {
        self.root.join("experts").join(format!("expert_{region}.json"))
    }

    pub fn selector(&self) -> PathBuf {
        self.root.join("selector.json")
    }

    pub fn latent_stats(&self) -> PathBuf {
        self.root.join("latent_stats.json")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.root.join("denoiser.json")
    }

    pub fn student(&self) -> PathBuf {
        self.root.join("student.json")
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline.json")
    }

    pub fn continuous_head(&self) -> PathBuf {
        self.root.join("continuous_head.json")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    /// Fails with [`GazeError::MissingArtifact`] naming the first absent path.
    pub fn require<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
        for p in paths {
            if !p.is_file() {
                return Err(GazeError::MissingArtifact(p.to_path_buf()));
            }
        }
        Ok(())
    }

    pub fn experts(&self, n: usize) -> Vec<PathBuf> {
        (0..n).map(|r| self.expert(r)).collect()
    }
}

/// Pretty-printed JSON, creating parent directories.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| GazeError::io(path, e))
}

pub fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(GazeError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| GazeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GazeError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| GazeError::io(dir, e))
        }
        _ => Ok(()),
    }
}
