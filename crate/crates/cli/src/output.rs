//! Output directories that appear only when a command succeeds, and the
//! manifest written next to them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// `git describe`-style version baked in at build time.
pub const VERSION: &str = env!("CSIT_VERSION");

/// Provenance of one command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
}

/// Collects a command's files in a hidden sibling directory and renames it
/// into place on [`Staging::commit`]. Dropping it uncommitted removes
/// everything written so far.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        if target.exists() {
            let empty = target.is_dir()
                && std::fs::read_dir(target)
                    .with_context(|| format!("reading {}", target.display()))?
                    .next()
                    .is_none();
            if !empty {
                bail!("output {} already exists and is not an empty directory", target.display());
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let dir = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        std::fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            files: Vec::new(),
            committed: false,
        })
    }

    /// Path for output `name` inside the staging directory.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `manifest.json` and moves the directory into place.
    pub fn commit(mut self, mut manifest: RunManifest, started: Instant) -> Result<PathBuf> {
        manifest.duration_secs = started.elapsed().as_secs_f64();
        manifest.outputs = self
            .files
            .iter()
            .map(|f| self.target.join(f).display().to_string())
            .collect();
        let json = serde_json::to_string_pretty(&manifest)?;
        let tmp = self.dir.join("manifest.json.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, self.dir.join("manifest.json"))?;
        if self.target.exists() {
            std::fs::remove_dir(&self.target)
                .with_context(|| format!("replacing empty {}", self.target.display()))?;
        }
        std::fs::rename(&self.dir, &self.target)
            .with_context(|| format!("moving outputs into {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value, inputs: &[&Path]) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: VERSION.to_string(),
            seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_staging_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        {
            let mut s = Staging::new(&target).unwrap();
            s.write("a.txt", "x").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_moves_files_and_manifest() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("nested/out");
        let mut s = Staging::new(&target).unwrap();
        s.write("a.txt", "x").unwrap();
        let m = RunManifest::new("test", Some(1), serde_json::json!({}), &[]);
        s.commit(m, Instant::now()).unwrap();
        assert_eq!(std::fs::read_to_string(target.join("a.txt")).unwrap(), "x");
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(target.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["command"], "test");
        assert!(Staging::new(&target).is_err());
    }
}
