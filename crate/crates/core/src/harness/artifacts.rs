use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Seeds};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Output directory that only ever creates new files.
#[derive(Debug)]
pub struct ArtifactDir {
    root: PathBuf,
    written: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(ArtifactDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Fails if something with that name already exists.
    pub fn ensure_absent(&self, name: &str) -> Result<()> {
        let p = self.path(name);
        if p.exists() {
            return Err(Error::ArtifactExists(p));
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&p).map_err(|e| {
            if e.kind() == ErrorKind::AlreadyExists {
                Error::ArtifactExists(p.clone())
            } else {
                Error::Io(e)
            }
        })?;
        f.write_all(bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub arguments: Vec<String>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, arguments: Vec<String>, cfg: &ExperimentConfig, started_unix: u64) -> Result<Self> {
        Ok(RunManifest {
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            arguments,
            config_hash: cfg.hash()?,
            config: cfg.clone(),
            seeds: cfg.seeds,
            artifacts: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        })
    }

    /// Records the directory's artifacts and writes the manifest into it.
    pub fn finish(mut self, dir: &mut ArtifactDir) -> Result<RunManifest> {
        self.artifacts = dir.written().to_vec();
        self.finished_unix = unix_now();
        dir.write_json(MANIFEST_NAME, &self)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_overwrites() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dir = ArtifactDir::create(&tmp.path().join("out")).unwrap();
        dir.write_bytes("a.txt", b"one").unwrap();
        let e = dir.write_bytes("a.txt", b"two").unwrap_err();
        assert!(matches!(e, Error::ArtifactExists(_)));
        assert_eq!(fs::read(dir.path("a.txt")).unwrap(), b"one");
        assert!(dir.ensure_absent("a.txt").is_err());
        assert!(dir.ensure_absent("b.txt").is_ok());
    }

    #[test]
    fn manifest_lists_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dir = ArtifactDir::create(tmp.path()).unwrap();
        dir.write_json("x.json", &1).unwrap();
        let cfg = ExperimentConfig::default();
        let m = RunManifest::new("synth", vec![], &cfg, 5).unwrap().finish(&mut dir).unwrap();
        assert_eq!(m.artifacts, vec!["x.json".to_string()]);
        let text = fs::read_to_string(dir.path(MANIFEST_NAME)).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
