use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use pllkit::{Error, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.log";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One manifest line: stage, seed, overrides, then input and output hashes.
#[derive(Debug, Default)]
pub struct Entry {
    pub stage: &'static str,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
}

impl Entry {
    pub fn new(stage: &'static str, seed: u64, overrides: &[String]) -> Self {
        Self {
            stage,
            seed,
            overrides: overrides.to_vec(),
            ..Default::default()
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.outputs.push((role.to_string(), path.to_path_buf()));
    }

    /// Hashes are of file contents; paths are reduced to their file names so
    /// the line does not depend on where the experiment lives.
    pub fn render(&self) -> Result<String> {
        let mut line = format!("stage={} seed={}", self.stage, self.seed);
        line.push_str(" overrides=");
        line.push_str(if self.overrides.is_empty() { "-" } else { "" });
        line.push_str(&self.overrides.join(","));
        for (tag, list) in [("in", &self.inputs), ("out", &self.outputs)] {
            for (role, path) in list {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                line.push_str(&format!(" {tag}:{role}={name}@{}", sha256_file(path)?));
            }
        }
        Ok(line)
    }

    pub fn append(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST_FILE);
        let line = self.render()?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
        writeln!(f, "{line}").map_err(|source| Error::Io { path, source })
    }
}
