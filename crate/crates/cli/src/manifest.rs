//! Per-run record of seeds and of every file read or written, with SHA-256
//! content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Read,
    Written,
}

#[derive(Debug, Serialize)]
struct Entry {
    path: String,
    role: Role,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Document<'a> {
    subcommand: &'a str,
    master_seed: u64,
    seeds: &'a BTreeMap<String, u64>,
    files: Vec<Entry>,
}

#[derive(Debug)]
pub struct Manifest {
    subcommand: String,
    root: PathBuf,
    master_seed: u64,
    seeds: BTreeMap<String, u64>,
    files: BTreeMap<PathBuf, Role>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(subcommand: &str, root: &Path, master_seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            root: root.to_path_buf(),
            master_seed,
            seeds: BTreeMap::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: impl Into<String>, value: u64) {
        self.seeds.insert(name.into(), value);
    }

    /// A file that was read. Files later written keep the `written` role.
    pub fn read(&mut self, path: impl AsRef<Path>) {
        self.files.entry(path.as_ref().to_path_buf()).or_insert(Role::Read);
    }

    pub fn written(&mut self, path: impl AsRef<Path>) {
        self.files.insert(path.as_ref().to_path_buf(), Role::Written);
    }

    pub fn written_all<P: AsRef<Path>>(&mut self, paths: impl IntoIterator<Item = P>) {
        for p in paths {
            self.written(p);
        }
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    /// Hashes every recorded file and writes `manifest.<subcommand>.json`
    /// into the run root.
    pub fn finish(self) -> Result<PathBuf> {
        let files = self
            .files
            .iter()
            .map(|(p, &role)| {
                Ok(Entry {
                    path: self.display(p),
                    role,
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = Document {
            subcommand: &self.subcommand,
            master_seed: self.master_seed,
            seeds: &self.seeds,
            files,
        };
        let path = self.root.join(format!("manifest.{}.json", self.subcommand));
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Invalid(e.to_string()))?;
        std::fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_and_roles() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        std::fs::write(&a, "abc").unwrap();
        let mut m = Manifest::new("evaluate", dir.path(), 3);
        m.read(&a);
        m.seed("x", 1);
        let path = m.finish().unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(v["files"][0]["path"], "a.csv");
        assert_eq!(v["files"][0]["role"], "read");
        assert_eq!(
            v["files"][0]["sha256"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
