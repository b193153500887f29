//! Run manifest: descriptors of the run plus every produced file with its FNV-1a 64 hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use cghvp_core::store::write_atomic;
use fnv::FnvHasher;

use crate::config::Config;
use crate::error::{CliError, CliResult};

pub const VERSION: u32 = 1;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.into(), source })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    path: PathBuf,
    /// Run descriptors: system, map, beta, unit scale, seeds, K, epsilon.
    pub summary: BTreeMap<String, String>,
    /// Artifact name to path relative to the manifest directory.
    pub files: BTreeMap<String, String>,
    pub hashes: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn new(path: &Path) -> Self {
        Manifest { path: path.into(), summary: BTreeMap::new(), files: BTreeMap::new(), hashes: BTreeMap::new() }
    }

    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir().join(rel)
    }

    /// Path of artifact `name`, or an error naming the command that would produce it.
    pub fn artifact(&self, name: &str) -> CliResult<PathBuf> {
        self.files.get(name).map(|rel| self.resolve(rel)).ok_or_else(|| CliError::MissingArtifact(name.into()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.files.contains_key(name)
    }

    /// Registers an already written file and records its hash.
    pub fn add_file(&mut self, name: &str, rel: &str) -> CliResult<()> {
        let hash = fnv1a(&read_bytes(&self.resolve(rel))?);
        self.files.insert(name.into(), rel.into());
        self.hashes.insert(name.into(), hash);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = format!("[manifest]\nversion = {VERSION}\n");
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("\n[files]\n");
        for (k, v) in &self.files {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("\n[hashes]\n");
        for (k, v) in &self.hashes {
            let _ = writeln!(out, "{k} = {v:016x}");
        }
        out
    }

    pub fn save(&self) -> CliResult<()> {
        Ok(write_atomic(&self.path, &self.render())?)
    }

    /// Reads the manifest and checks every referenced file against its recorded hash.
    pub fn load(path: &Path) -> CliResult<Self> {
        let cfg = Config::read(path)?;
        let version: u32 = cfg.get_required("manifest", "version")?;
        if version != VERSION {
            let line = cfg.require("manifest", "version")?.line;
            return Err(cfg.error(line, format!("unsupported manifest version {version}")));
        }
        let mut m = Manifest::new(path);
        for e in cfg.entries("manifest").into_iter().filter(|e| e.key != "version") {
            m.summary.insert(e.key.clone(), e.value.clone());
        }
        for e in cfg.entries("files") {
            m.files.insert(e.key.clone(), e.value.clone());
        }
        for e in cfg.entries("hashes") {
            let h = u64::from_str_radix(&e.value, 16).map_err(|_| cfg.error(e.line, format!("bad hash `{}`", e.value)))?;
            m.hashes.insert(e.key.clone(), h);
        }
        for (name, rel) in &m.files {
            let expected = *m.hashes.get(name).ok_or_else(|| CliError::Config {
                path: path.display().to_string(),
                line: 0,
                message: format!("file `{name}` has no recorded hash"),
            })?;
            let full = m.resolve(rel);
            let actual = fnv1a(&read_bytes(&full)?);
            if actual != expected {
                return Err(CliError::HashMismatch { path: full, expected, actual });
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.txt"), "hello\n").unwrap();
        let mut m = Manifest::new(&dir.path().join("manifest.ini"));
        m.summary.insert("beta".into(), "1".into());
        m.add_file("data", "data.txt").unwrap();
        m.save().unwrap();
        assert_eq!(Manifest::load(m.path()).unwrap(), m);
        std::fs::write(dir.path().join("data.txt"), "hellp\n").unwrap();
        assert!(matches!(Manifest::load(m.path()), Err(CliError::HashMismatch { .. })));
        assert!(matches!(m.artifact("absent"), Err(CliError::MissingArtifact(_))));
    }
}
