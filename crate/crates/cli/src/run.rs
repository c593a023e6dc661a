//! Config loading and the `run.json` provenance record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub trait Seeded {
    fn seed_mut(&mut self) -> &mut u64;
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Parse a config file; a previous `run.json` is accepted and its embedded
/// config reused.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let bytes = fs::read(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
    let bad = |message: String| CliError::Config {
        path: path.to_path_buf(),
        message,
    };
    let mut value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    if let Some(obj) = value.as_object() {
        if let (Some(cmd), Some(cfg)) = (obj.get("command"), obj.get("config")) {
            if cmd.as_str() != Some(command) {
                return Err(bad(format!("run record is for {cmd}, not {command}")));
            }
            value = cfg.clone();
        }
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

/// Content hash of a file, or of every file under a directory in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256(&fs::read(path)?));
    }
    if !path.is_dir() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(path.join(&rel))?);
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

pub struct Run {
    pub command: &'static str,
    pub out: PathBuf,
    inputs: Vec<InputRecord>,
}

impl Run {
    pub fn start(command: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            inputs: Vec::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.push(InputRecord {
            name: name.into(),
            sha256: hash_path(path)?,
            path: path.to_path_buf(),
        });
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Write `run.json` listing every file now under the output directory.
    pub fn finish<C: Serialize>(self, config: &C, seed: u64) -> Result<RunRecord> {
        let config = serde_json::to_value(config)?;
        let mut outputs = Vec::new();
        collect_files(&self.out, &self.out, &mut outputs)?;
        let mut outputs: Vec<String> = outputs
            .into_iter()
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .filter(|p| p != "run.json")
            .collect();
        outputs.sort();
        let record = RunRecord {
            command: self.command.into(),
            version: VERSION.into(),
            seed,
            config_sha256: sha256(&serde_json::to_vec(&config)?),
            config,
            inputs: self.inputs,
            outputs,
        };
        fs::write(self.out.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, serde::Deserialize, Serialize)]
    #[serde(default)]
    struct Cfg {
        a: u32,
        seed: u64,
    }

    #[test]
    fn config_from_file_or_run_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"a": 3}"#).unwrap();
        assert_eq!(load_config::<Cfg>(Some(&p), "x").unwrap(), Cfg { a: 3, seed: 0 });
        fs::write(&p, r#"{"command": "x", "config": {"a": 4, "seed": 2}}"#).unwrap();
        assert_eq!(load_config::<Cfg>(Some(&p), "x").unwrap(), Cfg { a: 4, seed: 2 });
        assert!(matches!(load_config::<Cfg>(Some(&p), "y"), Err(CliError::Config { .. })));
        fs::write(&p, r#"{"a": "three"}"#).unwrap();
        assert!(matches!(load_config::<Cfg>(Some(&p), "x"), Err(CliError::Config { .. })));
        assert!(matches!(load_config::<Cfg>(Some(&dir.path().join("nope")), "x"), Err(CliError::MissingInput(_))));
    }

    #[test]
    fn directory_hash_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a"), b"1").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        assert_eq!(h1, hash_path(dir.path()).unwrap());
        fs::write(dir.path().join("sub/a"), b"2").unwrap();
        assert_ne!(h1, hash_path(dir.path()).unwrap());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
