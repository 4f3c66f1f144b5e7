//! Output bookkeeping: every file a run writes, a stable hash of its
//! configuration, and the `manifest.json` describing the run.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ordelta::Error),

    #[error("{0}")]
    Usage(String),

    #[error("cannot access `{path}`: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn is_user_error(&self) -> bool {
        match self {
            CliError::Core(e) => e.is_user_error(),
            CliError::Usage(_) | CliError::File { .. } | CliError::Json(_) => true,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::File { .. } => "io",
            CliError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the canonical JSON of parameters and input file digests.
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_time_secs: f64,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// State of one CLI invocation.
pub struct Run {
    subcommand: &'static str,
    out_dir: PathBuf,
    start: Instant,
    params: BTreeMap<String, Value>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    seed: Option<u64>,
}

impl Run {
    pub fn new(subcommand: &'static str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|source| CliError::File {
            path: out_dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            subcommand,
            out_dir: out_dir.to_path_buf(),
            start: Instant::now(),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed: None,
        })
    }

    pub fn param(&mut self, name: &str, value: impl Serialize) -> Result<()> {
        self.params
            .insert(name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) -> Result<()> {
        self.seed = Some(seed);
        self.param("seed", seed)
    }

    /// Read an input file and record its digest under `role`.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|source| CliError::File {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.insert(role.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Parse a JSON input file.
    pub fn json_input<T: serde::de::DeserializeOwned>(
        &mut self,
        role: &str,
        path: &Path,
    ) -> Result<T> {
        let bytes = self.input(role, path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Create an output file inside the output directory.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out_dir.join(name);
        let file = File::create(&path).map_err(|source| CliError::File { path, source })?;
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)
            .and_then(|()| w.flush())
            .map_err(|source| CliError::File {
                path: self.out_dir.join(name),
                source,
            })
    }

    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> ordelta::Result<()>,
    ) -> Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush().map_err(|source| CliError::File {
            path: self.out_dir.join(name),
            source,
        })
    }

    pub fn config_hash(&self) -> String {
        let canonical = serde_json::json!({
            "subcommand": self.subcommand,
            "params": self.params,
            "inputs": self.inputs,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        let versions = [
            (
                "ordelta-cli".to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            ),
            ("ordelta-core".to_string(), ordelta::VERSION.to_string()),
        ]
        .into_iter()
        .collect();
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            config_hash: self.config_hash(),
            seed: self.seed,
            versions,
            threads: rayon::current_num_threads(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
            outputs: self.outputs.clone(),
        };
        self.write_json("manifest.json", &manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn hash_ignores_parameter_insertion_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Run::new("fit", dir.path()).unwrap();
        a.param("x", 1).unwrap();
        a.param("y", "z").unwrap();
        let mut b = Run::new("fit", dir.path()).unwrap();
        b.param("y", "z").unwrap();
        b.param("x", 1).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        b.param("x", 2).unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
