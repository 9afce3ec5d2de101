//! Output directory handling: atomic writes, digests and run manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_DIR: &str = "manifests";

/// SHA-256 of a file's contents, hex encoded.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let mut file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

/// Builds a CSV document in memory.
pub fn to_csv<F>(header: &[&str], fill: F) -> Result<Vec<u8>, csv::Error>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one stage run. Carries no timestamps, so reruns with the
/// same inputs reproduce it byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub stage: &'static str,
    pub config_sha256: String,
    pub seeds: BTreeMap<&'static str, u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts_read: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Everything a stage produces, held in memory until the stage succeeds.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub files: Vec<(&'static str, Vec<u8>)>,
    pub seeds: BTreeMap<&'static str, u64>,
}

impl StageOutput {
    pub fn add(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.files.push((name, bytes));
    }
}

#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: PathBuf) -> Self {
        OutDir { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an upstream artifact, or an error naming the stage that
    /// produces it.
    pub fn require(&self, name: &str, producer: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { stage: producer, path: p })
        }
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.root.join(MANIFEST_DIR).join(format!("{stage}.json"))
    }

    /// Writes every output and then the manifest.
    pub fn commit(
        &self,
        stage: &'static str,
        config_sha256: &str,
        inputs: Vec<FileDigest>,
        artifacts_read: Vec<FileDigest>,
        output: StageOutput,
    ) -> Result<Manifest, CliError> {
        let mut outputs = Vec::with_capacity(output.files.len());
        for (name, bytes) in &output.files {
            write_atomic(&self.path(name), bytes)?;
            outputs.push(FileDigest {
                path: name.to_string(),
                sha256: bytes_digest(bytes),
            });
        }
        let manifest = Manifest {
            tool: "meshflow",
            version: env!("CARGO_PKG_VERSION"),
            stage,
            config_sha256: config_sha256.to_string(),
            seeds: output.seeds,
            inputs,
            artifacts_read,
            outputs,
        };
        write_atomic(&self.manifest_path(stage), &to_json(&manifest))?;
        Ok(manifest)
    }
}
