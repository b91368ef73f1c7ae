//! Dataset and trace files: JSON-lines instances with a hashed sidecar
//! manifest, and integer action grids for solution traces.
//!
//! Serialization is canonical: stable field order, shortest round-trip
//! floats. Equal values always produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{EnvKind, FfspInstance, HcvrpInstance, OmdcpdpInstance};
use crate::mdp::{EnvError, SolutionTrace, TraceStep};

pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte offset {offset} (line {line}): {detail}")]
    Parse { line: usize, offset: usize, detail: String },
    #[error("unsupported format version {found}, this reader handles {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("content hash mismatch: manifest says {expected}, file hashes to {found}")]
    HashMismatch { expected: String, found: String },
    #[error("manifest counts {expected} instances, file holds {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("instance: {0}")]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AnyInstance {
    Hcvrp(HcvrpInstance),
    Omdcpdp(OmdcpdpInstance),
    Ffsp(FfspInstance),
}

impl AnyInstance {
    pub fn kind(&self) -> EnvKind {
        match self {
            AnyInstance::Hcvrp(_) => EnvKind::Hcvrp,
            AnyInstance::Omdcpdp(_) => EnvKind::Omdcpdp,
            AnyInstance::Ffsp(_) => EnvKind::Ffsp,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            AnyInstance::Hcvrp(inst) => inst.validate(),
            AnyInstance::Omdcpdp(inst) => inst.validate(),
            AnyInstance::Ffsp(inst) => inst.validate(),
        }
    }

    /// Canonical single-line JSON, also used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("instances always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_version: u32,
    pub env: String,
    pub count: usize,
    pub seed: u64,
    /// Generator parameters, environment-specific.
    pub params: serde_json::Value,
    pub sha256: String,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write instances as JSON lines plus a sidecar manifest next to them.
pub fn write_instances(
    path: &Path,
    instances: &[AnyInstance],
    env: EnvKind,
    seed: u64,
    params: serde_json::Value,
) -> Result<DatasetManifest, IoError> {
    let mut body = String::new();
    for inst in instances {
        body.push_str(&inst.canonical_json());
        body.push('\n');
    }
    fs::write(path, &body)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        generator_version: GENERATOR_VERSION,
        env: env.name().to_string(),
        count: instances.len(),
        seed,
        params,
        sha256: sha256_hex(body.as_bytes()),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path(path), manifest_json + "\n")?;
    Ok(manifest)
}

/// Read a JSON-lines instance file. Parse failures name the byte offset
/// of the offending character.
pub fn read_instances(path: &Path) -> Result<Vec<AnyInstance>, IoError> {
    let body = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in body.lines().enumerate() {
        if !line.trim().is_empty() {
            let inst: AnyInstance = serde_json::from_str(line).map_err(|e| IoError::Parse {
                line: lineno + 1,
                offset: offset + e.column().saturating_sub(1),
                detail: e.to_string(),
            })?;
            inst.validate()?;
            out.push(inst);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Read instances and check them against the sidecar manifest: format
/// version, content hash, and count must all agree.
pub fn load_dataset(path: &Path) -> Result<(Vec<AnyInstance>, DatasetManifest), IoError> {
    let manifest: DatasetManifest = {
        let text = fs::read_to_string(manifest_path(path))?;
        serde_json::from_str(&text).map_err(|e| IoError::Parse {
            line: e.line(),
            offset: 0,
            detail: format!("manifest: {e}"),
        })?
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(IoError::Version { found: manifest.format_version });
    }
    let body = fs::read(path)?;
    let found = sha256_hex(&body);
    if found != manifest.sha256 {
        return Err(IoError::HashMismatch { expected: manifest.sha256.clone(), found });
    }
    let instances = read_instances(path)?;
    if instances.len() != manifest.count {
        return Err(IoError::CountMismatch {
            expected: manifest.count,
            found: instances.len(),
        });
    }
    Ok((instances, manifest))
}

/// Serialized rollout: one row per step, one signed entry per agent.
/// Negative entries are no-ops (conflict losses and finished agents);
/// per-step log-probabilities and conflict counts are runtime metadata
/// and are not persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub format_version: u32,
    pub env: String,
    pub seed: u64,
    pub objective: f64,
    pub steps: Vec<Vec<i64>>,
}

pub fn trace_to_rows(trace: &SolutionTrace) -> Vec<Vec<i64>> {
    trace
        .steps
        .iter()
        .map(|step| {
            step.actions
                .iter()
                .zip(&step.noop)
                .map(|(&a, &noop)| if noop { -1 } else { a as i64 })
                .collect()
        })
        .collect()
}

pub fn rows_to_trace(rows: &[Vec<i64>], objective: f64, seed: u64) -> SolutionTrace {
    let steps = rows
        .iter()
        .map(|row| TraceStep {
            actions: row.iter().map(|&v| v.max(0) as usize).collect(),
            noop: row.iter().map(|&v| v < 0).collect(),
            conflict_losses: 0,
            log_prob: 0.0,
        })
        .collect();
    SolutionTrace { steps, objective, seed, wall_time: 0.0 }
}

pub fn write_trace(path: &Path, env: EnvKind, trace: &SolutionTrace) -> Result<(), IoError> {
    let file = TraceFile {
        format_version: FORMAT_VERSION,
        env: env.name().to_string(),
        seed: trace.seed,
        objective: trace.objective,
        steps: trace_to_rows(trace),
    };
    let json = serde_json::to_string_pretty(&file).expect("trace serializes");
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<(SolutionTrace, EnvKind), IoError> {
    let text = fs::read_to_string(path)?;
    let file: TraceFile = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        line: e.line(),
        offset: 0,
        detail: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(IoError::Version { found: file.format_version });
    }
    let kind = file
        .env
        .parse::<EnvKind>()
        .map_err(|e| IoError::Parse { line: 1, offset: 0, detail: e })?;
    Ok((rows_to_trace(&file.steps, file.objective, file.seed), kind))
}
