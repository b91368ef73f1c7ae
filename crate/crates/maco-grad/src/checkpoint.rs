use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("parameter {path} has {values} values for shape {rows}x{cols}")]
    BadShape { path: String, rows: usize, cols: usize, values: usize },
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    path: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    meta: serde_json::Value,
    params: Vec<ParamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<Adam>,
}

pub struct LoadedCheckpoint {
    pub params: ParamStore,
    pub meta: serde_json::Value,
    pub optimizer: Option<Adam>,
}

/// Write params (sorted by path), free-form metadata, and optional optimizer
/// state. serde_json prints f64 with shortest round-trip precision, so a
/// save/load cycle reproduces values bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: serde_json::Value,
    optimizer: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.sort_by(|&a, &b| store.path(a).cmp(store.path(b)));
    let params: Vec<ParamRecord> = order
        .iter()
        .map(|&i| {
            let t = store.value(i);
            ParamRecord {
                path: store.path(i).to_string(),
                shape: t.shape(),
                values: t.data().to_vec(),
            }
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        meta,
        // Moment buffers follow the sorted order the parameters are written
        // in, so a reload stays aligned with the rebuilt store.
        optimizer: optimizer.map(|o| o.permuted(&order)),
        params,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Read a checkpoint; parameters are inserted in the file's (sorted) order.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let raw = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&raw)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: file.format_version });
    }
    let mut store = ParamStore::new();
    for rec in file.params {
        let [rows, cols] = rec.shape;
        if rec.values.len() != rows * cols {
            return Err(CheckpointError::BadShape {
                path: rec.path,
                rows,
                cols,
                values: rec.values.len(),
            });
        }
        let t = Tensor::matrix(rows, cols, rec.values).expect("length checked above");
        store.insert(&rec.path, t);
    }
    Ok(LoadedCheckpoint { params: store, meta: file.meta, optimizer: file.optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut store = ParamStore::new();
        store.insert("b.w", Tensor::row(vec![0.1, 1.0 / 3.0, -2.5e-17]));
        store.insert("a.w", Tensor::scalar(std::f64::consts::PI));
        save_checkpoint(&path, &store, json!({"epoch": 3}), None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta["epoch"], 3);
        // Sorted on disk, so insertion order changes but content is identical.
        assert_eq!(loaded.params.path(0), "a.w");
        assert_eq!(loaded.params.get("b.w").unwrap().data(), store.get("b.w").unwrap().data());
        assert_eq!(
            loaded.params.get("a.w").unwrap().data()[0].to_bits(),
            std::f64::consts::PI.to_bits()
        );
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, r#"{"format_version":99,"meta":null,"params":[]}"#).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version { found: 99 })));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut opt = Adam::new(&store);
        let mut g = crate::params::GradAccum::zeros_like(&store);
        g.of_mut(0)[0] = 0.25;
        opt.step(&mut store, &g, 0.01);
        save_checkpoint(&path, &store, serde_json::Value::Null, Some(&opt)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let lopt = loaded.optimizer.unwrap();
        assert_eq!(lopt.t, 1);
        assert_eq!(
            loaded.params.get("x").unwrap().data()[0].to_bits(),
            store.get("x").unwrap().data()[0].to_bits()
        );
    }
}
