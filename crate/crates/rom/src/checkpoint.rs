//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header (version, configuration echo, tensor shapes), then the
//! parameters, first moments and second moments as little-endian `f32`, each
//! in header order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rom_core::model::{Model, ModelConfig};
use rom_core::nn::ParamStore;
use rom_core::optim::{AdamConfig, OptimizerState};
use rom_core::train::{Checkpoint, TrainConfig};
use rom_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::corpus::{open, read_f32s, read_header};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ROMCKPT\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    class_weights: Vec<f64>,
    optimizer_step: u64,
    adam: AdamConfig,
    tensors: Vec<TensorShape>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint<f32>) -> Result<()> {
    let header = Header {
        version: ck.version,
        dtype: "f32le".into(),
        model_config: ck.model_config.clone(),
        train_config: ck.train_config.clone(),
        epoch: ck.epoch,
        class_weights: ck.class_weights.clone(),
        optimizer_step: ck.optimizer.step,
        adam: ck.optimizer.config,
        tensors: ck
            .params
            .names()
            .iter()
            .zip(ck.params.tensors())
            .map(|(name, t)| TensorShape {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let groups = [
        ck.params.tensors(),
        &ck.optimizer.first,
        &ck.optimizer.second,
    ];
    for t in groups.into_iter().flatten() {
        for x in t.data() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint; shape and version problems are reported here, model
/// compatibility by [`Checkpoint::restore`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    let mut r = open(path)?;
    let h: Header = read_header(path, &mut r, MAGIC)?;
    if h.version != rom_core::train::CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "checkpoint version {} (expected {})",
                h.version,
                rom_core::train::CHECKPOINT_VERSION
            ),
        ));
    }
    if h.dtype != "f32le" {
        return Err(Error::format(
            path,
            format!("unsupported dtype {}", h.dtype),
        ));
    }
    let total: usize = h.tensors.iter().map(|t| t.rows * t.cols).sum();
    let flat = read_f32s(path, &mut r, 3 * total, true)?;
    let mut chunks = flat.chunks_exact(total.max(1));
    let mut group = || -> Result<Vec<Tensor<f32>>> {
        let data = if total == 0 {
            &[][..]
        } else {
            chunks.next().unwrap_or(&[])
        };
        let mut at = 0;
        let mut out = Vec::with_capacity(h.tensors.len());
        for t in &h.tensors {
            let len = t.rows * t.cols;
            out.push(Tensor::from_vec(
                t.rows,
                t.cols,
                data[at..at + len].to_vec(),
            )?);
            at += len;
        }
        Ok(out)
    };
    let params = group()?;
    let first = group()?;
    let second = group()?;
    let mut store = ParamStore::new();
    for (t, tensor) in h.tensors.iter().zip(params) {
        store.add(t.name.clone(), tensor);
    }
    Ok(Checkpoint {
        version: h.version,
        model_config: h.model_config,
        train_config: h.train_config,
        epoch: h.epoch,
        class_weights: h.class_weights,
        params: store,
        optimizer: OptimizerState {
            config: h.adam,
            step: h.optimizer_step,
            first,
            second,
        },
    })
}

/// Loads a checkpoint and rebuilds the model it holds.
pub fn load_model(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Checkpoint<f32>, Model<f32>, OptimizerState<f32>)> {
    let ck = load_checkpoint(path)?;
    let (model, state) = ck
        .restore(expected)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((ck, model, state))
}
