//! Versioned checkpoint container.
//!
//! Layout: `ATGNNCKP` magic, u32 version, u64 header length (all
//! little-endian), a JSON header, then every tensor as row-major f64 LE in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Atgnn;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"ATGNNCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Epoch whose generator is drawn next.
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    epoch: usize,
    optimizer_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

const SECTIONS: [&str; 3] = ["param", "adam.m", "adam.v"];

/// Serializes `state` with `config` (whose model section is replaced by the
/// model's own configuration).
pub fn to_bytes<T: Scalar>(config: &RunConfig, state: &TrainState<T>) -> Vec<u8> {
    let stores = [state.model.params(), &state.adam.m, &state.adam.v];
    let tensors: Vec<TensorEntry> = SECTIONS
        .iter()
        .zip(stores)
        .flat_map(|(sec, store)| {
            store.iter().map(move |(k, t)| TensorEntry {
                name: format!("{sec}/{k}"),
                rows: t.rows(),
                cols: t.cols(),
            })
        })
        .collect();
    let header = Header {
        version: VERSION,
        config: RunConfig {
            model: state.model.config().clone(),
            ..config.clone()
        },
        epoch: state.epoch,
        optimizer_step: state.adam.step,
        rng: RngState {
            seed: config.train.seed,
            next_epoch: state.epoch,
        },
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * state.model.params().scalar_count() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for store in stores {
        for (_, t) in store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<(RunConfig, TrainState<T>)> {
    let fmt = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| fmt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| fmt(format!("header: {e}")))?;
    let mut payload = &bytes[20 + hlen..];
    let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
    for entry in &header.tensors {
        let (sec, key) = entry
            .name
            .split_once('/')
            .ok_or_else(|| fmt(format!("bad tensor name `{}`", entry.name)))?;
        let slot = SECTIONS
            .iter()
            .position(|s| *s == sec)
            .ok_or_else(|| fmt(format!("unknown section `{sec}`")))?;
        let n = entry.rows * entry.cols;
        if payload.len() < n * 8 {
            return Err(fmt(format!("payload ends inside `{}`", entry.name)));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        payload = &payload[n * 8..];
        stores[slot].insert(key, Tensor::from_vec(entry.rows, entry.cols, data)?);
    }
    if !payload.is_empty() {
        return Err(fmt(format!("{} trailing bytes", payload.len())));
    }
    let [params, m, v] = stores;
    header.config.model.validate()?;
    let model = Atgnn::from_params(header.config.model.clone(), params)?;
    let same_layout = |s: &ParamStore<T>| {
        s.len() == model.params().len()
            && s.iter().zip(model.params().iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    };
    if !same_layout(&m) || !same_layout(&v) {
        return Err(fmt("optimizer state does not match the parameters".into()));
    }
    let state = TrainState {
        model,
        adam: AdamState {
            m,
            v,
            step: header.optimizer_step,
        },
        epoch: header.epoch,
    };
    Ok((header.config, state))
}

pub fn save<T: Scalar>(path: &Path, config: &RunConfig, state: &TrainState<T>) -> Result<()> {
    let bytes = to_bytes(config, state);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(RunConfig, TrainState<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
