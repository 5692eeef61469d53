//! Self-describing encoder checkpoints.
//!
//! On disk: magic `HVCP`, format version, a JSON header (method id, embed
//! dim, epoch, config snapshot, metric history, tensor manifest), then the
//! tensor data as little-endian f64 in manifest order.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HVCP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    /// Pretraining method id, e.g. "vae" or "simclr".
    pub method: String,
    /// Dimension of the downstream embedding this encoder produces.
    pub embed_dim: usize,
    /// Last completed training epoch.
    pub epoch: usize,
    /// Enough of the training configuration to rebuild the encoder.
    pub train_config: BTreeMap<String, String>,
    pub metric_history: Vec<MetricRecord>,
}

impl CheckpointMeta {
    pub fn validate(&self) -> Result<()> {
        if self.method.is_empty() {
            return Err(Error::Checkpoint("empty method id".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Checkpoint("embed_dim must be positive".into()));
        }
        let mut last = 0usize;
        for record in &self.metric_history {
            if record.epoch < last {
                return Err(Error::Checkpoint(format!(
                    "metric history goes backwards at epoch {}",
                    record.epoch
                )));
            }
            last = record.epoch;
        }
        Ok(())
    }

    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.train_config
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("train_config missing '{key}'")))
    }

    pub fn config_usize(&self, key: &str) -> Result<usize> {
        let raw = self.config_value(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("train_config['{key}'] = '{raw}' not an integer")))
    }
}

/// A pretrained encoder: metadata plus its parameter tensors.
#[derive(Debug)]
pub struct EncoderCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

impl EncoderCheckpoint {
    pub fn new(meta: CheckpointMeta, params: ParamStore) -> Result<Self> {
        meta.validate()?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::io(path, e);
        let mut tensors = Vec::new();
        for id in self.params.ids() {
            tensors.push(TensorEntry {
                name: self.params.name(id).to_string(),
                shape: self.params.value(id).shape().to_vec(),
                trainable: self.params.is_trainable(id),
            });
        }
        let header = Header { meta: self.meta.clone(), tensors };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_FORMAT_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(header_bytes.len() as u64).map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;
        for id in self.params.ids() {
            for &v in self.params.value(id).iter() {
                w.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e: std::io::Error| Error::io(path, e);
        let file = std::fs::File::open(path).map_err(io)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(io)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint header: {e}")))?;
        header.meta.validate()?;

        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            let mut data = vec![0.0f64; count];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            let value = ArrayD::from_shape_vec(entry.shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", entry.name)))?;
            if entry.trainable {
                params.add(&entry.name, value);
            } else {
                params.add_buffer(&entry.name, value);
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self { meta: header.meta, params })
    }

    /// Copy every stored tensor into `ps` by name. `ps` must already contain
    /// a same-shaped entry for each; entries of `ps` not present here are
    /// left untouched.
    pub fn apply_to(&self, ps: &mut ParamStore) -> Result<()> {
        for id in self.params.ids() {
            ps.set_by_name(self.params.name(id), self.params.value(id).clone())?;
        }
        Ok(())
    }
}

/// New store holding only the entries whose name starts with `prefix`,
/// preserving order and trainability.
pub fn subset_by_prefix(ps: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for id in ps.ids() {
        let name = ps.name(id);
        if name.starts_with(prefix) {
            if ps.is_trainable(id) {
                out.add(name, ps.value(id).clone());
            } else {
                out.add_buffer(name, ps.value(id).clone());
            }
        }
    }
    out
}

/// Metric history as CSV (`epoch,name,value`).
pub fn export_metrics_csv(meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "epoch,name,value").map_err(io)?;
    for record in &meta.metric_history {
        writeln!(w, "{},{},{}", record.epoch, record.name, record.value).map_err(io)?;
    }
    w.flush().map_err(io)
}
