//! Checkpoint archive: a magic tag, a JSON header (configuration, history,
//! tensor index) and little-endian `f32` tensor data. Values are stored
//! bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::schedule::TrainConfig;
use super::trainer::EpochRecord;
use crate::config::ModelConfig;
use crate::error::{DcamError, Result};
use crate::model::Dcam;
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"DCAMCKPT";
pub const FORMAT_VERSION: &str = "dcam-checkpoint-1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs completed when the parameters were captured.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    cfg: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

fn write_tensor(out: &mut Vec<u8>, t: &ArrayD<f32>) {
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(data: &[u8], pos: &mut usize, shape: &[usize]) -> Result<ArrayD<f32>> {
    let n: usize = shape.iter().product();
    let end = *pos + 4 * n;
    if end > data.len() {
        return Err(DcamError::Checkpoint("tensor data is truncated".into()));
    }
    let vals = data[*pos..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *pos = end;
    ArrayD::from_shape_vec(IxDyn(shape), vals).map_err(|e| DcamError::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self
            .params
            .ids()
            .map(|id| TensorEntry {
                name: self.params.name(id).to_string(),
                shape: self.params.get(id).shape().to_vec(),
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION.to_string(),
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { cfg: o.cfg, step: o.step }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DcamError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in self.params.ids() {
            write_tensor(&mut out, self.params.get(id));
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                write_tensor(&mut out, t);
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("partial");
        fs::File::create(&tmp)?.write_all(&out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        fs::File::open(path)?.read_to_end(&mut data)?;
        if data.len() < 16 || &data[..8] != MAGIC {
            return Err(DcamError::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
        if 16 + len > data.len() {
            return Err(DcamError::Checkpoint("header is truncated".into()));
        }
        let header: Header = serde_json::from_slice(&data[16..16 + len]).map_err(|e| DcamError::Checkpoint(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(DcamError::Checkpoint(format!("unsupported checkpoint version {:?}", header.version)));
        }
        let mut pos = 16 + len;
        let mut params = ParamStore::new();
        for t in &header.tensors {
            params.add(t.name.clone(), read_tensor(&data, &mut pos, &t.shape)?);
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut m = Vec::with_capacity(header.tensors.len());
                let mut v = Vec::with_capacity(header.tensors.len());
                for t in &header.tensors {
                    m.push(read_tensor(&data, &mut pos, &t.shape)?);
                }
                for t in &header.tensors {
                    v.push(read_tensor(&data, &mut pos, &t.shape)?);
                }
                Some(AdamW { cfg: o.cfg, step: o.step, m, v })
            }
            None => None,
        };
        if pos != data.len() {
            return Err(DcamError::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            history: header.history,
            params,
            optimizer,
        })
    }

    /// Rebuilds the network and checks the stored tensors match it exactly.
    pub fn build_model(&self) -> Result<Dcam> {
        let (model, fresh) = Dcam::init::<f32>(&self.model, 0)?;
        if fresh.len() != self.params.len() {
            return Err(DcamError::Checkpoint(format!(
                "checkpoint has {} tensors, the configuration needs {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for id in fresh.ids() {
            if fresh.name(id) != self.params.name(id) || fresh.get(id).shape() != self.params.get(id).shape() {
                return Err(DcamError::Checkpoint(format!(
                    "tensor {} ({:?}) does not match expected {} ({:?})",
                    self.params.name(id),
                    self.params.get(id).shape(),
                    fresh.name(id),
                    fresh.get(id).shape()
                )));
            }
        }
        Ok(model)
    }
}
