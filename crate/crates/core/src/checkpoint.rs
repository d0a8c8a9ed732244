//! Binary checkpoint container.
//!
//! Layout: `EMKDCKPT` magic, `u32` version, `u64` header length, JSON header,
//! raw little-endian `f64` arrays in header order, then a SHA-256 digest of
//! every preceding byte.

use std::path::Path;

use emkd_tape::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adam::AdamState;
use crate::config::{ModelConfig, TrainConfig};
use crate::encoder::{EncoderParams, Ensemble};
use crate::error::{EmkdError, Result};
use crate::trainer::{BestRecord, EpochRecord, Trainer};

const MAGIC: &[u8; 8] = b"EMKDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ensemble: Ensemble,
    pub optimizers: Option<Vec<AdamState>>,
    pub epoch: usize,
    pub best: Option<BestRecord>,
    pub history: Vec<EpochRecord>,
    pub dataset_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    seeds: Vec<u64>,
    epoch: usize,
    best: Option<BestRecord>,
    history: Vec<EpochRecord>,
    dataset_fingerprint: Option<String>,
    tensors: Vec<(String, Vec<usize>)>,
    optimizer_steps: Option<Vec<u64>>,
}

fn corrupt(msg: impl Into<String>) -> EmkdError {
    EmkdError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, dataset_fingerprint: Option<String>) -> Self {
        Self {
            model: t.model.clone(),
            train: t.train.clone(),
            ensemble: t.ensemble.clone(),
            optimizers: Some(t.optimizers.clone()),
            epoch: t.epoch,
            best: t.best,
            history: t.history.clone(),
            dataset_fingerprint,
        }
    }

    /// Parameters only, e.g. the best validated ensemble.
    pub fn weights_only(t: &Trainer, ensemble: &Ensemble, dataset_fingerprint: Option<String>) -> Self {
        Self {
            ensemble: ensemble.clone(),
            optimizers: None,
            ..Self::from_trainer(t, dataset_fingerprint)
        }
    }

    /// Restores a trainer that continues from `epoch` (lr schedule included).
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut t = Trainer::new(self.model, self.train)?;
        t.ensemble = self.ensemble;
        if let Some(o) = self.optimizers {
            t.optimizers = o;
        }
        t.epoch = self.epoch;
        t.best = self.best;
        t.history = self.history;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let first = &self.ensemble.networks[0];
        let names = first.names();
        let tensors = names
            .into_iter()
            .zip(first.tensors())
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            seeds: self.ensemble.seeds.clone(),
            epoch: self.epoch,
            best: self.best,
            history: self.history.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            tensors,
            optimizer_steps: self
                .optimizers
                .as_ref()
                .map(|o| o.iter().map(|s| s.step).collect()),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let push = |out: &mut Vec<u8>, xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (n, net) in self.ensemble.networks.iter().enumerate() {
            for t in net.tensors() {
                push(&mut out, t.data());
            }
            if let Some(opt) = &self.optimizers {
                for (m, v) in opt[n].m.iter().zip(&opt[n].v) {
                    push(&mut out, m);
                    push(&mut out, v);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch: file is corrupt or truncated"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(20..20 + hlen)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut cursor = &body[20 + hlen..];
        let mut take = |len: usize| -> Result<Vec<f64>> {
            let nbytes = len * 8;
            if cursor.len() < nbytes {
                return Err(corrupt("truncated tensor data"));
            }
            let (head, rest) = cursor.split_at(nbytes);
            cursor = rest;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };

        let template = EncoderParams::init(&header.model, 0)?;
        if template.names().len() != header.tensors.len()
            || template
                .tensors()
                .iter()
                .zip(&header.tensors)
                .any(|(t, (_, s))| t.shape() != s.as_slice())
        {
            return Err(corrupt("tensor layout does not match the stored configuration"));
        }
        let mut networks = Vec::with_capacity(header.seeds.len());
        let mut optimizers = header.optimizer_steps.as_ref().map(|_| Vec::new());
        for n in 0..header.seeds.len() {
            let mut net = template.clone();
            for (t, (_, shape)) in net.tensors_mut().into_iter().zip(&header.tensors) {
                let len = shape.iter().product();
                *t = Tensor::new(shape.clone(), take(len)?)?;
            }
            if let (Some(opts), Some(steps)) = (optimizers.as_mut(), &header.optimizer_steps) {
                let mut st = AdamState::new([]);
                for (_, shape) in &header.tensors {
                    let len = shape.iter().product();
                    st.m.push(take(len)?);
                    st.v.push(take(len)?);
                }
                st.step = steps[n];
                opts.push(st);
            }
            networks.push(net);
        }
        if !cursor.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            ensemble: Ensemble {
                networks,
                seeds: header.seeds,
            },
            optimizers,
            epoch: header.epoch,
            best: header.best,
            history: header.history,
            dataset_fingerprint: header.dataset_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| EmkdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EmkdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
