//! Versioned binary container: magic, version, a JSON manifest, then every
//! array as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::Model;
use crate::optim::Adam;
use crate::rng::{self, RngState, Stream};
use crate::tensor::{numel, Tensor};

const MAGIC: &[u8; 8] = b"MRJEPACK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub removed_channels: Vec<usize>,
    pub raw_dim: usize,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    removed_channels: Vec<usize>,
    raw_dim: usize,
    params: Vec<Entry>,
    shadow_len: usize,
    epoch: usize,
    step: u64,
    adam_step: u64,
    dropout_rng: RngState,
    shuffle_rng: RngState,
}

impl Checkpoint {
    /// Effective (post-mask) variable count the model was trained on.
    pub fn effective_dim(&self) -> usize {
        self.raw_dim - self.removed_channels.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            removed_channels: self.removed_channels.clone(),
            raw_dim: self.raw_dim,
            params: s
                .online
                .names()
                .iter()
                .zip(s.online.values())
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            shadow_len: s.shadow.len(),
            epoch: s.epoch,
            step: s.step,
            adam_step: s.adam.step,
            dropout_rng: RngState::capture(&s.dropout_rng),
            shuffle_rng: RngState::capture(&s.shuffle_rng),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = s
            .online
            .values()
            .iter()
            .chain(s.shadow.values())
            .chain(&s.adam.m)
            .chain(&s.adam.v);
        for t in arrays {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Incompatible(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(body).map_err(|e| Error::Incompatible(e.to_string()))?;
        m.config.validate()?;

        let mut data = bytes[20 + mlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        if !(bytes.len() - 20 - mlen).is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n = numel(shape);
            let v: Vec<f64> = data.by_ref().take(n).collect();
            if v.len() != n {
                return Err(bad("truncated payload"));
            }
            Tensor::new(shape.to_vec(), v)
        };
        let names: Vec<String> = m.params.iter().map(|e| e.name.clone()).collect();
        let online_vals = m.params.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
        let shadow_vals = m.params[..m.shadow_len.min(m.params.len())]
            .iter()
            .map(|e| read(&e.shape))
            .collect::<Result<Vec<_>>>()?;
        let mom_m = m.params.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
        let mom_v = m.params.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
        if data.next().is_some() {
            return Err(bad("trailing payload"));
        }

        let mut init = rng::stream(m.config.seed, Stream::Init);
        let (model, mut online) = Model::new(&m.config.model, &mut init)?;
        if m.shadow_len != model.shadow_len() {
            return Err(bad("EMA shadow layout does not match the model"));
        }
        online.load_values(&names, online_vals)?;
        let mut shadow = online.prefix(model.shadow_len());
        shadow.load_values(&names[..model.shadow_len()], shadow_vals)?;
        let mut adam = Adam::new(online.values(), m.config.lr, m.config.weight_decay);
        adam.step = m.adam_step;
        adam.m = mom_m;
        adam.v = mom_v;
        Ok(Self {
            removed_channels: m.removed_channels,
            raw_dim: m.raw_dim,
            state: TrainState {
                model,
                online,
                shadow,
                adam,
                epoch: m.epoch,
                step: m.step,
                dropout_rng: m.dropout_rng.restore()?,
                shuffle_rng: m.shuffle_rng.restore()?,
            },
            config: m.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
