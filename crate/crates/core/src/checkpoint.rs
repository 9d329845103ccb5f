//! Binary checkpoints: parameters, optimizer moments and training progress.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SPCK" | u32 version | u32 header_len | header JSON
//! u32 n_blocks | n_blocks × (u16 name_len | name | u32 rows | u32 cols | f32 × rows·cols)
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Parameter blocks come first in store order, then `adam.m.<name>` and
//! `adam.v.<name>` for every parameter.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::train::{config_hash, AdamState, EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    grid: GridSpec,
    epoch: usize,
    adam_step: u64,
    best_val: Option<f64>,
    best_epoch: usize,
    log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub grid: GridSpec,
    pub store: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn push_block(out: &mut Vec<u8>, name: &str, m: &Mat) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((m.rows as u32).to_le_bytes());
    out.extend((m.cols as u32).to_le_bytes());
    for &x in &m.data {
        out.extend((x as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig, grid: &GridSpec) -> Self {
        Checkpoint {
            config_hash: config_hash(&state.model.config, cfg),
            model_config: state.model.config.clone(),
            train_config: cfg.clone(),
            grid: grid.clone(),
            store: state.model.store.clone(),
            adam: state.adam.clone(),
            epoch: state.epoch,
            best_val: state.best_val,
            best_epoch: state.best_epoch,
            log: state.log.clone(),
        }
    }

    /// Rebuilds the model these parameters belong to.
    pub fn model(&self) -> Result<Model> {
        Model::with_store(
            self.model_config.clone(),
            Arc::new(self.grid.clone()),
            self.store.clone(),
        )
        .map_err(|e| corrupt(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config_hash: self.config_hash.clone(),
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            grid: self.grid.clone(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            best_val: self.best_val.is_finite().then_some(self.best_val),
            best_epoch: self.best_epoch,
            log: self.log.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(&json);
        out.extend(((self.store.len() * 3) as u32).to_le_bytes());
        for (_, name, m) in self.store.iter() {
            push_block(&mut out, name, m);
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((_, name, _), m) in self.store.iter().zip(moments.iter()) {
                push_block(&mut out, &format!("{prefix}{name}"), m);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend(digest.as_slice());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 4 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| corrupt(format!("header: {e}")))?;
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| corrupt("block name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(
                rows.checked_mul(cols)
                    .and_then(|n| n.checked_mul(4))
                    .ok_or_else(|| corrupt("block too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            blocks.push((name, Mat::from_vec(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last block"));
        }
        if n_blocks % 3 != 0 {
            return Err(corrupt("block count is not parameters plus two moments"));
        }
        let n = n_blocks / 3;
        let mut store = ParamStore::new();
        let mut adam = AdamState {
            step: header.adam_step,
            m: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (name, value) = &blocks[i];
            for (k, target) in [(1, &mut adam.m), (2, &mut adam.v)] {
                let (mname, mval) = &blocks[k * n + i];
                let prefix = if k == 1 { "adam.m." } else { "adam.v." };
                if mname.strip_prefix(prefix) != Some(name.as_str()) || mval.shape() != value.shape() {
                    return Err(corrupt(format!("moment block {mname} does not match {name}")));
                }
                target.push(mval.clone());
            }
            if store.find(name).is_some() {
                return Err(corrupt(format!("duplicate block {name}")));
            }
            store.add(name.clone(), value.clone());
        }
        let ckpt = Checkpoint {
            config_hash: header.config_hash,
            model_config: header.model_config,
            train_config: header.train_config,
            grid: header.grid,
            store,
            adam,
            epoch: header.epoch,
            best_val: header.best_val.unwrap_or(f64::INFINITY),
            best_epoch: header.best_epoch,
            log: header.log,
        };
        if config_hash(&ckpt.model_config, &ckpt.train_config) != ckpt.config_hash {
            return Err(corrupt("config hash does not match recorded configs"));
        }
        // layout check
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            history_len: 2,
            k_max: 2,
            d_latent: 2,
            n_experts: 2,
            n_bands: 2,
            n_prompts: 1,
            prompt_heads: 1,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            ..ModelConfig::default()
        };
        let grid = Arc::new(GridSpec::equiangular(vec!["a".into()], 4, 8).unwrap());
        let mut model = Model::new(cfg, grid.clone(), 3).unwrap();
        model.store.round_to_f32();
        let mut adam = AdamState::new(&model.store);
        adam.step = 7;
        adam.m[0].data[0] = 0.25;
        let state = TrainState {
            model,
            adam,
            epoch: 3,
            best_val: f64::INFINITY,
            best_epoch: 0,
            log: vec![],
        };
        Checkpoint::from_state(&state, &TrainConfig::default(), &grid)
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
