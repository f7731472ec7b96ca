//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "HYTCKPT\0"
//! version   u32
//! hlen      u64      length of the JSON header
//! header    hlen bytes of UTF-8 JSON (see `Header`)
//! params    f64 x header.param_count
//! adam_m    f64 x header.param_count   (only when header.optimizer is set)
//! adam_v    f64 x header.param_count   (only when header.optimizer is set)
//! ```

use std::fs;
use std::path::Path;

use hyt_core::codec::{VocabConfig, Vocabulary};
use hyt_core::hyt::{Adam, BatchSampler, ModalityLosses, SamplerState, TrainConfig, TrainerState};
use hyt_core::net::{ModelParameters, NetConfig};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"HYTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub sampler: SamplerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub net: NetConfig,
    /// Hex FNV-64 of the token table.
    pub vocab_hash: String,
    pub vocab: VocabConfig,
    pub train_config_digest: String,
    pub train: TrainConfig,
    pub epoch: u32,
    pub param_count: usize,
    pub losses: ModalityLosses,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ModelParameters,
    pub optimizer: Option<Adam>,
}

pub fn vocab_hash_hex(v: &Vocabulary) -> String {
    format!("{:016x}", v.hash())
}

/// Digest of the training config's canonical JSON.
pub fn config_digest(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = hyt_core::fnv::Fnv64::new();
    h.write(json.as_bytes());
    format!("{:016x}", h.finish())
}

impl Checkpoint {
    pub fn from_trainer(state: &TrainerState, vocab: &Vocabulary, cfg: &TrainConfig) -> Self {
        let header = Header {
            net: *state.params.config(),
            vocab_hash: vocab_hash_hex(vocab),
            vocab: *vocab.config(),
            train_config_digest: config_digest(cfg),
            train: cfg.clone(),
            epoch: state.epoch,
            param_count: state.params.len(),
            losses: state.last_epoch,
            optimizer: Some(OptimizerMeta { step: state.optimizer.t, sampler: state.sampler.state() }),
        };
        Self { header, params: state.params.clone(), optimizer: Some(state.optimizer.clone()) }
    }

    /// Rebuilds the trainer so training continues exactly where it stopped.
    pub fn into_trainer(self) -> Result<TrainerState> {
        let (Some(meta), Some(optimizer)) = (self.header.optimizer, self.optimizer) else {
            return Err(LabError::Incompatible("checkpoint carries no optimizer state".into()));
        };
        Ok(TrainerState {
            params: self.params,
            optimizer,
            epoch: self.header.epoch,
            sampler: BatchSampler::restore(&meta.sampler),
            last_epoch: self.header.losses,
        })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.header.vocab)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n = self.params.len();
        let blobs = if self.optimizer.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n * blobs);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(self.params.flat());
        if let Some(a) = &self.optimizer {
            put(&a.m);
            put(&a.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LabError::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(LabError::Incompatible(format!("format version {version}, this build reads {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let n = header.param_count;
        let blobs = if header.optimizer.is_some() { 3 } else { 1 };
        let data = &bytes[20 + hlen..];
        if data.len() != 8 * n * blobs {
            return Err(bad(&format!("{} blob bytes, expected {}", data.len(), 8 * n * blobs)));
        }
        let read = |k: usize| -> Vec<f64> {
            data[8 * n * k..8 * n * (k + 1)].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let params = ModelParameters::from_flat(header.net, read(0))?;
        let optimizer = header.optimizer.as_ref().map(|m| Adam { m: read(1), v: read(2), t: m.step });
        Ok(Self { header, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        // Write then rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| LabError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses checkpoints whose token table differs from `vocab`.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_vocab(vocab)?;
        Ok(ck)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let want = vocab_hash_hex(vocab);
        if self.header.vocab_hash != want {
            return Err(LabError::Incompatible(format!(
                "vocabulary hash {} does not match expected {want}",
                self.header.vocab_hash
            )));
        }
        if self.header.net.vocab_size != vocab.len() {
            return Err(LabError::Incompatible(format!(
                "model vocabulary size {} but the vocabulary has {} tokens",
                self.header.net.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }
}

/// Token table as JSON, written next to checkpoints so decoded output can be audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub hash: String,
    pub config: VocabConfig,
    pub tokens: Vec<VocabEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: u32,
    pub token: String,
    pub class: hyt_core::codec::TokenClass,
}

pub fn manifest(v: &Vocabulary) -> VocabManifest {
    VocabManifest {
        hash: vocab_hash_hex(v),
        config: *v.config(),
        tokens: v
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| VocabEntry { id: i as u32, token: t.clone(), class: v.class(i as u32).expect("dense ids") })
            .collect(),
    }
}

pub fn write_manifest(path: &Path, v: &Vocabulary) -> Result<()> {
    let json = serde_json::to_string_pretty(&manifest(v)).expect("manifest serializes");
    fs::write(path, json).map_err(|e| LabError::io(path, e))
}
