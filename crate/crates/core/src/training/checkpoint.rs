//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "KITECKPT"
//! version    u32      CHECKPOINT_VERSION
//! header     u64 length + UTF-8 JSON (CheckpointHeader)
//! params     u64 count, then per entry:
//!              u32 name length, name bytes, u8 trainable,
//!              u32 rank, rank × u64 dims, numel × f32 values
//! optimizer  u8 present; if 1: u64 step, then per param entry
//!              u64 n + n × f32 first moment, u64 n + n × f32 second moment
//! checksum   32 bytes SHA-256 of every preceding byte
//! ```
//!
//! The optimizer hyperparameters live in the header JSON.

use std::fs;
use std::path::Path;

use kite_tensor::{Adam, AdamConfig, ParamStore, Tensor, WeightDecay};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::seed::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KITECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl From<AdamConfig> for AdamSettings {
    fn from(c: AdamConfig) -> Self {
        AdamSettings {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            decoupled: c.decay == WeightDecay::Decoupled,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(s: AdamSettings) -> Self {
        AdamConfig {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: s.weight_decay,
            decay: if s.decoupled {
                WeightDecay::Decoupled
            } else {
                WeightDecay::Coupled
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    kind: CheckpointKind,
    model: ModelConfig,
    vocab: Vec<String>,
    epoch: u64,
    rng: RngState,
    fingerprint: String,
    optimizer: Option<AdamSettings>,
    meta: serde_json::Value,
}

/// Everything needed to rebuild a model and continue or evaluate it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Vocabulary tokens in id order.
    pub vocab: Vec<String>,
    pub epoch: u64,
    pub rng: RngState,
    /// Hex SHA-256 of the training configuration JSON.
    pub fingerprint: String,
    pub store: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
    /// Free-form run facts such as the eval accuracy at save time.
    pub meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| corrupt(format!("length {n} out of range")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            kind: self.kind,
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            rng: self.rng,
            fingerprint: self.fingerprint.clone(),
            optimizer: self.optimizer.as_ref().map(|a| a.config.into()),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        put_u64(&mut out, self.store.len() as u64);
        for (_, p) in self.store.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.trainable));
            put_u32(&mut out, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f32s(&mut out, p.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                put_u64(&mut out, adam.step_count());
                for (id, _) in self.store.iter() {
                    let (m, v) = adam.moments(id);
                    put_u64(&mut out, m.len() as u64);
                    put_f32s(&mut out, m);
                    put_u64(&mut out, v.len() as u64);
                    put_f32s(&mut out, v);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
            return Err(corrupt(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { bytes: body, at: 12 };
        let n = r.len()?;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(n)?).map_err(|e| corrupt(format!("header: {e}")))?;
        let count = r.len()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("parameter name is not UTF-8"))?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(corrupt(format!("bad trainable flag {b} for {name}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| corrupt(format!("shape of {name} overflows")))?;
            let value = Tensor::new(shape, r.f32s(numel)?)?;
            if trainable {
                store.add(name, value)?;
            } else {
                store.add_buffer(name, value)?;
            }
        }
        let optimizer = match (r.u8()?, header.optimizer) {
            (0, None) => None,
            (1, Some(settings)) => {
                let step = r.u64()?;
                let mut first = Vec::with_capacity(count);
                let mut second = Vec::with_capacity(count);
                for _ in 0..count {
                    let n = r.len()?;
                    first.push(r.f32s(n)?);
                    let n = r.len()?;
                    second.push(r.f32s(n)?);
                }
                Some(Adam::from_parts(settings.into(), step, first, second, &store)?)
            }
            _ => return Err(corrupt("optimizer section disagrees with header")),
        };
        if r.at != body.len() {
            return Err(corrupt(format!("{} trailing bytes", body.len() - r.at)));
        }
        header.model.validate()?;
        Ok(Checkpoint {
            kind: header.kind,
            model: header.model,
            vocab: header.vocab,
            epoch: header.epoch,
            rng: header.rng,
            fingerprint: header.fingerprint,
            store,
            optimizer,
            meta: header.meta,
        })
    }

    /// Writes through a temporary sibling and renames, so readers never
    /// see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CoreError::Checkpoint(m) => CoreError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn vocabulary(&self) -> Result<kite_smiles::Vocabulary> {
        let mut text = self.vocab.join("\n");
        text.push('\n');
        Ok(kite_smiles::Vocabulary::from_text(&text)?)
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
