//! Checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! "TBVC" | u32 schema | u32 header_len | header JSON
//! u32 tensor_count | tensor_count × (u32 name_len | name | u32 rows | u32 cols | f32 data)
//! u64 adam_step | tensor_count × (first moment f32 data | second moment f32 data)
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Every stored value is already f32-representable, so a load followed by
//! a save reproduces the file byte for byte.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{AcousticModel, FeatureNorm, ModelConfig};
use crate::nn::optim::Adam;
use crate::nn::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TBVC";
pub const CHECKPOINT_SCHEMA: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    inventory: Vec<String>,
    norm: FeatureNorm,
    train_config: TrainConfig,
    step: u64,
    rng_seed: String,
    rng_stream: u64,
    /// Decimal `u128`.
    rng_word_pos: String,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AcousticModel,
    pub optimizer: Adam,
    pub train_config: TrainConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        Self {
            model: state.model.clone(),
            optimizer: state.optimizer.clone(),
            train_config: cfg.clone(),
            step: state.step,
            rng: state.rng.clone(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            model: self.model,
            optimizer: self.optimizer,
            step: self.step,
            rng: self.rng,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("checkpoint field exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a checkpoint.
pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model_config: ck.model.config.clone(),
        inventory: ck.model.inventory.clone(),
        norm: ck.model.norm.clone(),
        train_config: ck.train_config.clone(),
        step: ck.step,
        rng_seed: hex::encode(ck.rng.get_seed()),
        rng_stream: ck.rng.get_stream(),
        rng_word_pos: ck.rng.get_word_pos().to_string(),
    };
    let header = serde_json::to_vec(&header)?;
    let store = &ck.model.store;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, store.len())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name);
        let v = store.value(id);
        put_u32(&mut out, v.rows())?;
        put_u32(&mut out, v.cols())?;
        put_f32s(&mut out, v);
    }
    if ck.optimizer.first.len() != store.len() || ck.optimizer.second.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match the parameter store"));
    }
    out.extend_from_slice(&ck.optimizer.step.to_le_bytes());
    for (m, v) in ck.optimizer.first.iter().zip(&ck.optimizer.second) {
        put_f32s(&mut out, m);
        put_f32s(&mut out, v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..]);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointCorrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CheckpointCorrupt("tensor size overflows".into()))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

/// Parses and verifies a checkpoint.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointCorrupt("not a checkpoint file".into()));
    }
    let schema = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::CheckpointVersion {
            found: schema,
            expected: CHECKPOINT_SCHEMA,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let actual = Sha256::digest(body);
    if actual[..] != *digest {
        return Err(Error::CheckpointCorrupt(format!(
            "checksum mismatch: stored {}, computed {}",
            hex::encode(digest),
            hex::encode(&actual[..])
        )));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let header_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
    let corrupt = |msg: String| Error::CheckpointCorrupt(msg);

    let mut model = AcousticModel::new(header.model_config, header.inventory, header.norm, 0)
        .map_err(|e| corrupt(format!("model config: {e}")))?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(corrupt(format!(
            "{count} tensors stored, model defines {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
        if name != model.store.name(id) {
            return Err(corrupt(format!("unexpected tensor {name}, expected {}", model.store.name(id))));
        }
        let (rows, cols) = (r.u32()?, r.u32()?);
        if (rows, cols) != model.store.value(id).shape() {
            return Err(corrupt(format!("tensor {name} has shape {rows}x{cols}")));
        }
        *model.store.value_mut(id) = r.f32s(rows, cols)?;
    }
    let step = r.u64()?;
    let mut first = Vec::with_capacity(ids.len());
    let mut second = Vec::with_capacity(ids.len());
    for &id in &ids {
        let (rows, cols) = model.store.value(id).shape();
        first.push(r.f32s(rows, cols)?);
        second.push(r.f32s(rows, cols)?);
    }
    if r.pos != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let seed: [u8; 32] = hex::decode(&header.rng_seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| corrupt("bad rng seed".into()))?;
    let word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| corrupt("bad rng word position".into()))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        model,
        optimizer: Adam {
            config: header.train_config.adam(),
            step,
            first,
            second,
        },
        train_config: header.train_config,
        step: header.step,
        rng,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &write_checkpoint(ck)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}
