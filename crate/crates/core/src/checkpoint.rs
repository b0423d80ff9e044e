//! Model serialization: the `SGWT` checkpoint format (f32 tensor table with
//! CRC32, the interchange artifact) and the `SGTS` training-state sidecar
//! (f64 parameters, optimizer moments, and iteration counter, so an
//! interrupted run resumes bit-identically).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::training::AdamState;

pub const SGWT_MAGIC: &[u8; 4] = b"SGWT";
pub const SGWT_VERSION: u32 = 1;
pub const SGTS_MAGIC: &[u8; 4] = b"SGTS";
pub const SGTS_VERSION: u32 = 1;

/// Reference-configuration parameter budget: the 256-wide, 9-round model
/// carries about 12M parameters; the loader enforces a +/-5% window.
pub const REFERENCE_PARAM_COUNT: usize = 12_000_000;
pub const REFERENCE_PARAM_TOLERANCE: f64 = 0.05;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated payload: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("non-UTF-8 name".into()))
    }
}

fn put_tensor_entry(buf: &mut Vec<u8>, name: &str, tensor: &Tensor, wide: bool) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, tensor.shape().len() as u32);
    for &d in tensor.shape() {
        put_u32(buf, d as u32);
    }
    for &v in tensor.data() {
        if wide {
            buf.extend_from_slice(&v.to_le_bytes());
        } else {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

fn read_tensor_entry(r: &mut Reader, wide: bool) -> Result<(String, Tensor)> {
    let name = r.string()?;
    let rank = r.u32()? as usize;
    if rank != 2 {
        return Err(Error::Format(format!("tensor {name:?} has rank {rank}, expected 2")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let count = rows * cols;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        if wide {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        } else {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
        }
    }
    Ok((name, Tensor::matrix(rows, cols, data)?))
}

fn finalize_with_crc(mut buf: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

fn strip_and_verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Format("payload shorter than its checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Format(format!(
            "CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    Ok(body)
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SGWT_MAGIC);
    put_u32(&mut buf, SGWT_VERSION);
    let config = serde_json::to_vec(&model.config)?;
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(&config);
    let tensors = model.named_tensors();
    put_u32(&mut buf, tensors.len() as u32);
    for (name, tensor) in tensors {
        put_tensor_entry(&mut buf, &name, tensor, false);
    }
    Ok(finalize_with_crc(buf))
}

/// Parse and validate a checkpoint; returns the model and its parameter
/// count. The reference configuration must land within +/-5% of 12M
/// parameters.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, usize)> {
    let body = strip_and_verify_crc(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != SGWT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"SGWT\"")));
    }
    let version = r.u32()?;
    if version != SGWT_VERSION {
        return Err(Error::Format(format!("unsupported SGWT version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    config.validate()?;

    let count = r.u32()? as usize;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let (name, tensor) = read_tensor_entry(&mut r, false)?;
        if table.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let mut model = Model::init(config, 0)?;
    for (name, slot) in model.named_tensors_mut() {
        let stored = table
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
        if stored.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        *slot = stored;
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra:?} in checkpoint")));
    }

    let param_count = model.param_count();
    let reference = ModelConfig::reference();
    let c = &model.config;
    if c.descriptor_dim == reference.descriptor_dim
        && c.layers == reference.layers
        && c.heads == reference.heads
        && c.variant == reference.variant
    {
        let lo = REFERENCE_PARAM_COUNT as f64 * (1.0 - REFERENCE_PARAM_TOLERANCE);
        let hi = REFERENCE_PARAM_COUNT as f64 * (1.0 + REFERENCE_PARAM_TOLERANCE);
        let n = param_count as f64;
        if n < lo || n > hi {
            return Err(Error::Format(format!(
                "reference configuration has {param_count} parameters, outside {REFERENCE_PARAM_COUNT} +/- 5%"
            )));
        }
    }
    Ok((model, param_count))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Training state captured at an iteration boundary, including the running
/// best-by-validation model so a resumed run reproduces an uninterrupted one
/// bit for bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub iteration: u64,
    pub best_score: f64,
    pub best_model: Option<Model>,
}

pub fn encode_train_state(state: &TrainState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SGTS_MAGIC);
    put_u32(&mut buf, SGTS_VERSION);
    put_u64(&mut buf, state.iteration);
    put_u64(&mut buf, state.adam.step);
    buf.extend_from_slice(&state.best_score.to_le_bytes());
    buf.push(state.best_model.is_some() as u8);
    let config = serde_json::to_vec(&state.model.config)?;
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(&config);

    let params = state.model.named_tensors();
    let best = state.best_model.as_ref().map(|m| m.named_tensors()).unwrap_or_default();
    let entries = params.len() + best.len() + state.adam.first.len() + state.adam.second.len();
    put_u32(&mut buf, entries as u32);
    for (name, tensor) in params {
        put_tensor_entry(&mut buf, &format!("param.{name}"), tensor, true);
    }
    for (name, tensor) in best {
        put_tensor_entry(&mut buf, &format!("best.{name}"), tensor, true);
    }
    for (name, tensor) in &state.adam.first {
        put_tensor_entry(&mut buf, &format!("adam_m.{name}"), tensor, true);
    }
    for (name, tensor) in &state.adam.second {
        put_tensor_entry(&mut buf, &format!("adam_v.{name}"), tensor, true);
    }
    Ok(finalize_with_crc(buf))
}

pub fn decode_train_state(bytes: &[u8]) -> Result<TrainState> {
    let body = strip_and_verify_crc(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != SGTS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"SGTS\"")));
    }
    let version = r.u32()?;
    if version != SGTS_VERSION {
        return Err(Error::Format(format!("unsupported SGTS version {version}")));
    }
    let iteration = r.u64()?;
    let step = r.u64()?;
    let best_score = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let has_best = r.take(1)?[0] != 0;
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;

    let count = r.u32()? as usize;
    let mut params = BTreeMap::new();
    let mut best_params = BTreeMap::new();
    let mut adam = AdamState::new();
    adam.step = step;
    for _ in 0..count {
        let (name, tensor) = read_tensor_entry(&mut r, true)?;
        if let Some(rest) = name.strip_prefix("param.") {
            params.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("best.") {
            best_params.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("adam_m.") {
            adam.first.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("adam_v.") {
            adam.second.insert(rest.to_string(), tensor);
        } else {
            return Err(Error::Format(format!("unknown training-state entry {name:?}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let fill = |mut model: Model, mut table: BTreeMap<String, Tensor>| -> Result<Model> {
        for (name, slot) in model.named_tensors_mut() {
            let stored = table
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("training state is missing parameter {name:?}")))?;
            if stored.shape() != slot.shape() {
                return Err(Error::Format(format!("parameter {name:?} shape mismatch")));
            }
            *slot = stored;
        }
        Ok(model)
    };
    let model = fill(Model::init(config.clone(), 0)?, params)?;
    let best_model = if has_best {
        Some(fill(Model::init(config, 0)?, best_params)?)
    } else {
        None
    };
    Ok(TrainState { model, adam, iteration, best_score, best_model })
}

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_train_state(state)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_train_state(&bytes)
}
