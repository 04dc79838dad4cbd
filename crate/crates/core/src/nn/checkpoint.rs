//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//! `RTLZCKPT` | u32 version | u8 dtype | u32 len + JSON model config |
//! u32 count | per parameter: u16 len + name, u8 rank, u32 dims, raw values |
//! u32 CRC-32 of all preceding bytes.

use std::path::Path;

use super::{DType, Model, ModelConfig, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RTLZCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A loaded model of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }

    pub fn into_f32(self) -> Model<f32> {
        match self {
            AnyModel::F32(m) => m,
            AnyModel::F64(m) => m.cast(),
        }
    }

    pub fn into_f64(self) -> Model<f64> {
        match self {
            AnyModel::F32(m) => m.cast(),
            AnyModel::F64(m) => m,
        }
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let params = model.params();
    out.extend_from_slice(&(params.specs().len() as u32).to_le_bytes());
    for (i, spec) in params.specs().iter().enumerate() {
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(spec.shape.len() as u8);
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in params.get(i) {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Writes atomically: a temporary sibling is renamed over `path`.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn fill<T: Scalar>(config: ModelConfig, r: &mut Reader<'_>) -> Result<Model<T>> {
    let mut model = Model::<T>::new(config)?;
    let count = r.u32()? as usize;
    if count != model.params().specs().len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {count} parameters, config implies {}",
            model.params().specs().len()
        )));
    }
    for i in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = &model.params().specs()[i];
        if spec.name != name || spec.shape != shape {
            return Err(Error::Integrity(format!(
                "parameter {i} is `{name}` {shape:?}, expected `{}` {:?}",
                spec.name, spec.shape
            )));
        }
        let size = T::DTYPE.size();
        let raw = r.take(spec.len() * size)?;
        for (v, chunk) in model
            .params_mut()
            .get_mut(i)
            .iter_mut()
            .zip(raw.chunks_exact(size))
        {
            *v = T::read_le(chunk);
        }
    }
    if !model.params().all_finite() {
        return Err(Error::Integrity(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok(model)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AnyModel> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity(
            "not a checkpoint (bad magic or truncated)".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + 4 {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 12,
    };
    let dtype =
        DType::from_tag(r.u8()?).ok_or_else(|| Error::Integrity("unknown dtype tag".into()))?;
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Integrity(format!("config record: {e}")))?;
    let model = match dtype {
        DType::F32 => AnyModel::F32(fill(config, &mut r)?),
        DType::F64 => AnyModel::F64(fill(config, &mut r)?),
    };
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after parameters".into()));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
