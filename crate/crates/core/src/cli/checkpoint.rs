//! Binary checkpoint: model config plus every named tensor, little-endian,
//! closed by a CRC-64/XZ of all preceding bytes.
//!
//! ```text
//! "AXSG" | u32 version | u32 len, config text (key=value lines) | u32 count
//! count x { u32 len, name | u8 dtype | u8 rank | rank x u64 dim | raw scalars }
//! u64 checksum
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"AXSG";
pub const VERSION: u32 = 1;

const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC.checksum(bytes)
}

pub fn config_text(config: &ModelConfig) -> String {
    config.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(model.config());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

/// Parses the config block of a checkpoint without touching the tensors.
pub fn decode_config(bytes: &[u8]) -> Result<ModelConfig> {
    let body = verified_body(bytes)?;
    let mut r = Reader { bytes: body, pos: 0 };
    read_header(&mut r)
}

fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!("file of {} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = checksum(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch (stored {stored:016x}, computed {actual:016x})"
        )));
    }
    Ok(body)
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string()?;
    let mut config = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line {line:?}")))?;
        if !config.set(k.trim(), v.trim())? {
            return Err(Error::Checkpoint(format!("unknown config key `{k}`")));
        }
    }
    config.validate()?;
    Ok(config)
}

/// Rebuilds the model described by the checkpoint and loads every tensor.
/// The stored dtype must match `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let body = verified_body(bytes)?;
    let mut r = Reader { bytes: body, pos: 0 };
    let config = read_header(&mut r)?;
    let mut model = Model::<T>::new(&config)?;
    let count = r.u32()? as usize;
    let mut seen = HashSet::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "`{name}` is stored as {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("tensor `{name}` appears twice")));
        }
        let expected = model.params.value(id).shape().to_vec();
        if shape != expected {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, config implies {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        model.params.get_mut(id).value = Tensor::new(shape, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    if let Some((_, p)) = model.params.iter().find(|(_, p)| !seen.contains(&p.name)) {
        return Err(Error::Checkpoint(format!("missing tensor `{}`", p.name)));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
