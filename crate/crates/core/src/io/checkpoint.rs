//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "MDHC" | u16 version | u32 config length | config text (UTF-8)
//! u32 record count
//! per record: u16 name length | name | u8 rank | u32 extents[rank] | f64 values
//! u64 FNV-1a checksum of every preceding byte
//! ```

use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};

use super::atomic_write;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MDHC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Serializes config and every parameter value to bytes.
pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend_from_slice(&CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = model.config().to_text();
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    b.extend_from_slice(text.as_bytes());
    let entries = model.store().entries();
    b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name `{}` too long", e.name)))?;
        b.extend_from_slice(&len.to_le_bytes());
        b.extend_from_slice(name);
        b.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            b.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
    }
    let sum = checksum(&b);
    b.extend_from_slice(&sum.to_le_bytes());
    Ok(b)
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    atomic_write(path, |f| {
        let mut w = BufWriter::new(f);
        w.write_all(&bytes)?;
        w.flush()
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what,
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Rebuilds the model from the embedded config and overwrites every
/// parameter. Names and shapes must match the rebuilt model exactly.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 4 + 2 + 8 {
        return Err(Error::Truncated {
            what: "checkpoint",
            expected: 14,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u16("checkpoint header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = c.u32("checkpoint config")? as usize;
    let text = std::str::from_utf8(c.take(len, "checkpoint config")?).map_err(|e| Error::Malformed {
        what: "checkpoint config",
        reason: e.to_string(),
    })?;
    let config = ModelConfig::parse(text)?;
    let mut model = Model::<T>::build(&config)?;
    let records = c.u32("checkpoint record count")? as usize;
    if records != model.store().len() {
        return Err(Error::Malformed {
            what: "checkpoint",
            reason: format!("{records} records, model has {} parameters", model.store().len()),
        });
    }
    let mut values = Vec::with_capacity(records);
    for i in 0..records {
        let n = c.u16("parameter name")? as usize;
        let name = std::str::from_utf8(c.take(n, "parameter name")?)
            .map_err(|e| Error::Malformed {
                what: "parameter name",
                reason: e.to_string(),
            })?
            .to_string();
        let rank = c.u8("parameter rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("parameter extents").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let entry = &model.store().entries()[i];
        if entry.name != name || entry.value.shape() != shape.as_slice() {
            return Err(Error::Malformed {
                what: "checkpoint record",
                reason: format!(
                    "record {i} is `{name}` {shape:?}, model expects `{}` {:?}",
                    entry.name,
                    entry.value.shape()
                ),
            });
        }
        let count: usize = shape.iter().product();
        let raw = c.take(count * 8, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        values.push(Tensor::new(&shape, data)?);
    }
    if c.pos != body.len() {
        return Err(Error::Malformed {
            what: "checkpoint",
            reason: format!("{} trailing bytes", body.len() - c.pos),
        });
    }
    for (e, v) in model.store_mut().entries_mut().iter_mut().zip(values) {
        e.value = v;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
