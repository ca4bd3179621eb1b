//! Binary weights format.
//!
//! ```text
//! "AVIC"  u32 version (= 1)  u32 tensor count
//! per tensor:
//!   u16 name length, name (UTF-8)
//!   u8 dtype (0 = f32, 1 = f64), u8 rank, rank × u32 dims
//!   little-endian payload
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use avic_tensor::{DType, Scalar, Tensor};

use super::store::ParameterStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVIC";
pub const VERSION: u32 = 1;

pub fn encode_weights<T: Scalar>(store: &ParameterStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.num_elements() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} at byte {}", self.at),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a complete weights file. Nothing is returned unless every byte
/// parses.
pub fn decode_weights<T: Scalar>(bytes: &[u8], path: &Path, label: &str) -> Result<ParameterStore<T>> {
    let corrupt = |detail: String| Error::CorruptWeights {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = r.u32("tensor count")?;
    let mut store = ParameterStore::new(label);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("`{name}`: unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(corrupt(format!("`{name}` is {dtype}, expected {}", T::DTYPE)));
        }
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let size = dtype.size_of();
        let payload = r.take(n * size, "payload")?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("`{name}`: {e}")))?;
        store.insert(name, t)?;
    }
    if r.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(store)
}

pub fn save_weights<T: Scalar>(store: &ParameterStore<T>, path: &Path) -> Result<()> {
    let bytes = encode_weights(store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: &Path, label: &str) -> Result<ParameterStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path, label)
}

/// Loads a file whose names and shapes must match `model` exactly.
pub fn load_into<T: Scalar>(model: &ParameterStore<T>, path: &Path) -> Result<ParameterStore<T>> {
    let loaded = load_weights(path, model.label())?;
    model.check_layout(&loaded)?;
    Ok(loaded)
}
