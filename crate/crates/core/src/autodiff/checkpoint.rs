//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "DNASCKPT"
//! version   u32      1
//! count     u32      number of tensors
//! per tensor:
//!   name_len  u32
//!   name      name_len bytes of UTF-8
//!   rank      u32
//!   dims      rank x u32
//!   data      prod(dims) x f32
//! ```
//!
//! All integers and floats are little-endian. Parameter kinds are not stored;
//! loading goes through a store built for the same network, which already
//! knows them.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DNASCKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, _, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a DNASCKPT file".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let at = c.pos as u64;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: at,
                msg: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(c.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let at = c.pos as u64;
        let raw = c.take(
            n.checked_mul(4).ok_or_else(|| Error::Format {
                offset: at,
                msg: "tensor size overflows".into(),
            })?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: at,
            msg: format!("tensor `{name}`: {e}"),
        })?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    Ok(out)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| Error::File {
        path: path.to_owned(),
        msg: e.to_string(),
    })
}

/// Overwrites every tensor of `store` with the checkpoint's values. Names and
/// shapes must match exactly.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = read(path)?;
    apply(store, tensors)
}

pub fn apply<T: Real>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::invalid(format!(
            "checkpoint holds {} tensors, network has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        store.set(&name, t.cast())?;
    }
    Ok(())
}
