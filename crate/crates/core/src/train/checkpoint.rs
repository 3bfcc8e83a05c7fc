//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CDSL" | u32 version = 1 | u32 tensor count | u32 reserved = 0
//! per tensor: u16 name length | UTF-8 name | u8 ndim | ndim × u32 dims | f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamTensor, ParameterStore};

pub const MAGIC: &[u8; 4] = b"CDSL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode(store: &ParameterStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Shape(format!("parameter name too long: {name}")))?;
        let ndim = u8::try_from(t.dims.len())
            .map_err(|_| Error::Shape(format!("{name}: too many dims")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| Error::Shape(format!("{name}: dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated: needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParameterStore<f32>, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic {magic:02x?}, expected \"CDSL\""));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let count = c.u32("tensor count")?;
    let reserved = c.u32("reserved")?;
    if reserved != 0 {
        return Err(format!("reserved header field is {reserved}, expected 0"));
    }
    let mut store = ParameterStore::new();
    for i in 0..count {
        let name_len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(c.take(name_len as usize, "name")?)
            .map_err(|e| format!("tensor {i}: name is not UTF-8: {e}"))?
            .to_string();
        let ndim = c.take(1, "ndim")?[0] as usize;
        let dims = (0..ndim)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("{name}: dims overflow"))?;
        let payload = c.take(
            len.checked_mul(4).ok_or_else(|| format!("{name}: payload overflow"))?,
            &name,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        store
            .insert(name, ParamTensor { dims, data })
            .map_err(|e| e.to_string())?;
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes after last tensor", bytes.len() - c.pos));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore<f32>, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
