//! Binary parameter checkpoints.
//!
//! Little-endian layout: magic `HSCK`, u32 version, u64 config hash, u32
//! entry count, then per entry a u32 name length, the UTF-8 name, a u8 dtype
//! tag (0 = f32), u32 rank, `rank` u32 extents and the f32 payload. Entries
//! are written in name order so equal stores give identical bytes.

use std::fs;
use std::path::Path;

use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HSCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub params: ParamStore,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * ck.params.numel() + 32 * ck.params.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.config_hash.to_le_bytes());
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.bytes.len(), format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        let at = (0..4).find(|&i| magic[i] != MAGIC[i]).unwrap_or(0);
        return Err(r.fail(at, format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported checkpoint version {version}")));
    }
    let config_hash = u64::from_le_bytes(r.take(8, "config hash")?.try_into().unwrap());
    let count = r.u32("entry count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| r.fail(start + 4, "name is not UTF-8"))?;
        let at = r.pos;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(r.fail(at, format!("unknown dtype tag {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let at = r.pos;
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| rank > 0 && n > 0)
            .ok_or_else(|| r.fail(at, format!("invalid shape {shape:?} for {name}")))?;
        let at = r.pos;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| r.fail(at, "payload too large"))?, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(r.fail(at + 4 * i, format!("non-finite value in {name}")));
        }
        params
            .insert(name, Tensor::new(&shape, data)?)
            .map_err(|_| r.fail(start, format!("duplicate entry {name}")))?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config_hash, params })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads the entries under `prefix` and checks them against the layout of
/// `reference` (names and shapes).
pub fn load_params(path: &Path, prefix: &str, reference: &ParamStore) -> Result<ParamStore> {
    let ck = load_checkpoint(path)?;
    let params = ck.params.strip_prefix(prefix);
    params.check_layout(reference).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(params)
}
