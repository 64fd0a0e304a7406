//! Binary checkpoint format (all integers and reals little-endian):
//!
//! ```text
//! magic   8 bytes  "DSACKPT\0"
//! version u32
//! count   u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data f64 × Π dims }
//! ```

use std::fs;
use std::path::Path;

use dsa_core::Tensor;

use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"DSACKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("parameter name: {e}"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
        let raw = r.take(n.checked_mul(8).ok_or("shape overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
        if store.contains(&name) {
            return Err(format!("duplicate parameter `{name}`"));
        }
        store.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(store)
}

fn ckpt_err(path: &Path, msg: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

pub fn save(path: &Path, model: &Detector) -> Result<()> {
    fs::write(path, encode(model.params())).map_err(|e| ckpt_err(path, e))
}

/// Loads parameters and checks them against a model built from `cfg`.
pub fn load(path: &Path, cfg: DetectorConfig, seed: u64) -> Result<Detector> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e))?;
    let params = decode(&bytes).map_err(|e| ckpt_err(path, e))?;
    Detector::from_params(cfg, seed, params).map_err(|e| ckpt_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_detected() {
        let model = Detector::new(DetectorConfig::default(), 1).unwrap();
        let bytes = encode(model.params());
        assert_eq!(decode(&bytes).unwrap(), *model.params());
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err(), "bad magic");
    }
}
