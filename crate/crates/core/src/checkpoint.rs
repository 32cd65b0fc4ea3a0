//! `CKPT1` parameter files and their JSON sidecars.
//!
//! Layout (little endian): magic `CKPTV001`, `u32` entry count, then per entry
//! a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` extents and
//! the `f32` payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tensorlab::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"CKPTV001";

pub fn encode_params(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.numel() * 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        let v = p.value();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("checkpoint", format!("name too long: {name}")))?;
        let rank = u8::try_from(v.rank()).map_err(|_| Error::invalid("checkpoint", "rank exceeds 255"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in v.shape() {
            let e = u32::try_from(e).map_err(|_| Error::invalid("checkpoint", "extent exceeds u32"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != CKPT_MAGIC {
        return Err(Error::format(path, "bad magic, expected CKPTV001"));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        store
            .insert(name, Tensor::new(&shape, data)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub module: String,
    pub epoch: usize,
    pub config_hash: String,
    pub rng_state: [u64; 2],
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub sidecar: Sidecar,
}

/// Payload and sidecar paths for a checkpoint stem (`dir/name`).
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("ckpt"), stem.with_extension("json"))
}

impl Checkpoint {
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, side) = paths(stem);
        if let Some(dir) = bin.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&bin, encode_params(&self.params)?).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&self.sidecar)? + "\n";
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, side) = paths(stem);
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let params = decode_params(&bytes, &bin)?;
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        Ok(Self { params, sidecar })
    }

    /// Loads and checks the module tag.
    pub fn load_module(stem: &Path, module: &str) -> Result<Self> {
        let c = Self::load(stem)?;
        if c.sidecar.module != module {
            return Err(Error::format(
                paths(stem).1,
                format!("checkpoint holds `{}`, expected `{module}`", c.sidecar.module),
            ));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensorlab::Rng;

    fn store() -> ParamStore<f32> {
        let mut rng = Rng::new(3);
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::randn(&[2, 3, 1], &mut rng)).unwrap();
        s.insert("a", Tensor::scalar(1.5)).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode_params(&store()).unwrap();
        assert_eq!(&bytes[..8], b"CKPTV001");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 3);
        assert_eq!(&bytes[14..17], b"b.w");
        assert_eq!(bytes[17], 3);
        // 8 + 4 + (2 + 3 + 1 + 12 + 24) + (2 + 1 + 1 + 4 + 4)
        assert_eq!(bytes.len(), 8 + 4 + 42 + 12);
    }

    #[test]
    fn decode_preserves_order_and_bits() {
        let s = store();
        let back = decode_params(&encode_params(&s).unwrap(), Path::new("x")).unwrap();
        assert!(back.same_values(&s));
        let names: Vec<_> = back.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b.w", "a"]);
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let bytes = encode_params(&store()).unwrap();
        assert!(decode_params(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad, Path::new("x")).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_params(&long, Path::new("x")).is_err());
    }
}
