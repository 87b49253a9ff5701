//! Versioned binary container for model and training state.
//!
//! Layout, little-endian throughout: magic `MMTC`, `u32` version, `u32`
//! header length, UTF-8 `key=value` lines, `u32` blob count, then per blob
//! `u32` name length, name, `u32` rank, `u32` dims, `f64` data. A CRC-32 of
//! everything before it closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{MmtError, Result};
use crate::model::{Mmt, MmtConfig};

pub const CKPT_MAGIC: &[u8; 4] = b"MMTC";
pub const CKPT_VERSION: u32 = 1;

/// Blob-name prefix of generator parameters.
pub const GEN_PREFIX: &str = "gen/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub blobs: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MmtError::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("ran out of bytes reading {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn format(&self, detail: impl Into<String>) -> MmtError {
        MmtError::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| MmtError::invalid(format!("checkpoint header lacks {key:?}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| MmtError::invalid(format!("checkpoint header {key}={raw:?} does not parse")))
    }

    /// Appends every parameter of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.blobs.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Blobs under `prefix`, with the prefix stripped.
    pub fn take_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.blobs
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(MmtError::invalid(format!("header entry {k:?}={v:?} cannot be stored")));
            }
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut out, CKPT_VERSION as usize);
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.blobs.len());
        for (name, t) in &self.blobs {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
            return Err(MmtError::BadMagic {
                path: path.to_path_buf(),
                expected: "MMTC".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        if bytes.len() < 12 {
            return Err(MmtError::Truncated {
                path: path.to_path_buf(),
                detail: format!("{} bytes is shorter than the fixed header", bytes.len()),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let mut r = Reader { bytes: body, pos: 4, path };
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(r.format(format!("unsupported version {version}")));
        }
        if stored != computed {
            return Err(MmtError::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let hlen = r.u32("header length")? as usize;
        let text = std::str::from_utf8(r.take(hlen, "header")?).map_err(|_| r.format("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.format(format!("header line {line:?} lacks '='")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("blob count")? as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32("blob name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "blob name")?)
                .map_err(|_| r.format("blob name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| r.format(format!("blob {name} has overflowing shape {shape:?}")))?;
            let data = r
                .take(n, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(r.format(format!("{} unread bytes before the checksum", body.len() - r.pos)));
        }
        Ok(Self { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| MmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MmtError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// A checkpoint holding just the generator and its configuration.
pub fn model_checkpoint(model: &Mmt) -> Checkpoint {
    let mut ck = Checkpoint {
        header: model.config.to_header(),
        blobs: Vec::new(),
    };
    ck.set("kind", "model");
    ck.push_store(GEN_PREFIX, &model.params);
    ck
}

/// Rebuilds the generator from any checkpoint that carries one.
pub fn load_model(ck: &Checkpoint) -> Result<Mmt> {
    let config = MmtConfig::from_header(&ck.header)?;
    let mut model = Mmt::new(config, 0)?;
    model.params.load_named(ck.take_prefix(GEN_PREFIX))?;
    Ok(model)
}
