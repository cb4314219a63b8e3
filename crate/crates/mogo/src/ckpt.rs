//! Checkpoint files: a 4-byte kind tag, a length-prefixed UTF-8 header of
//! `key = value` lines (the model config plus training state), then a tensor
//! table. Each tensor record is a length-prefixed name, `u32` rank, `u32`
//! extents and raw `f32` data, all little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use mogo_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{write_file, Reader};

pub const RVQ: &[u8; 4] = b"RVQ1";
pub const HCT: &[u8; 4] = b"HCT1";
pub const EXTRACTOR: &[u8; 4] = b"FEX1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: [u8; 4],
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode_tensors(tensors: &[(String, Tensor)], out: &mut Vec<u8>) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) fn decode_tensors(
    r: &mut Reader<'_>,
) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("tensor name: {e}"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(kind: &[u8; 4]) -> Self {
        Self {
            kind: *kind,
            header: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.kind);
        let header: String = self
            .header
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        encode_tensors(&self.tensors, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        let kind: [u8; 4] = r
            .take(4)
            .map_err(|_| "file too short for a checkpoint tag")?
            .try_into()
            .unwrap();
        if ![RVQ, HCT, EXTRACTOR].contains(&&kind) {
            return Err(format!(
                "unknown checkpoint tag {:?}",
                String::from_utf8_lossy(&kind)
            ));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| format!("header: {e}"))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| format!("header line without ' = ': {line:?}"))?;
            header.insert(k.to_string(), v.to_string());
        }
        let tensors = decode_tensors(&mut r)?;
        if !r.done() {
            return Err(format!("{} trailing bytes", r.buf.len() - r.pos));
        }
        Ok(Self {
            kind,
            header,
            tensors,
        })
    }

    pub fn kind_str(&self) -> String {
        String::from_utf8_lossy(&self.kind).into_owned()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::parse(path, m))
    }

    pub fn load_kind(path: &Path, kind: &[u8; 4]) -> Result<Self> {
        let c = Self::load(path)?;
        if &c.kind != kind {
            return Err(Error::config(format!(
                "{}: expected a {} checkpoint, found {}",
                path.display(),
                String::from_utf8_lossy(kind),
                c.kind_str()
            )));
        }
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Hex SHA-256 of the model content (header and tensors).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

/// Header entries with `prefix.` stripped.
pub fn section(header: &BTreeMap<String, String>, prefix: &str) -> BTreeMap<String, String> {
    let p = format!("{prefix}.");
    header
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}
