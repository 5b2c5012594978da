//! Binary tensor container shared by checkpoints and inversion bundles.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of JSON
//! header, then every tensor's f32 values little-endian in header order.
//! Offsets in the header are byte offsets from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub schedule: ScheduleParams,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded container.
#[derive(Debug, Clone)]
pub struct Stored {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Stored {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }
}

pub fn encode(
    kind: &str,
    schedule: ScheduleParams,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        schedule,
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8], expect_kind: &str) -> Result<Stored> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("truncated header length".into()))?;
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Format("header length overflow".into()))?;
    let json = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    if header.kind != expect_kind {
        return Err(Error::Format(format!(
            "expected a {expect_kind} file, found {}",
            header.kind
        )));
    }
    let payload = &bytes[8 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0usize;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(Error::Format(format!("tensor {} has offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        let raw = payload
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Format(format!("payload truncated in {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        expected_offset += 4 * n;
    }
    if expected_offset != payload.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(Stored { header, tensors })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read(path: &Path, expect_kind: &str) -> Result<Stored> {
    decode(&fs::read(path)?, expect_kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_preserves_tensors() {
        let a = Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::new(&[3], vec![7.0, 8.0, 9.0]).unwrap();
        let bytes = encode(
            "test",
            ScheduleParams::default(),
            serde_json::json!({"k": 1}),
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap();
        let s = decode(&bytes, "test").unwrap();
        assert_eq!(s.get("a").unwrap(), &a);
        assert_eq!(s.get("b").unwrap(), &b);
        assert_eq!(s.header.tensors[1].offset, 16);
        assert!(decode(&bytes, "other").is_err());
        assert!(decode(&bytes[..bytes.len() - 1], "test").is_err());
    }
}
