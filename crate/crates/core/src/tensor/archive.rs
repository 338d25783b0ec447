//! Named-tensor archive.
//!
//! Layout: the five magic bytes `NTAR1`, a little-endian `u64` header length,
//! a UTF-8 JSON header mapping each name to
//! `{"dtype": "f32"|"f64", "shape": [..], "offset": .., "byte_length": ..}`,
//! then the raw little-endian payload. Offsets are relative to the first
//! payload byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

pub const ARCHIVE_MAGIC: &[u8; 5] = b"NTAR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveDtype {
    F32,
    F64,
}

impl ArchiveDtype {
    fn width(self) -> usize {
        match self {
            ArchiveDtype::F32 => 4,
            ArchiveDtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub dtype: ArchiveDtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_length: usize,
}

/// Archive contents keyed by name. `f32` entries are widened to `f64` on
/// read and narrowed again on write, which is lossless for values that came
/// from an `f32` archive.
pub type NamedTensors = BTreeMap<String, (ArchiveDtype, Tensor)>;

pub fn encode_archive(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, (dtype, tensor)) in tensors {
        let offset = payload.len();
        match dtype {
            ArchiveDtype::F64 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArchiveDtype::F32 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        header.insert(
            name.clone(),
            ArchiveEntry {
                dtype: *dtype,
                shape: tensor.shape().to_vec(),
                offset,
                byte_length: payload.len() - offset,
            },
        );
    }
    let header = serde_json::to_vec(&header).map_err(|e| TensorError::Archive(e.to_string()))?;
    let mut out = Vec::with_capacity(5 + 8 + header.len() + payload.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<NamedTensors> {
    let bad = |msg: &str| TensorError::Archive(msg.to_string());
    if bytes.len() < 13 || &bytes[..5] != ARCHIVE_MAGIC {
        return Err(bad("missing NTAR1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let payload_start = 13usize
        .checked_add(header_len)
        .ok_or_else(|| bad("header length overflow"))?;
    if payload_start > bytes.len() {
        return Err(bad("truncated header"));
    }
    let header: BTreeMap<String, ArchiveEntry> = serde_json::from_slice(&bytes[13..payload_start])
        .map_err(|e| TensorError::Archive(e.to_string()))?;
    let payload = &bytes[payload_start..];
    let mut out = NamedTensors::new();
    for (name, entry) in header {
        let numel: usize = entry.shape.iter().product();
        if numel * entry.dtype.width() != entry.byte_length {
            return Err(TensorError::Archive(format!(
                "`{name}`: byte_length {} does not match shape {:?}",
                entry.byte_length, entry.shape
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.byte_length)
            .filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(TensorError::Archive(format!(
                "`{name}`: payload out of bounds"
            )));
        };
        let raw = &payload[entry.offset..end];
        let data: Vec<f64> = match entry.dtype {
            ArchiveDtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            ArchiveDtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
        };
        out.insert(name, (entry.dtype, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}

pub fn write_archive(path: impl AsRef<Path>, tensors: &NamedTensors) -> Result<()> {
    let bytes = encode_archive(tensors)?;
    crate::util::write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<NamedTensors> {
    decode_archive(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), f32s in proptest::collection::vec(any::<f32>(), 1..10)) {
            let mut named = NamedTensors::new();
            named.insert("a.weight".into(), (ArchiveDtype::F64, Tensor::new(vec![values.len()], values.clone()).unwrap()));
            let widened: Vec<f64> = f32s.iter().map(|&v| f64::from(v)).collect();
            named.insert("b".into(), (ArchiveDtype::F32, Tensor::new(vec![1, widened.len()], widened).unwrap()));
            let bytes = encode_archive(&named).unwrap();
            let back = decode_archive(&bytes).unwrap();
            let again = encode_archive(&back).unwrap();
            prop_assert_eq!(bytes, again);
            let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back["a.weight"].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(orig, got);
        }
    }

    #[test]
    fn header_layout() {
        let mut named = NamedTensors::new();
        named.insert(
            "x".into(),
            (
                ArchiveDtype::F64,
                Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
            ),
        );
        let bytes = encode_archive(&named).unwrap();
        assert_eq!(&bytes[..5], b"NTAR1");
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + len]).unwrap();
        assert_eq!(header["x"]["dtype"], "f64");
        assert_eq!(header["x"]["byte_length"], 16);
        assert_eq!(bytes.len(), 13 + len + 16);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(decode_archive(b"NOPE1\0\0\0\0\0\0\0\0").is_err());
    }
}
