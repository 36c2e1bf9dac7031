//! The `.luqc` container: models, calibration sets and quantized outputs.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic "LUQC" (4) | version u32 | header_len u64 | header (UTF-8 JSON) | blob
//! ```
//!
//! The header is `{"version", "kind", "tensors", "config"}`; every tensor
//! record points at a `[offset, offset + nbytes)` window of the blob.

mod manifest;
mod synth;

pub use manifest::{CalibHeader, LayerEntry, ModelConfig, ModelManifest, QuantParams, QuantTag};
pub use synth::{synth_layer_stack, synth_stack, SynthSpec};

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LuqError, Result};

pub const MAGIC: &[u8; 4] = b"LUQC";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U32,
    /// Two 4-bit codes per byte, low nibble first.
    Packed4,
    /// One bit per element, row-major, LSB first, padded to a whole byte.
    PackedBin,
}

impl DType {
    /// Payload length for `numel` elements.
    pub fn payload_len(self, numel: usize) -> usize {
        match self {
            DType::F32 | DType::U32 => numel * 4,
            DType::Packed4 => numel.div_ceil(2),
            DType::PackedBin => numel.div_ceil(8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Model,
    Calib,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl TensorRecord {
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ContainerKind,
    tensors: Vec<TensorRecord>,
    config: serde_json::Value,
}

/// A validated container held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub config: serde_json::Value,
    records: Vec<TensorRecord>,
    blob: Vec<u8>,
}

impl Container {
    pub fn new(kind: ContainerKind, config: serde_json::Value) -> Self {
        Self { kind, config, records: Vec::new(), blob: Vec::new() }
    }

    /// Assemble a container from explicit records and blob, checking every
    /// record invariant.
    pub fn from_parts(
        kind: ContainerKind,
        config: serde_json::Value,
        records: Vec<TensorRecord>,
        blob: Vec<u8>,
    ) -> Result<Self> {
        validate_records(&records, blob.len())?;
        Ok(Self { kind, config, records, blob })
    }

    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.record(name).is_some()
    }

    /// Append a tensor at the end of the blob.
    pub fn push(&mut self, name: &str, dtype: DType, shape: &[usize], bytes: Vec<u8>) -> Result<()> {
        if self.contains(name) {
            return Err(LuqError::DuplicateTensor(name.to_string()));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| mismatch(name, "shape product overflows"))?;
        let expected = dtype.payload_len(numel);
        if bytes.len() != expected {
            return Err(mismatch(
                name,
                format!("{} payload bytes, {dtype:?} {shape:?} needs {expected}", bytes.len()),
            ));
        }
        self.records.push(TensorRecord {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset: self.blob.len() as u64,
            nbytes: bytes.len() as u64,
        });
        self.blob.extend_from_slice(&bytes);
        Ok(())
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::F32, shape, bytes)
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], values: &[u32]) -> Result<()> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::U32, shape, bytes)
    }

    pub fn payload(&self, name: &str) -> Result<&[u8]> {
        let r = self.record(name).ok_or_else(|| LuqError::MissingTensor(name.to_string()))?;
        let start = r.offset as usize;
        Ok(&self.blob[start..start + r.nbytes as usize])
    }

    fn typed(&self, name: &str, dtype: DType) -> Result<(&TensorRecord, &[u8])> {
        let r = self.record(name).ok_or_else(|| LuqError::MissingTensor(name.to_string()))?;
        if r.dtype != dtype {
            return Err(mismatch(name, format!("expected {dtype:?}, found {:?}", r.dtype)));
        }
        Ok((r, self.payload(name)?))
    }

    pub fn f32s(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (r, bytes) = self.typed(name, DType::F32)?;
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((r.shape.clone(), vals))
    }

    pub fn u32s(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let (r, bytes) = self.typed(name, DType::U32)?;
        let vals = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((r.shape.clone(), vals))
    }

    pub fn packed(&self, name: &str, dtype: DType) -> Result<(Vec<usize>, Vec<u8>)> {
        let (r, bytes) = self.typed(name, dtype)?;
        Ok((r.shape.clone(), bytes.to_vec()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind,
            tensors: self.records.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(LuqError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(LuqError::Truncated("stream ends inside the preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(LuqError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = (bytes.len() - PREAMBLE) as u64;
        if header_len > rest {
            return Err(LuqError::Truncated(format!(
                "header declares {header_len} bytes, {rest} available"
            )));
        }
        let header_end = PREAMBLE + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| LuqError::Header(e.to_string()))?;
        if header.version != version {
            return Err(LuqError::VersionMismatch { found: header.version, expected: version });
        }
        Container::from_parts(
            header.kind,
            header.config,
            header.tensors,
            bytes[header_end..].to_vec(),
        )
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| LuqError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| LuqError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn mismatch(name: &str, reason: impl Into<String>) -> LuqError {
    LuqError::TensorMismatch { name: name.to_string(), reason: reason.into() }
}

fn validate_records(records: &[TensorRecord], blob_len: usize) -> Result<()> {
    let mut names = HashSet::new();
    for r in records {
        if !names.insert(r.name.as_str()) {
            return Err(LuqError::DuplicateTensor(r.name.clone()));
        }
        let numel = r.numel().ok_or_else(|| mismatch(&r.name, "shape product overflows"))?;
        let expected = r.dtype.payload_len(numel) as u64;
        if r.nbytes != expected {
            return Err(mismatch(
                &r.name,
                format!("nbytes {} but {:?} {:?} needs {expected}", r.nbytes, r.dtype, r.shape),
            ));
        }
        let end = r
            .offset
            .checked_add(r.nbytes)
            .ok_or_else(|| mismatch(&r.name, "offset overflows"))?;
        if end > blob_len as u64 {
            return Err(LuqError::Truncated(format!(
                "tensor `{}` ends at byte {end}, blob has {blob_len}",
                r.name
            )));
        }
    }
    let mut spans: Vec<&TensorRecord> = records.iter().filter(|r| r.nbytes > 0).collect();
    spans.sort_by_key(|r| r.offset);
    for pair in spans.windows(2) {
        if pair[0].offset + pair[0].nbytes > pair[1].offset {
            return Err(LuqError::Overlap(pair[0].name.clone(), pair[1].name.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(ContainerKind::Model, json!({"note": "x"}));
        c.push_f32("w", &[2, 2], &[1.0, -2.0, 3.5, 0.0]).unwrap();
        c.push_u32("ids", &[3], &[7, 8, 9]).unwrap();
        c.push("codes", DType::Packed4, &[3], vec![0x21, 0x03]).unwrap();
        c
    }

    #[test]
    fn round_trip_is_identity() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.f32s("w").unwrap().1, vec![1.0, -2.0, 3.5, 0.0]);
    }

    #[test]
    fn empty_tensor_is_accepted() {
        let mut c = Container::new(ContainerKind::Calib, json!({}));
        c.push_f32("none", &[0, 16], &[]).unwrap();
        assert_eq!(c.record("none").unwrap().nbytes, 0);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.f32s("none").unwrap().1.len(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        let err = c.push_f32("w", &[1], &[0.0]).unwrap_err();
        assert!(matches!(err, LuqError::DuplicateTensor(_)));
    }

    #[test]
    fn wrong_payload_length_rejected() {
        let mut c = Container::new(ContainerKind::Model, json!({}));
        assert!(c.push("b", DType::PackedBin, &[9], vec![0]).is_err());
        assert!(c.push("b", DType::PackedBin, &[9], vec![0, 1]).is_ok());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "not a LUQC container");
    }

    #[test]
    fn truncated_blob() {
        let bytes = sample().to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().starts_with("truncated payload"), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes).unwrap_err(),
            LuqError::VersionMismatch { found: 9, .. }
        ));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let bytes = sample().to_bytes();
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[PREAMBLE..PREAMBLE + hl].to_vec()).unwrap();
        let patched = header.replace("\"packed4\"", "\"packed3\"");
        let mut out = bytes[..PREAMBLE].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[PREAMBLE + hl..]);
        assert!(matches!(Container::from_bytes(&out).unwrap_err(), LuqError::Header(_)));
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let records = vec![
            TensorRecord { name: "a".into(), dtype: DType::F32, shape: vec![2], offset: 0, nbytes: 8 },
            TensorRecord { name: "b".into(), dtype: DType::F32, shape: vec![2], offset: 4, nbytes: 8 },
        ];
        let err = Container::from_parts(ContainerKind::Model, json!({}), records, vec![0; 12]);
        assert!(matches!(err.unwrap_err(), LuqError::Overlap(..)));
    }
}
