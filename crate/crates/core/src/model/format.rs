//! `.ccur` model files.
//!
//! ```text
//! "CCUR" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON
//!        | f32 LE parameter blobs in header order | CRC32 LE of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{Model, ModelError, ModelMetadata, ModelSpec};

pub const MAGIC: &[u8; 4] = b"CCUR";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 4 + 4 + 8;
const CRC_LEN: usize = 4;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    class_keys: Vec<String>,
    metadata: ModelMetadata,
    tensors: Vec<TensorEntry>,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>, ModelError> {
    let tensors = model.tensors();
    let header = Header {
        spec: model.spec().clone(),
        class_keys: model.class_keys().to_vec(),
        metadata: model.metadata.clone(),
        tensors: tensors.iter().map(|(name, t)| TensorEntry { name: name.clone(), shape: t.dims().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Header(e.to_string()))?;
    let blob_len: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blob_len + CRC_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn truncated(expected: usize, actual: usize) -> ModelError {
    ModelError::Truncated { expected: expected as u64, actual: actual as u64 }
}

/// Parse a complete `.ccur` byte image. Checks run in order: magic,
/// version, length, checksum, header, then tensor shapes against the layer spec.
pub fn decode_model(bytes: &[u8]) -> Result<Model, ModelError> {
    let magic = &bytes[..bytes.len().min(4)];
    if magic != &MAGIC[..magic.len()] {
        return Err(ModelError::BadMagic(magic.to_vec()));
    }
    if bytes.len() < PREAMBLE + CRC_LEN {
        return Err(truncated(PREAMBLE + CRC_LEN, bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREAMBLE))
        .filter(|&end| end.saturating_add(CRC_LEN) <= bytes.len())
        .ok_or_else(|| ModelError::Truncated {
            expected: header_len.saturating_add((PREAMBLE + CRC_LEN) as u64),
            actual: bytes.len() as u64,
        })?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| ModelError::Header(e.to_string()))?;

    let mut blob_len = 0usize;
    for entry in &header.tensors {
        let n = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ModelError::Header(format!("tensor '{}' is too large", entry.name)))?;
        blob_len = blob_len.checked_add(n).ok_or_else(|| ModelError::Header("parameter blob is too large".into()))?;
    }
    let expected = header_end.saturating_add(blob_len).saturating_add(CRC_LEN);
    if bytes.len() < expected {
        return Err(truncated(expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(ModelError::Header(format!("{} trailing bytes after checksum", bytes.len() - expected)));
    }
    let body = &bytes[..expected - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[expected - CRC_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::ChecksumMismatch { stored, computed });
    }

    let shapes = header.spec.infer_shapes()?;
    let wanted: Vec<&Vec<usize>> = shapes.iter().flat_map(|s| s.params.iter()).collect();
    if wanted.len() != header.tensors.len() {
        return Err(ModelError::Header(format!(
            "spec needs {} tensors, header lists {}",
            wanted.len(),
            header.tensors.len()
        )));
    }
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (entry, want) in header.tensors.iter().zip(wanted) {
        if &entry.shape != want {
            return Err(ModelError::ShapeMismatch {
                name: entry.name.clone(),
                expected: want.clone(),
                found: entry.shape.clone(),
            });
        }
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        tensors.push(Tensor::from_vec(entry.shape.clone(), data)?);
    }
    Model::from_parts(header.spec, header.class_keys, header.metadata, tensors)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelSpec};

    fn small() -> Model {
        let spec = ModelSpec {
            name: "small".into(),
            input: [4, 4, 3],
            layers: vec![LayerSpec::conv(2), LayerSpec::Maxpool2x2, LayerSpec::Flatten, LayerSpec::output()],
        };
        Model::init(spec, 12).unwrap()
    }

    fn reseal(bytes: &mut [u8]) {
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
    }

    #[test]
    fn layout() {
        let bytes = encode_model(&small()).unwrap();
        assert_eq!(&bytes[..4], b"CCUR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["class_keys"][3], "fresh_carrot");
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([2, 3, 3, 3]));
        // 2*27 + 2 conv values, 8*4 + 4 dense values.
        assert_eq!(bytes.len(), 16 + hl + 4 * (54 + 2 + 32 + 4) + 4);
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(stored, crc32fast::hash(&bytes[..bytes.len() - 4]));
    }

    #[test]
    fn round_trip_and_distinct_errors() {
        let model = small();
        let bytes = encode_model(&model).unwrap();
        assert_eq!(decode_model(&bytes).unwrap(), model);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_model(&bad), Err(ModelError::BadMagic(_))));

        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(decode_model(short), Err(ModelError::Truncated { .. })));
        assert!(matches!(decode_model(&bytes[..10]), Err(ModelError::Truncated { .. })));
        assert!(matches!(decode_model(b""), Err(ModelError::Truncated { .. })));

        let mut flipped = bytes.clone();
        let at = bytes.len() - 8;
        flipped[at] ^= 0x40;
        assert!(matches!(decode_model(&flipped), Err(ModelError::ChecksumMismatch { .. })));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        reseal(&mut v2);
        assert!(matches!(decode_model(&v2), Err(ModelError::UnsupportedVersion { found: 2, .. })));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(ModelError::Header(_))));
    }

    #[test]
    fn header_shape_disagreement() {
        let bytes = encode_model(&small()).unwrap();
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + hl]).unwrap();
        // Same element count, different layout.
        let edited = json.replacen("[2,3,3,3]", "[3,3,3,2]", 1);
        assert_ne!(edited, json);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[16 + hl..]);
        reseal(&mut out);
        assert!(matches!(decode_model(&out), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ccur");
        let model = small();
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
        assert!(matches!(load_model(&dir.path().join("missing.ccur")), Err(ModelError::Io { .. })));
    }
}
