//! VBPM container.
//!
//! ```text
//! "VBPM1\n" | u64 LE manifest length | manifest JSON | zero pad to 64
//! | tensor blobs (f32 LE), each starting on a 64-byte boundary
//! ```
//!
//! Manifest: `{"spec": ModelSpec, "tensors": [{name, shape, offset, nbytes}]}`
//! with `offset` relative to the start of the (64-aligned) blob section and
//! tensors listed in canonical layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, WeightStore};
use crate::error::{FormatError, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 6] = b"VBPM1\n";
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode_model(spec: &ModelSpec, weights: &WeightStore) -> Result<Vec<u8>> {
    weights.validate(spec)?;
    let layout = spec.param_layout();
    let mut entries = Vec::with_capacity(layout.len());
    let mut offset = 0usize;
    for (name, shape) in &layout {
        let nbytes = weights.get(name)?.numel() * 4;
        entries.push(Entry {
            name: name.clone(),
            shape: shape.clone(),
            offset: offset as u64,
            nbytes: nbytes as u64,
        });
        offset = align_up(offset + nbytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        spec: spec.clone(),
        tensors: entries,
    })?;
    let data_start = align_up(MODEL_MAGIC.len() + 8 + manifest.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.resize(data_start, 0);
    for (name, _) in &layout {
        for v in weights.get(name)?.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(align_up(out.len() - data_start) + data_start, 0);
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelSpec, WeightStore)> {
    let head = &bytes[..bytes.len().min(MODEL_MAGIC.len())];
    if head != MODEL_MAGIC {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(MODEL_MAGIC).into(),
            found: String::from_utf8_lossy(head).into(),
        }
        .into());
    }
    let need = |needed: usize| -> Result<()> {
        if bytes.len() < needed {
            Err(FormatError::Truncated {
                needed: needed as u64,
                available: bytes.len() as u64,
            }
            .into())
        } else {
            Ok(())
        }
    };
    let len_at = MODEL_MAGIC.len();
    need(len_at + 8)?;
    let manifest_len = u64::from_le_bytes(bytes[len_at..len_at + 8].try_into().unwrap()) as usize;
    let manifest_end = (len_at + 8)
        .checked_add(manifest_len)
        .ok_or_else(|| FormatError::Manifest("manifest length overflows".into()))?;
    need(manifest_end)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[len_at + 8..manifest_end])
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    let spec = manifest.spec;
    spec.validate()
        .map_err(|e| FormatError::Manifest(format!("invalid spec: {e}")))?;

    let layout = spec.param_layout();
    if layout.len() != manifest.tensors.len() {
        return Err(FormatError::Manifest(format!(
            "spec implies {} tensors, manifest lists {}",
            layout.len(),
            manifest.tensors.len()
        ))
        .into());
    }
    let data_start = align_up(manifest_end);
    let mut weights = WeightStore::new();
    for ((name, shape), entry) in layout.iter().zip(&manifest.tensors) {
        if &entry.name != name {
            return Err(FormatError::Manifest(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            ))
            .into());
        }
        if &entry.shape != shape {
            return Err(FormatError::ShapeDisagreement {
                name: name.clone(),
                detail: format!("manifest shape {:?}, spec requires {shape:?}", entry.shape),
            }
            .into());
        }
        let numel: usize = shape.iter().product();
        if entry.nbytes != 4 * numel as u64 {
            return Err(FormatError::ShapeDisagreement {
                name: name.clone(),
                detail: format!("{} bytes for {numel} f32 values", entry.nbytes),
            }
            .into());
        }
        if entry.offset as usize % ALIGN != 0 {
            return Err(FormatError::Manifest(format!("tensor `{name}` offset is not 64-byte aligned")).into());
        }
        let start = data_start + entry.offset as usize;
        let end = start + entry.nbytes as usize;
        need(end)?;
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.insert(name.clone(), Tensor::new(shape.clone(), data)?);
    }
    Ok((spec, weights))
}

pub fn save_model(spec: &ModelSpec, weights: &WeightStore, path: impl AsRef<Path>) -> Result<String> {
    let bytes = encode_model(spec, weights)?;
    fsutil::write_atomic(path.as_ref(), &bytes)?;
    Ok(fsutil::fingerprint(&bytes))
}

/// Loads a model and returns it with the fingerprint of the file bytes.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelSpec, WeightStore, String)> {
    let bytes = std::fs::read(path.as_ref())?;
    let (spec, weights) = decode_model(&bytes)?;
    Ok((spec, weights, fsutil::fingerprint(&bytes)))
}

/// Fingerprint of the model's canonical serialization.
pub fn model_fingerprint(spec: &ModelSpec, weights: &WeightStore) -> Result<String> {
    Ok(fsutil::fingerprint(&encode_model(spec, weights)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::VbpError;
    use crate::model::{init_weights, InitKind};

    fn bits(w: &WeightStore) -> Vec<(String, Vec<u32>)> {
        w.iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let spec = ModelSpec::deit_tiny();
        let mut weights = init_weights(&spec, InitKind::default(), 1).unwrap();
        // include awkward values
        weights.get_mut("head.b").unwrap().data_mut()[..3].copy_from_slice(&[-0.0, f32::MIN_POSITIVE / 2.0, 1e38]);
        let bytes = encode_model(&spec, &weights).unwrap();
        let (spec2, weights2) = decode_model(&bytes).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(bits(&weights), bits(&weights2));
        assert_eq!(encode_model(&spec2, &weights2).unwrap(), bytes);
    }

    #[test]
    fn blobs_are_64_byte_aligned() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::default(), 1).unwrap();
        let bytes = encode_model(&spec, &weights).unwrap();
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[14..14 + len]).unwrap();
        let start = align_up(14 + len);
        assert_eq!(start % 64, 0);
        for e in &manifest.tensors {
            assert_eq!((start + e.offset as usize) % 64, 0);
        }
        // first value of the first tensor sits at the data start
        let first = &manifest.tensors[0];
        let v = f32::from_le_bytes(bytes[start..start + 4].try_into().unwrap());
        assert_eq!(v, weights.get(&first.name).unwrap().data()[0]);
    }

    #[test]
    fn wrong_magic() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::Zeros, 1).unwrap();
        let mut bytes = encode_model(&spec, &weights).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(VbpError::Format(FormatError::Magic { .. }))));
        assert!(matches!(decode_model(b"VB"), Err(VbpError::Format(FormatError::Magic { .. }))));
    }

    #[test]
    fn truncated_blob() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::Zeros, 1).unwrap();
        let bytes = encode_model(&spec, &weights).unwrap();
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(decode_model(cut), Err(VbpError::Format(FormatError::Truncated { .. }))));
        assert!(matches!(decode_model(&bytes[..10]), Err(VbpError::Format(FormatError::Truncated { .. }))));
    }

    #[test]
    fn corrupted_manifest_shape() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::Zeros, 1).unwrap();
        let bytes = encode_model(&spec, &weights).unwrap();
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[14..14 + len].to_vec()).unwrap();
        // head.b is [4]; claim [5] with the same byte length of the JSON text
        let needle = r#""name":"head.b","shape":[4]"#;
        assert!(text.contains(needle));
        let patched = text.replace(needle, r#""name":"head.b","shape":[5]"#);
        let mut corrupted = bytes.clone();
        corrupted[14..14 + len].copy_from_slice(patched.as_bytes());
        assert!(matches!(
            decode_model(&corrupted),
            Err(VbpError::Format(FormatError::ShapeDisagreement { .. }))
        ));
    }
}
