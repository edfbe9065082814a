//! PWC1 checkpoint files.
//!
//! Layout: magic `PWC1`, u64 LE header length, UTF-8 JSON header
//! `{"config": {...}, "tensors": {name: {"shape": [..], "offset": u64, "len": u64}}}`,
//! then little-endian `f32` data, row-major. `offset` is in bytes from the end
//! of the header, `len` counts elements. Tensors are written in sorted-name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::matrix_for_shape;
use super::{Checkpoint, ModelError, TransformerConfig};
use crate::container;

pub const MAGIC: &[u8; 4] = b"PWC1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let expected = super::expected_shapes(ckpt.config());
    let mut payload = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, m) in ckpt.tensors() {
        let offset = payload.len() as u64;
        container::f32s_to_le(m.data(), &mut payload);
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: expected[name].clone(),
                offset,
                len: m.data().len() as u64,
            },
        );
    }
    let header = Header {
        config: ckpt.config().clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint<P: AsRef<Path>>(ckpt: &Checkpoint, path: P) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(ckpt))?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let (header, payload) = container::parse(bytes, MAGIC)?;
    let header: Header =
        serde_json::from_value(header).map_err(|e| ModelError::Format(e.to_string()))?;
    header.config.validate()?;
    let expected = super::expected_shapes(&header.config);
    for name in expected.keys() {
        if !header.tensors.contains_key(name) {
            return Err(ModelError::MissingTensor(name.clone()));
        }
    }
    let mut tensors = BTreeMap::new();
    for (name, entry) in &header.tensors {
        let shape = expected
            .get(name)
            .ok_or_else(|| ModelError::UnexpectedTensor(name.clone()))?;
        if &entry.shape != shape {
            return Err(ModelError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let count: usize = shape.iter().product();
        if entry.len != count as u64 {
            return Err(ModelError::Format(format!(
                "tensor {name} declares len {} but shape {:?} needs {count}",
                entry.len, shape
            )));
        }
        let raw = container::slice(&payload, entry.offset, entry.len, 4, name)?;
        let m = matrix_for_shape(shape, container::le_to_f32s(raw))?;
        tensors.insert(name.clone(), m);
    }
    Checkpoint::new(header.config, tensors)
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample() -> Checkpoint {
        init_model(&TransformerConfig::new(1, 4, 2, 8, 10, 6), 9).unwrap()
    }

    fn rewrite_header(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let (mut header, payload) = container::parse(bytes, MAGIC).unwrap();
        f(&mut header);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&payload);
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = from_bytes(&to_bytes(&ck)).unwrap();
        assert_eq!(ck, back);
        assert_eq!(to_bytes(&back), to_bytes(&ck));
    }

    #[test]
    fn wrong_len_rejected() {
        let bytes = rewrite_header(&to_bytes(&sample()), |h| {
            h["tensors"]["L0.ff.W1"]["len"] = serde_json::json!(3);
        });
        assert!(matches!(from_bytes(&bytes), Err(ModelError::Format(_))));
    }

    #[test]
    fn missing_tensor_named() {
        let bytes = rewrite_header(&to_bytes(&sample()), |h| {
            h["tensors"].as_object_mut().unwrap().remove("mlm.ln.g");
        });
        match from_bytes(&bytes) {
            Err(ModelError::MissingTensor(n)) => assert_eq!(n, "mlm.ln.g"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_data_rejected() {
        let bytes = to_bytes(&sample());
        let cut = &bytes[..bytes.len() - 5];
        assert!(from_bytes(cut).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bytes = rewrite_header(&to_bytes(&sample()), |h| {
            h["tensors"]["L0.ff.W1"]["shape"] = serde_json::json!([4, 8]);
        });
        assert!(matches!(
            from_bytes(&bytes),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reader_accepts_any_order() {
        // Reverse the physical order of tensors in the payload.
        let ck = sample();
        let mut payload = Vec::new();
        let mut entries = serde_json::Map::new();
        let expected = crate::model::expected_shapes(ck.config());
        for (name, m) in ck.tensors().iter().rev() {
            let offset = payload.len();
            container::f32s_to_le(m.data(), &mut payload);
            entries.insert(
                name.clone(),
                serde_json::json!({"shape": expected[name], "offset": offset, "len": m.data().len()}),
            );
        }
        let header = serde_json::json!({"config": ck.config(), "tensors": entries});
        let h = serde_json::to_vec(&header).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(h.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&h);
        bytes.extend_from_slice(&payload);
        assert_eq!(from_bytes(&bytes).unwrap(), ck);
    }
}
