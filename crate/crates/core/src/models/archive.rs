//! Single-file tensor archives (safetensors) with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::sha256_hex;

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: IndexMap<String, ArrayD<f32>>,
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// SHA-256 over tensor names, shapes and little-endian bytes, in name order.
pub fn weights_digest<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a ArrayD<f32>)>) -> String {
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut buf = Vec::new();
    for (name, t) in sorted {
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(format!("{:?}", t.shape()).as_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&buf)
}

pub fn encode(metadata: &BTreeMap<String, String>, tensors: &[(String, &ArrayD<f32>)]) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let data: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), t.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| Ok((name.clone(), TensorView::new(Dtype::F32, shape.clone(), data).map_err(|e| Error::Checkpoint(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    let raw = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    canonical_header(raw)
}

/// Rewrites the JSON header with sorted keys so equal contents give equal
/// bytes. Data offsets are relative to the end of the header and stay valid.
fn canonical_header(raw: Vec<u8>) -> Result<Vec<u8>> {
    let bad = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("header: {e}"));
    let len = u64::from_le_bytes(raw[..8].try_into().map_err(|e| bad(&e))?) as usize;
    let header: serde_json::Value = serde_json::from_slice(&raw[8..8 + len]).map_err(|e| bad(&e))?;
    let mut json = serde_json::to_vec(&header).map_err(|e| bad(&e))?;
    json.resize(json.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + json.len() + raw.len() - 8 - len);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&raw[8 + len..]);
    Ok(out)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, metadata: &BTreeMap<String, String>, tensors: &[(String, &ArrayD<f32>)]) -> Result<()> {
    write_atomic(path, &encode(metadata, tensors)?)
}

pub fn read(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => ckpt_err(path, msg),
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata: BTreeMap<String, String> = meta.metadata().clone().unwrap_or_default().into_iter().collect();
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut names: Vec<String> = st.names().into_iter().map(str::to_string).collect();
    names.sort();
    let mut tensors = IndexMap::new();
    for name in names {
        let view = st.tensor(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor {name} has dtype {:?}, expected F32", view.dtype())));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.insert(name, arr);
    }
    Ok(Archive { metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f32 * 0.1 - 0.7);
        let b = ArrayD::from_elem(IxDyn(&[]), f32::MIN_POSITIVE);
        let mut meta = BTreeMap::new();
        meta.insert("k".to_string(), "v".to_string());
        let p = dir.path().join("x.safetensors");
        write(&p, &meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(back.metadata, meta);
        assert_eq!(back.tensors["a"], a);
        assert_eq!(back.tensors["b"], b);
        assert!(!dir.path().join("x.safetensors.tmp").exists());
    }

    #[test]
    fn encoding_is_byte_stable() {
        let a = ArrayD::from_elem(IxDyn(&[4]), 0.5f32);
        let meta: BTreeMap<String, String> = (0..12).map(|i| (format!("key{i}"), format!("value {i}"))).collect();
        let first = encode(&meta, &[("a".into(), &a)]).unwrap();
        for _ in 0..8 {
            assert_eq!(encode(&meta, &[("a".into(), &a)]).unwrap(), first);
        }
        let header_len = u64::from_le_bytes(first[..8].try_into().unwrap()) as usize;
        assert_eq!(header_len % 8, 0);
        assert_eq!(decode(&first).unwrap().metadata, meta);
    }

    #[test]
    fn garbage_is_a_checkpoint_error() {
        assert!(matches!(decode(b"not a tensor file"), Err(Error::Checkpoint(_))));
    }
}
