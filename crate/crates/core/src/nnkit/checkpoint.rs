//! Binary parameter checkpoints.
//!
//! Layout: magic `WMCKPT01`, `u32` little-endian header length, a JSON header
//! `{"meta": {...}, "tensors": [{"name", "shape", "offset"}]}`, then the
//! concatenated little-endian `f32` buffers. Offsets are byte offsets into the
//! data section that follows the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WMCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &ParamSet<f32>, meta: &Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut data = Vec::with_capacity(params.num_elements() * 4);
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for x in t.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamSet<f32>, Value)> {
    let corrupt = |offset: usize, reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad checkpoint magic".into(),
        });
    }
    if bytes.len() < 12 {
        return Err(corrupt(bytes.len(), "truncated header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(bytes.len(), format!("header of {hlen} bytes exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[12..hend])
        .map_err(|e| corrupt(12, format!("header json: {e}")))?;
    let data = &bytes[hend..];

    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(header.tensors.len());
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || numel == 0 {
            return Err(corrupt(hend, format!("tensor `{}` has empty shape", entry.name)));
        }
        let start = entry.offset;
        let end = start
            .checked_add(numel as u64 * 4)
            .filter(|&e| e <= data.len() as u64)
            .ok_or_else(|| {
                corrupt(
                    hend + start as usize,
                    format!("tensor `{}` extends past end of data", entry.name),
                )
            })?;
        if params.get(&entry.name).is_some() {
            return Err(corrupt(hend, format!("duplicate tensor `{}`", entry.name)));
        }
        spans.push((start, end));
        let raw = &data[start as usize..end as usize];
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(corrupt(hend + w[1].0 as usize, "overlapping tensor buffers".into()));
        }
    }
    let used: u64 = spans.iter().map(|(s, e)| e - s).sum();
    if used != data.len() as u64 {
        return Err(corrupt(
            bytes.len(),
            format!("data section is {} bytes, tensors cover {used}", data.len()),
        ));
    }
    Ok((params, header.meta))
}

pub fn save_checkpoint(params: &ParamSet<f32>, meta: &Value, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, Value)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn empty_paramset_round_trips() {
        let bytes = encode_checkpoint(&ParamSet::new(), &json!({"kind": "x"})).unwrap();
        let (ps, meta) = decode_checkpoint(&bytes, p()).unwrap();
        assert!(ps.is_empty());
        assert_eq!(meta["kind"], "x");
    }

    #[test]
    fn corrupted_offset_table_is_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap());
        ps.insert("b", Tensor::new(vec![1], vec![3.0f32]).unwrap());
        let bytes = encode_checkpoint(&ps, &json!({})).unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        // point `b` into the middle of `a`
        let bad = text.replacen("\"offset\":8", "\"offset\":4", 1);
        assert_ne!(bad, text);
        let err = decode_checkpoint(bad.as_bytes(), p()).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "{err}");
        // and past the end of the data
        let bad = text.replacen("\"offset\":8", "\"offset\":64", 1);
        assert!(decode_checkpoint(bad.as_bytes(), p()).is_err());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap());
        let bytes = encode_checkpoint(&ps, &json!({})).unwrap();
        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(decode_checkpoint(&bad, p()), Err(Error::Format { .. })));
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(decode_checkpoint(cut, p()), Err(Error::Corrupt { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in proptest::collection::btree_map(
                "[a-z]{1,6}",
                proptest::collection::vec(any::<f32>(), 1..40),
                0..6,
            )
        ) {
            let mut ps = ParamSet::new();
            for (name, vals) in &tensors {
                ps.insert(name.clone(), Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            }
            let meta = json!({"kind": "test", "n": tensors.len()});
            let bytes = encode_checkpoint(&ps, &meta).unwrap();
            let (back, meta2) = decode_checkpoint(&bytes, p()).unwrap();
            prop_assert_eq!(meta, meta2);
            for (name, t) in ps.iter() {
                let b = back.get(name).unwrap();
                prop_assert_eq!(t.shape(), b.shape());
                let x: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                let y: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(x, y);
            }
        }
    }
}
