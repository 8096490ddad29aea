//! PTF tensor container.
//!
//! Layout: the 4-byte magic `PTF1`, a little-endian `u64` header length, a
//! UTF-8 JSON header
//! `{"tensors":{name:{"dtype":"f32","shape":[..],"offset":n}},"meta":{..}}`
//! and a payload of little-endian `f32` values. Offsets are byte positions
//! within the payload. Tensors are written in lexicographic name order, so
//! equal parameter sets produce identical files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{CkptError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

pub use crate::vit::{validate_names, NameReport};

pub const MAGIC: &[u8; 4] = b"PTF1";
const PREFIX: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    tensors: BTreeMap<&'a str, Entry>,
    meta: &'a Value,
}

/// Entries in file order, duplicates preserved for later rejection.
struct EntryList(Vec<(String, Entry)>);

impl<'de> Deserialize<'de> for EntryList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = EntryList;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of tensor entries")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<EntryList, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Entry>()? {
                    out.push((k, v));
                }
                Ok(EntryList(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
struct HeaderIn {
    tensors: EntryList,
    #[serde(default)]
    meta: Value,
}

/// Encodes parameters (cast to `f32`) and metadata.
pub fn to_bytes<S: Scalar>(params: &ParamSet<S>, meta: &Value) -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.insert(
            name,
            Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
            },
        );
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&HeaderOut {
        tensors,
        meta,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(ParamSet<S>, Value)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CkptError::BadMagic.into());
    }
    if bytes.len() < PREFIX {
        return Err(CkptError::TruncatedHeader.into());
    }
    let header_len = u64::from_le_bytes(bytes[4..PREFIX].try_into().expect("8 bytes"));
    let header_end = (PREFIX as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or(CkptError::TruncatedHeader)? as usize;
    let header: HeaderIn = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| CkptError::BadHeader(e.to_string()))?;
    let payload = &bytes[header_end..];
    let payload_len = payload.len() as u64;

    let mut seen = HashSet::new();
    let mut extents = Vec::with_capacity(header.tensors.0.len());
    for (name, e) in &header.tensors.0 {
        if !seen.insert(name.as_str()) {
            return Err(CkptError::DuplicateName(name.clone()).into());
        }
        if e.dtype != "f32" {
            return Err(CkptError::UnsupportedDtype {
                name: name.clone(),
                dtype: e.dtype.clone(),
            }
            .into());
        }
        let count = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CkptError::BadHeader(format!("shape of `{name}` overflows")))?;
        let end = e
            .offset
            .checked_add(count)
            .ok_or_else(|| CkptError::BadHeader(format!("extent of `{name}` overflows")))?;
        if end > payload_len {
            return Err(CkptError::TruncatedPayload {
                name: name.clone(),
                end,
                len: payload_len,
            }
            .into());
        }
        extents.push((e.offset, end, name.as_str()));
    }
    let mut sorted: Vec<_> = extents.iter().filter(|(s, e, _)| e > s).collect();
    sorted.sort();
    for pair in sorted.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(CkptError::Overlap {
                first: pair[0].2.to_string(),
                second: pair[1].2.to_string(),
            }
            .into());
        }
    }

    let mut params = ParamSet::new();
    for ((name, e), (start, end, _)) in header.tensors.0.iter().zip(&extents) {
        let data = payload[*start as usize..*end as usize]
            .chunks_exact(4)
            .map(|b| S::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        params.insert(name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok((params, header.meta))
}

pub fn save<S: Scalar>(params: &ParamSet<S>, meta: &Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<(ParamSet<S>, Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::from_vec(&[3], vec![1.0, -2.5, 3.25]).unwrap());
        p.insert("a", Tensor::from_vec(&[2, 2], vec![0.1, 0.2, 0.3, f32::MIN_POSITIVE]).unwrap());
        p
    }

    fn header_bytes(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = sample();
        let bytes = to_bytes(&p, &json!({"k": 1}));
        let (back, meta) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(meta, json!({"k": 1}));
        assert_eq!(to_bytes(&back, &meta), bytes);
    }

    #[test]
    fn single_tensor_payload_is_sixteen_bytes() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[2, 2]));
        let bytes = to_bytes(&p, &Value::Null);
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 12 - header_len, 16);
        let header: Value = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        assert_eq!(header["tensors"]["w"], json!({"dtype": "f32", "shape": [2, 2], "offset": 0}));
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = to_bytes(&sample(), &Value::Null);
        let err = |b: &[u8]| from_bytes::<f32>(b).unwrap_err();

        assert!(matches!(err(b"PTF2xxxxxxxxxxxxxxx"), Error::Checkpoint(CkptError::BadMagic)));
        assert!(matches!(err(b"PTF1\x05"), Error::Checkpoint(CkptError::TruncatedHeader)));
        assert!(matches!(
            err(&bytes[..bytes.len() - 1]),
            Error::Checkpoint(CkptError::TruncatedPayload { .. })
        ));
        assert!(matches!(
            err(&header_bytes("{\"tensors\":", &[])),
            Error::Checkpoint(CkptError::BadHeader(_))
        ));
        let overlap = header_bytes(
            r#"{"tensors":{"a":{"dtype":"f32","shape":[2],"offset":0},"b":{"dtype":"f32","shape":[2],"offset":4}},"meta":{}}"#,
            &[0u8; 12],
        );
        assert!(matches!(err(&overlap), Error::Checkpoint(CkptError::Overlap { .. })));
        let dup = header_bytes(
            r#"{"tensors":{"a":{"dtype":"f32","shape":[1],"offset":0},"a":{"dtype":"f32","shape":[1],"offset":4}},"meta":{}}"#,
            &[0u8; 8],
        );
        assert!(matches!(err(&dup), Error::Checkpoint(CkptError::DuplicateName(_))));
        let f16 = header_bytes(r#"{"tensors":{"a":{"dtype":"f16","shape":[1],"offset":0}}}"#, &[0u8; 4]);
        assert!(matches!(err(&f16), Error::Checkpoint(CkptError::UnsupportedDtype { .. })));

        bytes[0] = b'X';
        assert_eq!(err(&bytes).to_string(), "bad magic");
    }

    #[test]
    fn empty_tensors_do_not_overlap() {
        let b = header_bytes(
            r#"{"tensors":{"a":{"dtype":"f32","shape":[0],"offset":0},"b":{"dtype":"f32","shape":[1],"offset":0}},"meta":null}"#,
            &[0u8; 4],
        );
        let (p, _) = from_bytes::<f64>(&b).unwrap();
        assert_eq!(p.get("a").unwrap().len(), 0);
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ptf");
        save(&sample(), &json!({"epoch": 3}), &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        save(&sample(), &json!({"epoch": 3}), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let (p, meta) = load::<f32>(&path).unwrap();
        assert_eq!(p, sample());
        assert_eq!(meta["epoch"], 3);
        assert!(matches!(load::<f32>(dir.path().join("none")), Err(Error::Io { .. })));
    }
}
