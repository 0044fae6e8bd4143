//! Checkpoint container: an 8-byte little-endian header length, a JSON header
//! mapping tensor names to `{"dtype","shape","data_offsets"}` (plus an optional
//! `"__metadata__"` string map), then the raw little-endian tensor bytes.
//!
//! Writing is deterministic: tensors are laid out in name order, the metadata
//! entry comes first with sorted keys, and the header is padded with spaces to
//! an 8-byte boundary. Only `F32` is accepted on read.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use demerge_core::inference::MlpSpec;
use demerge_core::tensor::flatten;
use demerge_core::{FlatVector, ParamSchema, TensorError, TensorMap};
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

const METADATA_KEY: &str = "__metadata__";
/// Metadata entry holding the JSON-encoded [`MlpSpec`].
pub const SPEC_KEY: &str = "mlp_spec";
const MAX_HEADER: u64 = 100 << 20;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated file: need {expected} bytes, have {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}` has unsupported dtype {dtype}; only F32 is accepted")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("bad data offsets: {0}")]
    Offsets(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint has no usable `{SPEC_KEY}` metadata: {0}")]
    MissingSpec(String),
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in file order; rejects duplicate keys, which a plain map
/// would silently collapse.
struct HeaderEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries: Vec<(String, serde_json::Value)> = Vec::new();
                let mut seen = std::collections::HashSet::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(de::Error::custom(format!("duplicate key `{k}`")));
                    }
                    entries.push((k, v));
                }
                Ok(HeaderEntries(entries))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

pub fn encode(map: &TensorMap) -> Vec<u8> {
    let mut header = String::from("{");
    let mut first = true;
    if !map.metadata().is_empty() {
        header.push_str(&format!(
            "\"{METADATA_KEY}\":{}",
            serde_json::to_string(map.metadata()).expect("string map")
        ));
        first = false;
    }
    let mut offset = 0u64;
    for (name, tensor) in map.iter() {
        let len = 4 * tensor.data().len() as u64;
        let info = TensorInfo {
            dtype: "F32".into(),
            shape: tensor.shape().to_vec(),
            data_offsets: [offset, offset + len],
        };
        offset += len;
        if !first {
            header.push(',');
        }
        first = false;
        header.push_str(&serde_json::to_string(name).expect("string"));
        header.push(':');
        header.push_str(&serde_json::to_string(&info).expect("plain struct"));
    }
    header.push('}');
    while (8 + header.len()) % 8 != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, tensor) in map.iter() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap, CheckpointError> {
    let total = bytes.len() as u64;
    let Some(len_bytes) = bytes.get(..8) else {
        return Err(CheckpointError::Truncated {
            expected: 8,
            actual: total,
        });
    };
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
    if header_len == 0 {
        return Err(CheckpointError::MalformedHeader("empty header".into()));
    }
    if header_len > MAX_HEADER {
        return Err(CheckpointError::MalformedHeader(format!(
            "header length {header_len} too large"
        )));
    }
    if 8 + header_len > total {
        return Err(CheckpointError::Truncated {
            expected: 8 + header_len,
            actual: total,
        });
    }
    let header = std::str::from_utf8(&bytes[8..8 + header_len as usize])
        .map_err(|e| CheckpointError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let HeaderEntries(entries) = serde_json::from_str(header).map_err(|e| {
        if e.to_string().starts_with("duplicate key") {
            let name = e
                .to_string()
                .split('`')
                .nth(1)
                .unwrap_or_default()
                .to_owned();
            CheckpointError::DuplicateName(name)
        } else {
            CheckpointError::MalformedHeader(e.to_string())
        }
    })?;
    let buffer = &bytes[8 + header_len as usize..];

    let mut metadata = BTreeMap::new();
    let mut infos: BTreeMap<String, TensorInfo> = BTreeMap::new();
    for (name, value) in entries {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| CheckpointError::MalformedHeader(format!("{METADATA_KEY}: {e}")))?;
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value)
            .map_err(|e| CheckpointError::MalformedHeader(format!("tensor `{name}`: {e}")))?;
        if info.dtype != "F32" {
            return Err(CheckpointError::UnsupportedDtype {
                name,
                dtype: info.dtype,
            });
        }
        infos.insert(name, info);
    }

    let mut map = TensorMap::new();
    let mut expected_begin = 0u64;
    for (name, info) in infos {
        let [begin, end] = info.data_offsets;
        let numel: u64 = info.shape.iter().map(|&s| s as u64).product();
        if begin != expected_begin {
            return Err(CheckpointError::Offsets(format!(
                "`{name}` starts at {begin}, expected {expected_begin} (offsets must be contiguous in name order)"
            )));
        }
        if end < begin || end - begin != 4 * numel {
            return Err(CheckpointError::Offsets(format!(
                "`{name}` spans [{begin}, {end}) but shape {:?} needs {} bytes",
                info.shape,
                4 * numel
            )));
        }
        if end > buffer.len() as u64 {
            return Err(CheckpointError::Truncated {
                expected: 8 + header_len + end,
                actual: total,
            });
        }
        let data = buffer[begin as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        map.insert(name, info.shape, data)?;
        expected_begin = end;
    }
    if expected_begin != buffer.len() as u64 {
        return Err(CheckpointError::Offsets(format!(
            "{} trailing bytes after the last tensor",
            buffer.len() as u64 - expected_begin
        )));
    }
    *map.metadata_mut() = metadata;
    Ok(map)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(map: &TensorMap, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(map)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TensorMap, CheckpointError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

/// Tensor map of `weights` with the network spec embedded in the metadata.
pub fn weights_to_map(spec: &MlpSpec, weights: &FlatVector) -> TensorMap {
    let mut map = weights.unflatten();
    map.metadata_mut().insert(
        SPEC_KEY.into(),
        serde_json::to_string(spec).expect("plain struct"),
    );
    map
}

pub fn save_weights(
    spec: &MlpSpec,
    weights: &FlatVector,
    path: &Path,
) -> Result<(), CheckpointError> {
    save_checkpoint(&weights_to_map(spec, weights), path)
}

/// Reads a self-describing network checkpoint.
pub fn load_weights(path: &Path) -> Result<(MlpSpec, FlatVector), CheckpointError> {
    let map = load_checkpoint(path)?;
    let raw = map
        .metadata()
        .get(SPEC_KEY)
        .ok_or_else(|| CheckpointError::MissingSpec("key absent".into()))?;
    let spec: MlpSpec =
        serde_json::from_str(raw).map_err(|e| CheckpointError::MissingSpec(e.to_string()))?;
    spec.validate()
        .map_err(|e| CheckpointError::MissingSpec(e.to_string()))?;
    let weights = flatten(&map, &spec.schema())?;
    Ok((spec, weights))
}

/// Reads a checkpoint into the given schema.
pub fn load_flat(path: &Path, schema: &Arc<ParamSchema>) -> Result<FlatVector, CheckpointError> {
    Ok(flatten(&load_checkpoint(path)?, schema)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn f32_bytes(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_hand_written_file() {
        let bytes = header_file(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &f32_bytes(&[1.0, 2.0, 3.0, 4.0]),
        );
        let map = decode(&bytes).unwrap();
        let w = map.get("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert_eq!(w.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_header_is_malformed() {
        assert!(matches!(
            decode(&0u64.to_le_bytes()),
            Err(CheckpointError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode(&[1, 2, 3]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn empty_map_round_trips() {
        let bytes = encode(&TensorMap::new());
        assert_eq!(bytes.len() % 8, 0);
        assert_eq!(decode(&bytes).unwrap(), TensorMap::new());
    }

    #[test]
    fn rejects_other_dtypes() {
        let bytes = header_file(
            r#"{"w":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#,
            &[0; 4],
        );
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn rejects_duplicates() {
        let bytes = header_file(
            r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &[0; 4],
        );
        assert!(matches!(decode(&bytes), Err(CheckpointError::DuplicateName(n)) if n == "w"));
    }

    #[test]
    fn rejects_truncated_buffer_and_bad_offsets() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        assert!(matches!(
            decode(&header_file(header, &[0; 4])),
            Err(CheckpointError::Truncated { .. })
        ));
        let swapped = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        assert!(matches!(
            decode(&header_file(swapped, &[0; 8])),
            Err(CheckpointError::Offsets(_))
        ));
        assert!(matches!(
            decode(&header_file(header, &[0; 12])),
            Err(CheckpointError::Offsets(_))
        ));
        assert!(matches!(
            decode(&header_file("[1]", &[])),
            Err(CheckpointError::MalformedHeader(_))
        ));
    }

    #[test]
    fn nan_payload_survives() {
        let mut map = TensorMap::new();
        let nan = f32::from_bits(0x7fc0_1234);
        map.insert("x", vec![2], vec![nan, -0.0]).unwrap();
        let back = decode(&encode(&map)).unwrap();
        let data = back.get("x").unwrap().data();
        assert_eq!(data[0].to_bits(), 0x7fc0_1234);
        assert_eq!(data[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn spec_travels_in_metadata() {
        let spec = MlpSpec::toy(2, 3);
        let w = demerge_core::inference::init_weights(&spec, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save_weights(&spec, &w, &path).unwrap();
        let (spec2, w2) = load_weights(&path).unwrap();
        assert_eq!(spec, spec2);
        assert!(w.bits_eq(&w2));
        let bare = dir.path().join("bare.safetensors");
        save_checkpoint(&w.unflatten(), &bare).unwrap();
        assert!(matches!(
            load_weights(&bare),
            Err(CheckpointError::MissingSpec(_))
        ));
    }
}
