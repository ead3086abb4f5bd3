//! Single-file tensor container used for checkpoints, embedding matrices
//! and latent caches.
//!
//! Layout:
//!
//! ```text
//! u64 LE header length | UTF-8 JSON header | raw little-endian payloads
//! ```
//!
//! The header is a JSON object with sorted keys. `__config__` carries the
//! model configuration (or `null`), `__meta__` free-form metadata, and every
//! other key describes one tensor:
//! `{"dtype": "F32", "shape": [..], "offsets": [begin, end], "crc32": n}`
//! where offsets are relative to the start of the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const CONFIG_KEY: &str = "__config__";
pub const META_KEY: &str = "__meta__";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<usize>,
    offsets: [u64; 2],
    crc32: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub config: Option<Value>,
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn integrity(tensor: &str, reason: impl Into<String>) -> Error {
    Error::Integrity {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut bytes = Vec::new();
        T::write_le(&t.data(), &mut bytes);
        self.tensors.insert(
            name.into(),
            TensorEntry {
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn get<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .tensors
            .get(name)
            .ok_or_else(|| integrity(name, "tensor missing from container"))?;
        if e.dtype != T::DTYPE {
            return Err(integrity(
                name,
                format!("stored as {:?}, requested {:?}", e.dtype, T::DTYPE),
            ));
        }
        Tensor::from_vec(&e.shape, T::read_le(&e.bytes))
    }

    /// Byte range of each tensor within the payload section.
    pub fn payload_offsets(&self) -> BTreeMap<String, [u64; 2]> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, e)| {
                let end = offset + e.bytes.len() as u64;
                let range = [offset, end];
                offset = end;
                (name.clone(), range)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        header.insert(CONFIG_KEY.into(), self.config.clone().unwrap_or(Value::Null));
        header.insert(
            META_KEY.into(),
            Value::Object(self.meta.clone().into_iter().collect()),
        );
        let mut offset = 0u64;
        for (name, e) in &self.tensors {
            if name == CONFIG_KEY || name == META_KEY {
                return Err(Error::Contract(format!("reserved tensor name `{name}`")));
            }
            let end = offset + e.bytes.len() as u64;
            let entry = HeaderEntry {
                dtype: e.dtype,
                shape: e.shape.clone(),
                offsets: [offset, end],
                crc32: crc32fast::hash(&e.bytes),
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset = end;
        }
        let header = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.tensors.values() {
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: &str = "__header__";
        if bytes.len() < 8 {
            return Err(integrity(HEADER, "file shorter than the length prefix"));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| integrity(HEADER, format!("declared header length {len} exceeds file")))?;
        let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[8..body])
            .map_err(|e| integrity(HEADER, format!("unparseable header: {e}")))?;
        let payload = &bytes[body..];

        let mut c = Container::new();
        for (name, value) in header {
            match name.as_str() {
                CONFIG_KEY => c.config = (!value.is_null()).then_some(value),
                META_KEY => {
                    let Value::Object(m) = value else {
                        return Err(integrity(META_KEY, "metadata is not an object"));
                    };
                    c.meta = m.into_iter().collect();
                }
                _ => {
                    let h: HeaderEntry = serde_json::from_value(value)
                        .map_err(|e| integrity(&name, format!("bad header entry: {e}")))?;
                    let [begin, end] = h.offsets.map(|o| o as usize);
                    if begin > end || end > payload.len() {
                        return Err(integrity(
                            &name,
                            format!("payload range {begin}..{end} exceeds {} bytes", payload.len()),
                        ));
                    }
                    let expected = h.shape.iter().product::<usize>() * h.dtype.size_of();
                    if end - begin != expected {
                        return Err(integrity(
                            &name,
                            format!("{} bytes for shape {:?} {:?}", end - begin, h.shape, h.dtype),
                        ));
                    }
                    let data = &payload[begin..end];
                    if crc32fast::hash(data) != h.crc32 {
                        return Err(integrity(&name, "checksum mismatch"));
                    }
                    c.tensors.insert(
                        name,
                        TensorEntry {
                            dtype: h.dtype,
                            shape: h.shape,
                            bytes: data.to_vec(),
                        },
                    );
                }
            }
        }
        Ok(c)
    }

    /// Writes through a temporary sibling file and renames into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::file(&tmp, e))?;
            f.sync_all().map_err(|e| Error::file(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.config = Some(serde_json::json!({"layers": 2}));
        c.meta.insert("note".into(), Value::from("x"));
        c.insert("b", &Tensor::<f32>::from_vec(&[2], vec![1.5, -2.0]).unwrap());
        c.insert("a", &Tensor::<f64>::from_vec(&[2, 1], vec![0.25, 1e-300]).unwrap());
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let again = Container::from_bytes(&bytes).unwrap().to_bytes().unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn flipped_payload_byte_names_tensor() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1; // inside "b", the last tensor in key order
        bytes[last] ^= 0x01;
        match Container::from_bytes(&bytes) {
            Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, "b"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_detected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Integrity { ref tensor, .. } if tensor == "b"), "{err}");
        assert!(Container::from_bytes(&bytes[..5]).is_err());
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let c = sample();
        assert!(c.get::<f64>("b").is_err());
        assert_eq!(c.get::<f32>("b").unwrap().to_vec(), vec![1.5, -2.0]);
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(values in prop::collection::vec(any::<f32>(), 0..64)) {
            let mut c = Container::new();
            let t = Tensor::<f32>::from_vec(&[values.len()], values.clone()).unwrap();
            c.insert("t", &t);
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            let got = back.get::<f32>("t").unwrap().to_vec();
            prop_assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
