//! Binary parameter container shared by checkpoints and auxiliary files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            "ONCKPT1" (base model) or "ONAUX1" (interventions, probes, toy)
//! u32              metadata length in bytes
//! metadata         UTF-8 JSON: {"meta": {...}, "arrays": [{"name", "shape"}, ...]}
//! arrays           raw f32 values, one array after another in declared order
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Magic {
    Checkpoint,
    Auxiliary,
}

impl Magic {
    pub fn bytes(self) -> &'static [u8] {
        match self {
            Magic::Checkpoint => b"ONCKPT1",
            Magic::Auxiliary => b"ONAUX1",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArraySpec>,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: Magic,
    pub meta: Value,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArraySpec {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(self.magic.bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.arrays {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], expect: Magic, path: &Path) -> Result<Self> {
        let fail = |field: &str, reason: String| Error::Format {
            path: path.to_owned(),
            field: field.to_owned(),
            reason,
        };
        let magic = expect.bytes();
        if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
            return Err(fail(
                "magic",
                format!("expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let mut pos = magic.len();
        let len_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| fail("metadata length", "truncated".into()))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let header_bytes = bytes
            .get(pos..pos + len)
            .ok_or_else(|| fail("metadata", "truncated".into()))?;
        pos += len;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| fail("metadata", e.to_string()))?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for spec in header.arrays {
            let n: usize = spec.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| fail(&spec.name, format!("truncated: need {n} f32 values")))?;
            pos += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((spec.name, Tensor::from_vec(&spec.shape, data)));
        }
        if pos != bytes.len() {
            return Err(fail(
                "arrays",
                format!("{} trailing bytes", bytes.len() - pos),
            ));
        }
        Ok(Self {
            magic: expect,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path, expect: Magic) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, expect, path)
    }

    pub fn meta_field<T: for<'de> Deserialize<'de>>(&self, field: &str, path: &Path) -> Result<T> {
        let v = self.meta.get(field).ok_or_else(|| Error::Format {
            path: path.to_owned(),
            field: field.to_owned(),
            reason: "missing from metadata".into(),
        })?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format {
            path: path.to_owned(),
            field: field.to_owned(),
            reason: e.to_string(),
        })
    }
}

/// Write `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".tmp");
        path.with_file_name(name)
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        Container {
            magic: Magic::Auxiliary,
            meta: json!({"objective": "onion", "hidden": 2}),
            arrays: vec![
                ("a".into(), Tensor::from_vec(&[1, 2], vec![1.0, -2.5])),
                ("b".into(), Tensor::from_vec(&[2, 2], vec![0.0, 1e-30, f32::MAX, 3.0])),
            ],
        }
    }

    #[test]
    fn roundtrip_bytes() {
        let c = sample();
        let back = Container::decode(&c.encode(), Magic::Auxiliary, Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn wrong_magic() {
        let err = Container::decode(&sample().encode(), Magic::Checkpoint, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "magic"));
    }

    #[test]
    fn truncated_names_array() {
        let bytes = sample().encode();
        let err = Container::decode(&bytes[..bytes.len() - 3], Magic::Auxiliary, Path::new("x"))
            .unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "b"));
    }
}
