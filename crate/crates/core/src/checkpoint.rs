//! Flat tensor checkpoints: magic, u64 LE header length, JSON manifest, f32 LE payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BXADCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    #[serde(default)]
    geometry: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Which store tensors a load touched.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form geometry record, usually the serialized model config.
    pub geometry: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(geometry: serde_json::Value) -> Self {
        Self {
            geometry,
            tensors: BTreeMap::new(),
        }
    }

    /// Snapshot of every store parameter accepted by `keep`.
    pub fn from_store(store: &ParamStore, geometry: serde_json::Value, keep: impl Fn(&Param) -> bool) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, p)| keep(p))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Self { geometry, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let len = t.numel() * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let manifest = Manifest {
            dtype: "f32".into(),
            geometry: self.geometry.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let payload = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::Checkpoint(format!("payload of `{}` out of bounds", e.name)))?;
            let numel: usize = e.shape.iter().product();
            if raw.len() != numel * 4 {
                return Err(Error::Checkpoint(format!("`{}` length disagrees with its shape", e.name)));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Self {
            geometry: manifest.geometry,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies tensors whose names start with `prefix` into `store`.
    ///
    /// Shapes are all checked before anything is written, so a mismatch leaves the store untouched.
    pub fn apply(&self, store: &mut ParamStore, prefix: &str) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut updates = Vec::new();
        for (id, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
            match self.tensors.get(&p.name) {
                Some(t) if t.shape() != p.value.shape() => {
                    return Err(Error::GeometryMismatch {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => {
                    updates.push((id, t.clone()));
                    report.loaded.push(p.name.clone());
                }
                None => report.missing.push(p.name.clone()),
            }
        }
        for (id, t) in updates {
            store.set_value(id, t)?;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("encoder.a", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap(), false);
        s.add("encoder.b", Tensor::new(&[1], vec![2.0]).unwrap(), false);
        s.add("decoder.c", Tensor::zeros(&[4]), true);
        s
    }

    #[test]
    fn bytes_round_trip() {
        let s = store();
        let ck = Checkpoint::from_store(&s, serde_json::json!({"embed_dim": 3}), |_| true);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn apply_reports_loaded_and_missing() {
        let src = store();
        let ck = Checkpoint::from_store(&src, serde_json::Value::Null, |p| p.name != "encoder.b");
        let mut dst = ParamStore::new();
        dst.add("encoder.a", Tensor::zeros(&[2, 3]), false);
        dst.add("encoder.b", Tensor::zeros(&[1]), false);
        let r = ck.apply(&mut dst, "encoder.").unwrap();
        assert_eq!(r.loaded, vec!["encoder.a"]);
        assert_eq!(r.missing, vec!["encoder.b"]);
        assert_eq!(dst.value(dst.id("encoder.a").unwrap()), src.value(src.id("encoder.a").unwrap()));
    }

    #[test]
    fn shape_mismatch_names_tensor_and_leaves_store() {
        let ck = Checkpoint::from_store(&store(), serde_json::Value::Null, |_| true);
        let mut dst = ParamStore::new();
        dst.add("encoder.a", Tensor::full(&[3, 2], 9.0), false);
        match ck.apply(&mut dst, "encoder.") {
            Err(Error::GeometryMismatch { name, expected, found }) => {
                assert_eq!(name, "encoder.a");
                assert_eq!(expected, vec![3, 2]);
                assert_eq!(found, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
        assert!(dst.value(dst.id("encoder.a").unwrap()).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn missing_file_and_garbage() {
        assert!(matches!(
            Checkpoint::read(Path::new("/nonexistent/x.ckpt")),
            Err(Error::FileNotFound(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Checkpoint(_))));
    }
}
