//! Named parameter storage and the flat named-array archive format.
//!
//! An archive is a pair of files: `<stem>.json` holding a manifest of
//! `{name, shape, dtype, offset}` records plus caller metadata, and
//! `<stem>.bin` holding the little-endian array payloads back to back.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Top-level component of a parameter name (`encoder`, `psp`, ...).
    pub fn group(&self, id: ParamId) -> &str {
        let name = self.name(id);
        name.split('.').next().unwrap_or(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn save(&self, dir: &Path, stem: &str, meta: serde_json::Value) -> Result<()> {
        let arrays: Vec<(&str, &Tensor)> = self.names.iter().map(String::as_str).zip(&self.tensors).collect();
        write_archive(dir, stem, &arrays, meta)
    }

    /// Overwrite every parameter from an archive that must contain all of them
    /// with matching shapes.
    pub fn load_exact(&mut self, dir: &Path, stem: &str) -> Result<serde_json::Value> {
        let archive = read_archive(dir, stem)?;
        let mut found: HashMap<String, Tensor> = archive.arrays.into_iter().collect();
        for (i, name) in self.names.iter().enumerate() {
            let t = found
                .remove(name)
                .ok_or_else(|| Error::Format(format!("archive is missing parameter {name}")))?;
            ensure!(
                t.shape() == self.tensors[i].shape(),
                Format,
                "parameter {} has shape {:?} in archive, expected {:?}",
                name,
                t.shape(),
                self.tensors[i].shape()
            );
            self.tensors[i] = t;
        }
        Ok(archive.meta)
    }

    /// Copy matching arrays from a weight archive, skipping unknown names and
    /// shape mismatches with a warning.
    pub fn load_matching(&mut self, dir: &Path, stem: &str) -> Result<LoadReport> {
        let archive = read_archive(dir, stem)?;
        let mut report = LoadReport::default();
        for (name, t) in archive.arrays {
            match self.by_name.get(&name) {
                Some(&i) if self.tensors[i].shape() == t.shape() => {
                    self.tensors[i] = t;
                    report.loaded.push(name);
                }
                Some(&i) => {
                    log::warn!(
                        "skipping {name}: archive shape {:?} vs model shape {:?}",
                        t.shape(),
                        self.tensors[i].shape()
                    );
                    report.skipped.push(name);
                }
                None => {
                    log::warn!("skipping {name}: no such parameter");
                    report.skipped.push(name);
                }
            }
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

/// One gradient tensor per parameter, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    #[serde(default)]
    offset: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ArrayRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub struct Archive {
    pub arrays: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

fn archive_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn write_archive(dir: &Path, stem: &str, arrays: &[(&str, &Tensor)], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json_path, bin_path) = archive_paths(dir, stem);
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        records.push(ArrayRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: Some(payload.len() as u64),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { arrays: records, meta };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&bin_path, payload).map_err(|e| Error::io(&bin_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Read an archive. Arrays without an explicit offset are laid out
/// sequentially; `f32` and `f64` payloads are accepted.
pub fn read_archive(dir: &Path, stem: &str) -> Result<Archive> {
    let (json_path, bin_path) = archive_paths(dir, stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
    let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut cursor = 0usize;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for rec in manifest.arrays {
        let n: usize = rec.shape.iter().product();
        let width = match rec.dtype.as_str() {
            "f64" | "float64" => 8,
            "f32" | "float32" => 4,
            other => return Err(Error::Format(format!("{}: unsupported dtype {other}", rec.name))),
        };
        let start = rec.offset.map(|o| o as usize).unwrap_or(cursor);
        let end = start + n * width;
        ensure!(
            end <= payload.len(),
            Format,
            "array {} overruns payload ({} > {} bytes)",
            rec.name,
            end,
            payload.len()
        );
        let bytes = &payload[start..end];
        let data: Vec<f64> = if width == 8 {
            bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        } else {
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        };
        cursor = end;
        arrays.push((rec.name, Tensor::from_vec(&rec.shape, data)?));
    }
    Ok(Archive {
        arrays,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip_and_matching_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.add("encoder.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 1e-300]).unwrap());
        a.add("head.b", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        a.save(dir.path(), "weights", serde_json::json!({"iteration": 4})).unwrap();

        let mut b = ParamStore::new();
        b.add("encoder.w", Tensor::zeros(&[2, 2]));
        b.add("head.b", Tensor::zeros(&[3]));
        let meta = b.load_exact(dir.path(), "weights").unwrap();
        assert_eq!(meta["iteration"], 4);
        assert_eq!(a, b);

        let mut c = ParamStore::new();
        c.add("encoder.w", Tensor::zeros(&[4]));
        c.add("head.b", Tensor::zeros(&[3]));
        let report = c.load_matching(dir.path(), "weights").unwrap();
        assert_eq!(report.loaded, vec!["head.b".to_string()]);
        assert_eq!(report.skipped, vec!["encoder.w".to_string()]);
        assert!(c.load_exact(dir.path(), "weights").is_err());
    }

    #[test]
    fn reads_sequential_f32_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"arrays":[{"name":"x","shape":[2],"dtype":"f32"},{"name":"y","shape":[1],"dtype":"f32"}]}"#;
        fs::write(dir.path().join("pre.json"), manifest).unwrap();
        let mut bytes = Vec::new();
        for v in [1.5f32, -2.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.path().join("pre.bin"), bytes).unwrap();
        let a = read_archive(dir.path(), "pre").unwrap();
        assert_eq!(a.arrays[0].1.data(), &[1.5, -2.0]);
        assert_eq!(a.arrays[1].1.data(), &[4.0]);
    }
}
