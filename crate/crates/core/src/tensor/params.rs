use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

/// Parameters placed on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on `g`, trainable when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let bytes = h.finalize();
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path, rng_seed: u64, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            tensors,
            rng_seed,
            config_hash: config_hash.to_string(),
        };
        let bin = dir.join("params.bin");
        fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let man = dir.join("manifest.json");
        fs::write(&man, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let man_path = dir.join("manifest.json");
        let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let bin = dir.join("params.bin");
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut params = ModelParams::new();
        for entry in &manifest.tensors {
            if entry.dtype != "f64" {
                return Err(Error::invalid(format!("unsupported dtype {} for {}", entry.dtype, entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            if end > blob.len() {
                return Err(Error::invalid(format!("params.bin too short for {}", entry.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        }
        Ok((params, manifest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tensors: Vec<TensorEntry>,
    pub rng_seed: u64,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModelParams::new();
        p.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap()).unwrap();
        p.insert("b", Tensor::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        assert!(p.insert("b", Tensor::scalar(0.0)).is_err());
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), 42, "abc").unwrap();
        let (q, man) = ModelParams::load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(man.rng_seed, 42);
        assert_eq!(man.tensors[1].offset, 32);
        assert_eq!(p.digest(), q.digest());
    }
}
