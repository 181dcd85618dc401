//! Named parameter tensors with gradient accumulators, and their checkpoint
//! directory format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(invalid!("duplicate parameter name `{name}`"));
        }
        self.grads.insert(name.to_owned(), vec![0.0; value.numel()]);
        self.values.insert(name.to_owned(), value);
        Ok(())
    }

    /// Replaces the value of an existing parameter with one of equal shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .values
            .get_mut(name)
            .ok_or_else(|| invalid!("unknown parameter `{name}`"))?;
        if slot.shape() != value.shape() {
            return Err(shape_err!(
                "parameter `{name}` has shape {:?}, new value has {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    /// Adds a gradient map into the accumulators. Names absent from the
    /// store are rejected.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let acc = self
                .grads
                .get_mut(name)
                .ok_or_else(|| invalid!("gradient for unknown parameter `{name}`"))?;
            if acc.len() != g.numel() {
                return Err(shape_err!("gradient for `{name}` has {} values, expected {}", g.numel(), acc.len()));
            }
            acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.values_mut().for_each(|g| g.fill(0.0));
    }

    /// In-place update `p <- f(name, p, grad)` for every parameter.
    pub fn update(&mut self, mut f: impl FnMut(&str, &[f64], &[f64]) -> Vec<f64>) -> Result<()> {
        for (name, value) in self.values.iter_mut() {
            let next = f(name, value.data(), &self.grads[name]);
            *value = Tensor::from_vec(value.shape(), next)?;
        }
        Ok(())
    }

    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))?;
        self.insert(name, t)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape)?)
    }

    /// Writes one tensor file per parameter plus a JSON manifest. `extra`
    /// is stored verbatim under the manifest's `"config"` key.
    pub fn save_dir(&self, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (name, value) in &self.values {
            let file = format!("{name}.tensor");
            value.save(dir.join(&file))?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            params: entries,
            config: extra,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut store = Self::new();
        for entry in manifest.params {
            let t = Tensor::load(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{}` on disk has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            store.insert(&entry.name, t)?;
        }
        Ok((store, manifest.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    #[serde(default)]
    config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.init_zeros("a", &[2]).unwrap();
        assert!(s.init_zeros("a", &[3]).is_err());
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = ParamStore::new();
        s.init_zeros("a", &[2]).unwrap();
        assert!(s.set("a", Tensor::zeros(&[3]).unwrap()).is_err());
        s.set("a", Tensor::full(&[2], 1.0).unwrap()).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("w.one", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        s.insert("b", Tensor::scalar(-0.25)).unwrap();
        s.save_dir(dir.path(), serde_json::json!({"k": 3})).unwrap();
        let (back, cfg) = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(cfg["k"], 3);
        assert_eq!(back.get("w.one"), s.get("w.one"));
        assert_eq!(back.get("b"), s.get("b"));
    }
}
