//! Named parameter storage, seeded initialization, graph binding and
//! checkpoint I/O.
//!
//! Checkpoints are two files: a flat little-endian `f64` blob and a JSON
//! sidecar next to it (same stem, `.json` extension) mapping each parameter
//! name to its shape and element offset into the blob.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters are never touched by the optimizer.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            frozen,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Writes `path` (raw f64 LE) and its `.json` sidecar.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::with_capacity(self.total_numel() * 8);
        let mut manifest = CheckpointManifest {
            format: "f64-le".into(),
            total: 0,
            params: BTreeMap::new(),
        };
        for e in &self.entries {
            manifest.params.insert(
                e.name.clone(),
                ManifestEntry {
                    shape: e.tensor.shape().to_vec(),
                    offset: manifest.total,
                },
            );
            manifest.total += e.tensor.numel();
            for v in e.tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    /// Overwrites every parameter from a checkpoint. Names and shapes must
    /// match this store exactly.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        if blob.len() != manifest.total * 8 {
            return Err(Error::Validation(format!(
                "checkpoint holds {} bytes, manifest declares {} values",
                blob.len(),
                manifest.total
            )));
        }
        if manifest.params.len() != self.entries.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model has {}",
                manifest.params.len(),
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let m = manifest.params.get(&e.name).ok_or_else(|| {
                Error::Validation(format!("checkpoint is missing parameter {}", e.name))
            })?;
            if m.shape != e.tensor.shape() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    e.name,
                    m.shape,
                    e.tensor.shape()
                )));
            }
            let n = e.tensor.numel();
            if m.offset + n > manifest.total {
                return Err(Error::Validation(format!("parameter {} overruns the blob", e.name)));
            }
            for (i, v) in e.tensor.data_mut().iter_mut().enumerate() {
                let at = (m.offset + i) * 8;
                *v = f64::from_le_bytes(blob[at..at + 8].try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    total: usize,
    params: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    offset: usize,
}

/// Seeded parameter factory writing into a [`ParamStore`].
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamInit {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], frozen: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?, frozen)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], frozen: bool) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape), frozen)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], frozen: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        self.store.add(name, Tensor::new(shape.to_vec(), vec![1.0; n])?, frozen)
    }
}

/// Lazily inserts parameters into a graph as leaves, at most once each.
///
/// Frozen parameters become constants unless `track_frozen` is set, so the
/// backward pass flows through them without computing their own gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track_frozen: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            track_frozen: false,
        }
    }

    /// Binder that differentiates frozen parameters too (for gradient checks).
    pub fn tracking_all(store: &'a ParamStore) -> Self {
        Binder {
            track_frozen: true,
            ..Binder::new(store)
        }
    }

    pub fn get(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = g.leaf(entry.tensor.clone(), self.track_frozen || !entry.frozen);
        self.vars[id.0] = Some(v);
        v
    }

    /// The graph node of a parameter, if the forward pass used it.
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Per-parameter gradients after a backward pass; `None` where the
    /// parameter was unused or not differentiated.
    pub fn gradients(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| g.grad(v)).map(|t| t.data().to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, 3);
        init.normal("a.w", &[3, 4], false).unwrap();
        init.ones("a.g", &[4], true).unwrap();
        init.normal("b", &[2], false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        store.save_checkpoint(&path).unwrap();

        let mut other = ParamStore::new();
        let mut init = ParamInit::new(&mut other, 99);
        init.normal("a.w", &[3, 4], false).unwrap();
        init.ones("a.g", &[4], true).unwrap();
        init.normal("b", &[2], false).unwrap();
        other.load_checkpoint(&path).unwrap();
        for (x, y) in store.entries().iter().zip(other.entries()) {
            let bx: Vec<u64> = x.tensor.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        ParamInit::new(&mut store, 0).normal("w", &[2, 2], false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        store.save_checkpoint(&path).unwrap();
        let mut other = ParamStore::new();
        ParamInit::new(&mut other, 0).normal("w", &[4], false).unwrap();
        assert!(matches!(other.load_checkpoint(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let mut store = ParamStore::new();
        let err = store.load_checkpoint(Path::new("/nonexistent/ck.bin")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[1]), false).unwrap();
        assert!(store.add("x", Tensor::zeros(&[1]), false).is_err());
    }

    #[test]
    fn binder_inserts_each_parameter_once() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::zeros(&[2]), true).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let v1 = b.get(&mut g, id);
        let v2 = b.get(&mut g, id);
        assert_eq!(v1, v2);
        assert!(!g.requires_grad(v1));
        let mut g2 = Graph::new();
        let mut b2 = Binder::tracking_all(&store);
        let v = b2.get(&mut g2, id);
        assert!(g2.requires_grad(v));
    }
}
