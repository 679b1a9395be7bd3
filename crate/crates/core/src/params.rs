//! Named parameter storage, gradient buffers and the checkpoint format.
//!
//! A checkpoint is a single file: one JSON header line
//! `{"schema_version", "kind", "config", "shapes": [{"name","rows","cols"}]}`
//! followed by the parameter values as little-endian `f64`, in shape-table
//! order. Loading checks the shape table against the expected model layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Adds a `rows x cols` parameter drawn uniformly from `±scale`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_full(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.add(name, Tensor::full(rows, cols, value))
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.scale_in_place(0.0);
        }
    }

    /// Flat scalar addressing across all parameters, in registration order.
    pub fn locate(&self, mut flat: usize) -> (ParamId, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (ParamId(i), flat);
            }
            flat -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn shape_table(&self) -> Vec<ShapeEntry> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| ShapeEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect()
    }
}

/// Gradient buffers aligned with a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Grads {
    tensors: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Grads {
            tensors: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.tensors[id.0].as_ref()
    }

    pub(crate) fn slot(&mut self, id: ParamId, rows: usize, cols: usize) -> &mut Tensor {
        self.tensors[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.tensors[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.tensors.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.iter_mut().flatten() {
            t.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(Tensor::all_finite)
    }

    /// Gradient value at a flat scalar index (0 when never touched).
    pub fn flat_value(&self, store: &ParamStore, flat: usize) -> f64 {
        let (id, offset) = store.locate(flat);
        self.tensors[id.0]
            .as_ref()
            .map_or(0.0, |t| t.data()[offset])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (ParamId(i), t)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub shapes: Vec<ShapeEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: kind.to_string(),
        config,
        shapes: store.shape_table(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header).expect("checkpoint header serializes");
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for t in &store.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint header and its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
        line: 1,
        message: format!("checkpoint header: {e}"),
    })?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            what: "checkpoint",
            found: header.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for entry in &header.shapes {
        let mut data = Vec::with_capacity(entry.rows * entry.cols);
        for _ in 0..entry.rows * entry.cols {
            r.read_exact(&mut buf).map_err(|_| Error::Parse {
                line: 2,
                message: format!("checkpoint truncated inside parameter {}", entry.name),
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        store.add(entry.name.clone(), Tensor::from_vec(entry.rows, entry.cols, data));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: format!("{} trailing bytes after parameter data", rest.len()),
        });
    }
    Ok((header, store))
}

/// Checks that `loaded` has exactly the names and shapes of `expected`.
pub fn validate_shapes(expected: &ParamStore, loaded: &ParamStore) -> Result<()> {
    let a = expected.shape_table();
    let b = loaded.shape_table();
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} parameters, model expects {}",
            b.len(),
            a.len()
        )));
    }
    for (e, l) in a.iter().zip(&b) {
        if e != l {
            return Err(Error::Shape(format!(
                "parameter {} is {}x{} in checkpoint, model expects {} {}x{}",
                l.name, l.rows, l.cols, e.name, e.rows, e.cols
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_uniform("a", 3, 4, 0.7, &mut rng);
        store.add_uniform("b", 1, 5, 1e-300, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, "test", serde_json::json!({"k": 1}), &store).unwrap();
        let (header, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(header.kind, "test");
        assert_eq!(loaded, store);
        validate_shapes(&store, &loaded).unwrap();
    }

    #[test]
    fn shape_validation_names_the_parameter() {
        let mut a = ParamStore::new();
        a.add_zeros("w", 2, 2);
        let mut b = ParamStore::new();
        b.add_zeros("w", 2, 3);
        let err = validate_shapes(&a, &b).unwrap_err().to_string();
        assert!(err.contains("w"), "{err}");
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.add_full("w", 4, 4, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, "test", serde_json::Value::Null, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn flat_locate_walks_registration_order() {
        let mut s = ParamStore::new();
        let a = s.add_zeros("a", 2, 2);
        let b = s.add_zeros("b", 1, 3);
        assert_eq!(s.locate(0), (a, 0));
        assert_eq!(s.locate(3), (a, 3));
        assert_eq!(s.locate(4), (b, 0));
        assert_eq!(s.num_scalars(), 7);
    }
}
