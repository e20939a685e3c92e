use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Matrix};

/// Index of a parameter inside its [`ParameterStore`].
pub type ParamId = usize;

/// Shape and precision of one named array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: DType,
}

/// Flat, insertion-ordered collection of every named parameter array.
///
/// Names are namespaced by component (`encoder.`, `mlm.`, `prompt.`,
/// `decoder.`, `head.`) so a single store can back a whole model and a
/// single checkpoint can capture it.
#[derive(Clone, Default)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    index: HashMap<String, ParamId>,
}

impl<T> std::fmt::Debug for ParameterStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParameterStore")
            .field("arrays", &self.names.len())
            .finish()
    }
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a new array. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: (usize, usize)) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Incompatible(vec![format!("{name}: missing")]))?;
        let actual = self.values[id].shape();
        if actual != shape {
            return Err(Error::Incompatible(vec![format!(
                "{name}: expected {}x{}, found {}x{}",
                shape.0, shape.1, actual.0, actual.1
            )]));
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(id, (n, v))| (id, n.as_str(), v))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(id, _)| id)
    }

    pub fn specs(&self) -> Vec<ArraySpec> {
        self.iter()
            .map(|(_, name, m)| ArraySpec {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
                dtype: T::DTYPE,
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Copies every array whose name starts with `prefix` from `other`.
    /// Shapes must agree.
    pub fn copy_prefix_from(&mut self, other: &ParameterStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        let mut problems = Vec::new();
        for (_, name, value) in other.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            match self.id(name) {
                Some(id) if self.values[id].shape() == value.shape() => {
                    self.values[id] = value.clone();
                    copied += 1;
                }
                Some(id) => {
                    let (r, c) = self.values[id].shape();
                    problems.push(format!(
                        "{name}: expected {r}x{c}, found {}x{}",
                        value.rows(),
                        value.cols()
                    ));
                }
                None => problems.push(format!("{name}: not present in target")),
            }
        }
        if problems.is_empty() {
            Ok(copied)
        } else {
            Err(Error::Incompatible(problems))
        }
    }

    /// Removes every array whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let keep: Vec<bool> = self.names.iter().map(|n| !n.starts_with(prefix)).collect();
        let mut names = Vec::new();
        let mut values = Vec::new();
        for ((n, v), k) in self
            .names
            .drain(..)
            .zip(self.values.drain(..))
            .zip(keep)
        {
            if k {
                names.push(n);
                values.push(v);
            }
        }
        self.index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        self.names = names;
        self.values = values;
    }

    /// Bitwise equality of every array whose name starts with `prefix`.
    pub fn bitwise_eq_prefix(&self, other: &ParameterStore<T>, prefix: &str) -> bool {
        let mine: Vec<_> = self.iter().filter(|(_, n, _)| n.starts_with(prefix)).collect();
        let theirs: Vec<_> = other.iter().filter(|(_, n, _)| n.starts_with(prefix)).collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|((_, na, a), (_, nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }

    /// Squared L2 distance between the arrays under `prefix`.
    pub fn sq_distance_prefix(&self, other: &ParameterStore<T>, prefix: &str) -> f64 {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, name, a)| {
                let b = other.by_name(name).expect("same layout");
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }

    /// Content hash over names, shapes and raw little-endian bytes.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (_, name, m) in self.iter() {
            hasher.update(name.as_bytes());
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            buf.clear();
            for &v in m.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a", Matrix::zeros(1, 1)).unwrap();
        assert!(store.insert("a", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn expect_reports_shape_mismatch() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Matrix::zeros(2, 3)).unwrap();
        assert_eq!(store.expect("w", (2, 3)).unwrap(), 0);
        match store.expect("w", (3, 2)) {
            Err(Error::Incompatible(names)) => assert!(names[0].starts_with("w:")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn remove_prefix_reindexes() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("prompt.a", Matrix::zeros(1, 1)).unwrap();
        store.insert("encoder.b", Matrix::zeros(1, 2)).unwrap();
        store.remove_prefix("prompt.");
        assert_eq!(store.len(), 1);
        assert_eq!(store.id("encoder.b"), Some(0));
        assert!(store.id("prompt.a").is_none());
    }
}
