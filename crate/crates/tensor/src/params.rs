use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable handle to a tensor held by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Named, insertion-ordered parameter collection.
///
/// Every store, clones included, carries a distinct identity so a tape can
/// refuse parameters from a second store.
#[derive(Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
    uid: u64,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
            uid: fresh_uid(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
            uid: fresh_uid(),
        }
    }

    /// Identity of this store; distinct for every store and clone.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a tensor under `name`. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter, in deterministic order.
#[derive(Clone, Debug, Default)]
pub struct Grads<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        self.map.insert(id, g);
    }

    /// Adds `g` into the stored gradient for `id`, inserting if absent.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        match self.map.get_mut(&id) {
            Some(cur) => {
                if cur.shape() != g.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "accumulate",
                        lhs: cur.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                for (a, &b) in cur.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(id, g.clone());
            }
        }
        Ok(())
    }

    /// Inserts zero gradients for any of `ids` that received none.
    pub fn zero_fill(&mut self, store: &ParamStore<T>, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            self.map
                .entry(id)
                .or_insert_with(|| Tensor::zeros(store.get(id).shape()));
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.map.retain(|id, _| keep(*id));
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.map.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.map.values().map(Tensor::sum_sq).sum::<T>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.id("w").unwrap(), ParamId(0));
        assert!(s.id("missing").is_err());
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
        s.set(id, Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn accumulate_adds() {
        let mut g = Grads::<f64>::new();
        g.accumulate(ParamId(0), &Tensor::full(&[2], 1.0)).unwrap();
        g.accumulate(ParamId(0), &Tensor::full(&[2], 2.0)).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[3.0, 3.0]);
        assert!(g.accumulate(ParamId(0), &Tensor::full(&[3], 2.0)).is_err());
    }
}
