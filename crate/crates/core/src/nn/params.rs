//! Flat parameter storage with named, shaped views.

use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All parameters of a model in one contiguous buffer, so optimizers and
/// gradient buffers share a single layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    data: Vec<T>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            specs: Vec::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Registers a zero-initialized parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let spec = ParamSpec {
            name: name.into(),
            offset: self.data.len(),
            shape,
        };
        self.data.resize(self.data.len() + spec.len(), T::zero());
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, id: usize) -> &[T] {
        let s = &self.specs[id];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [T] {
        let s = &self.specs[id];
        let range = s.offset..s.offset + s.len();
        &mut self.data[range]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// A zeroed buffer with this store's layout.
    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mutable view of one parameter inside a flat gradient buffer.
pub fn slot<'a, T>(buf: &'a mut [T], spec: &ParamSpec) -> &'a mut [T] {
    &mut buf[spec.offset..spec.offset + spec.len()]
}
