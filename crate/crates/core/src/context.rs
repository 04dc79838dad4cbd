//! Context sets: the ordered image pairs that define a task at inference time.

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextPair {
    pub input: Image,
    pub output: Image,
}

impl ContextPair {
    pub fn new(input: Image, output: Image) -> Result<Self> {
        if input.dims() != output.dims() {
            return Err(Error::Shape(format!(
                "context pair input {:?} and output {:?} differ in size",
                input.dims(),
                output.dims()
            )));
        }
        Ok(Self { input, output })
    }
}

/// `n >= 1` pairs, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pairs: Vec<ContextPair>,
}

impl ContextSet {
    pub fn new(pairs: Vec<ContextPair>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Context("context set must hold at least one pair".into()))?;
        let dims = first.input.dims();
        for (i, p) in pairs.iter().enumerate() {
            if p.input.dims() != dims || p.output.dims() != dims {
                return Err(Error::Shape(format!(
                    "context pair {i} has size {:?}, expected {dims:?}",
                    p.input.dims()
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn from_images(pairs: Vec<(Image, Image)>) -> Result<Self> {
        let pairs = pairs
            .into_iter()
            .map(|(i, o)| ContextPair::new(i, o))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pairs[0].input.dims()
    }

    pub fn pairs(&self) -> &[ContextPair] {
        &self.pairs
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Image> {
        self.pairs.iter().map(|p| &p.output)
    }

    pub fn into_pairs(self) -> Vec<ContextPair> {
        self.pairs
    }

    /// Reorders pairs by `order`, which must be a permutation of `0..n`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.pairs.len());
        Self {
            pairs: order.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }
}
