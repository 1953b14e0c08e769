use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Name and shape of one parameter blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    metas: Vec<ParamMeta>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            metas: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.metas.push(ParamMeta {
            name: name.into(),
            shape: t.shape().to_vec(),
        });
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.metas
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.metas.iter().position(|m| m.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            metas: self.metas.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Rebuilds a store from metadata and raw tensors, checking shapes.
    pub fn from_parts(metas: Vec<ParamMeta>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if metas.len() != tensors.len() {
            return Err(Error::shape(&[metas.len()], &[tensors.len()]));
        }
        for (m, t) in metas.iter().zip(&tensors) {
            t.ensure_shape(&m.shape)?;
        }
        Ok(ParamStore { metas, tensors })
    }

    /// Same names and shapes as `other`.
    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.metas == other.metas
    }
}

/// Registers initialized parameters while a network layout is being built.
pub(crate) struct ParamBuilder<'a, R: Rng> {
    pub store: ParamStore<f32>,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store
            .push(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.push(name, Tensor::zeros(shape))
    }
}
