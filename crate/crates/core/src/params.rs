//! Ordered collections of trainable tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, GradientMap, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A model's trainable tensors in a fixed order. Also used for gradients,
/// optimizer moments and search directions over the same parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    tensors: Vec<Tensor>,
}

impl ParamVector {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(shapes: &[Vec<usize>], flat: &[f64]) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != flat.len() {
            return Err(Error::Contract(format!("expected {total} parameters, got {}", flat.len())));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape.clone(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { tensors })
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data().iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data_mut().iter_mut())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.values_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (d, s) in self.values_mut().zip(other.values()) {
            *d += a * s;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Joins two vectors into one, `self` first.
    pub fn concat(&self, other: &Self) -> Self {
        Self { tensors: self.tensors.iter().chain(&other.tensors).cloned().collect() }
    }

    /// Adds one parameter leaf per tensor to `graph`.
    pub fn register(&self, graph: &mut Graph, prefix: &str) -> Vec<NodeId> {
        (0..self.tensors.len()).map(|i| graph.param(format!("{prefix}{i}"))).collect()
    }

    pub fn bind(&self, bindings: &mut Bindings, ids: &[NodeId]) {
        debug_assert_eq!(ids.len(), self.tensors.len());
        for (id, t) in ids.iter().zip(&self.tensors) {
            bindings.set(*id, t.clone());
        }
    }

    /// Collects the gradients of the listed leaves in order.
    pub fn from_grads(grads: &GradientMap, ids: &[NodeId]) -> Self {
        Self { tensors: ids.iter().map(|id| grads.of(*id).clone()).collect() }
    }
}
