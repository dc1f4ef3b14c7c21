//! Dense row-major tensors with a define-by-run autograd tape.
//!
//! Values live in two places: trainable parameters sit in a [`ParamStore`]
//! and are referenced from a [`Tape`] by [`ParamId`]; everything computed
//! during a forward pass is owned by the tape. `Tape::backward` returns
//! [`Gradients`], which the store accumulates.

mod io;
mod optim;
mod tape;

pub use io::{load_params, read_container, save_params, write_container};
pub use optim::{clip_grad_norm, Adam, AdamConfig, AdamState};
pub use tape::{log_softmax_row, Gradients, Tape, Var};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("dims must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, data has {}", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn scalar(x: S) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| S::of(normal.sample(rng))).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Rows and columns of a 2-D tensor (a 1-D tensor is one row).
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    /// Replace a tensor's values, keeping its id. Shapes may change (vocab
    /// extension); the gradient is cleared.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor<S>) {
        self.tensors[id.0] = tensor.with_grad();
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Add the parameter gradients from one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn store_accumulates_and_zeroes() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(vec![2]));
        store.get_mut(id).accumulate_grad(&[1.0, 2.0]);
        store.get_mut(id).accumulate_grad(&[1.0, 2.0]);
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 4.0]);
        store.zero_grad();
        assert!(store.get(id).grad().is_none());
        assert_eq!(store.id("w"), Some(id));
    }
}
