//! Named parameter storage and per-pass binding onto a tape.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::{FmtError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered list of named tensors. Insertion order is the canonical
/// order used by the optimizer and by checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrites a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(FmtError::dim("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// Binds parameters of a [`ParamStore`] onto a [`Tape`] on first use.
pub struct Graph<'t, 's, T: Scalar = f64> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
}

impl<'t, 's, T: Scalar> Graph<'t, 's, T> {
    /// Parameters become leaves and receive gradients.
    pub fn trainable(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters become constants; used for evaluation.
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Runs backward from `loss` and returns one gradient per parameter, in
    /// store order. Parameters the pass never touched get zeros.
    pub fn backward(&self, loss: Var<'t, T>) -> Result<Vec<Tensor<T>>> {
        self.tape.backward(loss)?;
        Ok(self.gradients())
    }

    pub fn gradients(&self) -> Vec<Tensor<T>> {
        let vars = self.vars.borrow();
        vars.iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| v.grad())
                    .unwrap_or_else(|| Tensor::zeros(self.store.tensors[i].shape().to_vec()))
            })
            .collect()
    }
}

/// Deterministic initializers.
pub(crate) fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

pub(crate) fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}
