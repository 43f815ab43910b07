//! Linear tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs, so node order is a topological order by construction.
//! [`Tape::backward`] walks the nodes once in reverse.

use std::cell::{Ref, RefCell};

use crate::error::{FmtError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon used by [`Var::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    CrossEntropy { probs: usize, label: usize },
    Softmax(usize),
    AddMask { x: usize, blocked: Vec<bool> },
    Gather { x: usize, index: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Tensor<T>>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Scalar = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input. Gradients are reported for leaves.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        debug_assert!(
            matches!(op, Op::AddMask { .. } | Op::Constant) || value.all_finite(),
            "non-finite forward value"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    pub fn value(&self, var: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    /// Gradient of the last backward pass with respect to `var`. `None` for
    /// constants, for nodes the loss does not depend on, and before backward.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads
            .borrow()
            .as_ref()
            .and_then(|g| g.get(var.id).cloned().flatten())
    }

    pub fn has_gradients(&self) -> bool {
        self.grads.borrow().is_some()
    }

    /// Clears accumulated gradients so another backward pass may run.
    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Accumulates d(loss)/d(node) for every tracked node reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(FmtError::Contract("loss belongs to another tape".into()));
        }
        if self.grads.borrow().is_some() {
            return Err(FmtError::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(FmtError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if loss_node.tracked {
            grads[loss.id] = Some(Tensor::filled(loss_node.value.shape().to_vec(), T::one()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        // zero-filled grads for tracked leaves the loss did not reach
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() && node.tracked {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    delta: Tensor<T>,
) -> Result<()> {
    if !nodes[id].tracked {
        return Ok(());
    }
    let delta = if delta.shape() != nodes[id].value.shape() {
        delta.reshape(nodes[id].value.shape().to_vec())?
    } else {
        delta
    };
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            if nodes[*a].tracked {
                let da = g.matmul(&val(*b).transpose()?)?;
                accumulate(nodes, grads, *a, da)?;
            }
            if nodes[*b].tracked {
                let db = val(*a).transpose()?.matmul(g)?;
                accumulate(nodes, grads, *b, db)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.map(|x| -x))?;
        }
        Op::Mul(a, b) => {
            if nodes[*a].tracked {
                accumulate(nodes, grads, *a, g.mul(val(*b))?)?;
            }
            if nodes[*b].tracked {
                accumulate(nodes, grads, *b, g.mul(val(*a))?)?;
            }
        }
        Op::Scale(a, k) => {
            let k = *k;
            accumulate(nodes, grads, *a, g.map(|x| x * k))?;
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone())?;
            if nodes[*b].tracked {
                accumulate(nodes, grads, *b, g.sum_rows()?)?;
            }
        }
        Op::Gelu(x) => {
            let c = T::lit(SQRT_2_OVER_PI);
            let k = T::lit(GELU_CUBIC);
            let half = T::lit(0.5);
            let three = T::lit(3.0);
            let d = val(*x).map(|x| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
            });
            accumulate(nodes, grads, *x, g.mul(&d)?)?;
        }
        Op::Sigmoid(x) => {
            let d = node.value.map(|y| y * (T::one() - y));
            accumulate(nodes, grads, *x, g.mul(&d)?)?;
        }
        Op::Tanh(x) => {
            let d = node.value.map(|y| T::one() - y * y);
            accumulate(nodes, grads, *x, g.mul(&d)?)?;
        }
        Op::LayerNorm { x, gamma, beta } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let (m, n) = xv.dims2()?;
            let eps = T::lit(LAYER_NORM_EPS);
            let inv_n = T::one() / T::from_count(n);
            let mut dx = vec![T::zero(); m * n];
            let mut dgamma = vec![T::zero(); n];
            let mut dbeta = vec![T::zero(); n];
            for i in 0..m {
                let row = &xv.data()[i * n..(i + 1) * n];
                let grow = &g.data()[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let rstd = T::one() / (var + eps).sqrt();
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for j in 0..n {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv.data()[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                    dgamma[j] += grow[j] * xhat;
                    dbeta[j] += grow[j];
                }
                mean_dxhat *= inv_n;
                mean_dxhat_xhat *= inv_n;
                for j in 0..n {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv.data()[j];
                    dx[i * n + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
            accumulate(nodes, grads, *gamma, Tensor::new(gv.shape().to_vec(), dgamma)?)?;
            let bshape = val(*beta).shape().to_vec();
            accumulate(nodes, grads, *beta, Tensor::new(bshape, dbeta)?)?;
        }
        Op::ConcatCols(parts) => {
            let (m, n) = g.dims2()?;
            let mut offset = 0;
            for &p in parts {
                let (_, w) = val(p).dims2()?;
                if nodes[p].tracked {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g.data()[i * n + offset..i * n + offset + w]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(val(p).shape().to_vec(), d)?)?;
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                if nodes[p].tracked {
                    let d = g.data()[offset..offset + len].to_vec();
                    accumulate(nodes, grads, p, Tensor::new(val(p).shape().to_vec(), d)?)?;
                }
                offset += len;
            }
        }
        Op::MeanRows(x) => {
            let (m, n) = val(*x).dims2()?;
            let inv = T::one() / T::from_count(m);
            let mut d = Vec::with_capacity(m * n);
            for _ in 0..m {
                d.extend(g.data().iter().map(|&v| v * inv));
            }
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), d)?)?;
        }
        Op::Sum(x) => {
            let gs = g.data()[0];
            accumulate(nodes, grads, *x, Tensor::filled(val(*x).shape().to_vec(), gs))?;
        }
        Op::CrossEntropy { probs, label } => {
            let p = val(*probs);
            let mut d = Tensor::zeros(p.shape().to_vec());
            d.data_mut()[*label] = -g.data()[0] / p.data()[*label];
            accumulate(nodes, grads, *probs, d)?;
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let (m, n) = y.dims2()?;
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &g.data()[i * n..(i + 1) * n];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    d[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(y.shape().to_vec(), d)?)?;
        }
        Op::AddMask { x, blocked } => {
            let mut d = g.clone();
            for (v, &b) in d.data_mut().iter_mut().zip(blocked) {
                if b {
                    *v = T::zero();
                }
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::Gather { x, index } => {
            let mut d = Tensor::zeros(val(*x).shape().to_vec());
            for (&src, &gv) in index.iter().zip(g.data()) {
                d.data_mut()[src] += gv;
            }
            accumulate(nodes, grads, *x, d)?;
        }
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(*self).shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(FmtError::Contract("operands live on different tapes".into()))
        }
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = self.tape.tracked(self.id);
        self.tape.push(value, op, tracked)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(other.id);
        self.tape.push(value, op, tracked)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let v = self.tape.value(self).matmul(&self.tape.value(other))?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let v = self.tape.value(self).add(&self.tape.value(other))?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let v = self.tape.value(self).sub(&self.tape.value(other))?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let v = self.tape.value(self).mul(&self.tape.value(other))?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, k: T) -> Var<'t, T> {
        let v = self.tape.value(self).map(|x| x * k);
        self.unary(v, Op::Scale(self.id, k))
    }

    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias)?;
        let v = self.tape.value(self).add_bias(&self.tape.value(bias))?;
        Ok(self.binary(bias, v, Op::AddBias(self.id, bias.id)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let c = T::lit(SQRT_2_OVER_PI);
        let k = T::lit(GELU_CUBIC);
        let half = T::lit(0.5);
        let v = self
            .tape
            .value(self)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.tape.value(self).map(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.tape.value(self).map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma` and `beta` (both of length `cols`).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (m, n) = self.tape.value(self).dims2()?;
        let gv = gamma.value();
        let bv = beta.value();
        if gv.len() != n || bv.len() != n {
            return Err(FmtError::dim("layer_norm", &[m, n], gv.shape()));
        }
        let xv = self.value();
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_n = T::one() / T::from_count(n);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
        }
        let tracked = [self, gamma, beta].iter().any(|v| self.tape.tracked(v.id));
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
            tracked,
        ))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| FmtError::Contract("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let (m, _) = first.tape.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p)?;
            let (pm, pn) = tape.value(*p).dims2()?;
            if pm != m {
                return Err(FmtError::dim("concat_cols", &first.shape(), &p.shape()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&tape.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|p| tape.tracked(p.id));
        let value = Tensor::new(vec![m, total], out)?;
        Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), tracked))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| FmtError::Contract("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let (_, n) = tape.value(*first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            first.same_tape(p)?;
            let v = tape.value(*p);
            let (pm, pn) = v.dims2()?;
            if pn != n {
                return Err(FmtError::dim("concat_rows", &first.shape(), v.shape()));
            }
            rows += pm;
            out.extend_from_slice(v.data());
        }
        let tracked = parts.iter().any(|p| tape.tracked(p.id));
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), tracked))
    }

    /// Mean over rows: `m×n` to `1×n`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let v = self.tape.value(self).mean_rows()?;
        Ok(self.unary(v, Op::MeanRows(self.id)))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.tape.value(self).sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Negative log-probability of `label` for a single probability row.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t, T>> {
        let p = self.value();
        let (m, n) = p.dims2()?;
        if m != 1 {
            return Err(FmtError::Contract(format!(
                "cross_entropy expects one probability row, got {m}"
            )));
        }
        if label >= n {
            return Err(FmtError::Contract(format!("label {label} out of range for {n} classes")));
        }
        let loss = -p.data()[label].ln();
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs: self.id,
                label,
            },
        ))
    }

    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let v = self.tape.value(self).softmax_rows()?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Writes the negative-infinity sentinel wherever `blocked` is set.
    pub fn add_mask(self, blocked: &[bool]) -> Result<Var<'t, T>> {
        let mut v = self.value();
        if blocked.len() != v.len() {
            return Err(FmtError::dim("add_mask", v.shape(), &[blocked.len()]));
        }
        for (x, &b) in v.data_mut().iter_mut().zip(blocked) {
            if b {
                *x = T::neg_infinity();
            }
        }
        Ok(self.unary(
            v,
            Op::AddMask {
                x: self.id,
                blocked: blocked.to_vec(),
            },
        ))
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Vec<usize>, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let src = self.tape.value(self);
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            let x = *src.data().get(i).ok_or_else(|| {
                FmtError::Contract(format!("gather index {i} out of range {}", src.len()))
            })?;
            out.push(x);
        }
        drop(src);
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(value, Op::Gather { x: self.id, index }))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (m, n) = self.tape.value(self).dims2()?;
        let index = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(index, vec![n, m])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let len = self.tape.value(self).len();
        self.gather((0..len).collect(), shape)
    }

    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let (m, n) = self.tape.value(self).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(FmtError::Contract(format!("row {bad} out of range {m}")));
        }
        let index = rows.iter().flat_map(|&r| (0..n).map(move |j| r * n + j)).collect();
        self.gather(index, vec![rows.len(), n])
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let (m, n) = self.tape.value(self).dims2()?;
        if start > end || end > n {
            return Err(FmtError::Contract(format!("column range {start}..{end} out of {n}")));
        }
        let index = (0..m).flat_map(|i| (start..end).map(move |j| i * n + j)).collect();
        self.gather(index, vec![m, end - start])
    }
}
