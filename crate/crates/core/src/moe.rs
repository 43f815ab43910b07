//! Stacked mixture-of-experts head.
//!
//! Task outputs are resized to a common width, fused by a three-layer
//! perceptron, refined by a serial cascade of expert layers and finally
//! integrated by a two-cell GRU whose last state drives the classifier.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{FmtError, Result};
use crate::nn::{learned_vector, Activation, Affine, GruCell, Mlp};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of task slots fused by [`FusionLayer`].
pub const TASK_SLOTS: usize = 3;

/// Endpoint-aligned linear resampling of `v` to length `m`.
pub fn interpolate_resize<T: Scalar>(v: &[T], m: usize) -> Vec<T> {
    let n = v.len();
    if n == m {
        return v.to_vec();
    }
    let w = interpolation_matrix::<T>(n, m);
    (0..m)
        .map(|j| (0..n).filter(|&i| w[i * m + j] != T::zero()).map(|i| v[i] * w[i * m + j]).sum())
        .collect()
}

/// `n×m` matrix `W` with `resize(v) = v·W`.
pub fn interpolation_matrix<T: Scalar>(n: usize, m: usize) -> Vec<T> {
    assert!(n >= 1 && m >= 1, "interpolation needs non-empty vectors");
    let mut w = vec![T::zero(); n * m];
    if n == 1 {
        w.iter_mut().for_each(|x| *x = T::one());
        return w;
    }
    if m == 1 {
        w[0] = T::one();
        return w;
    }
    for j in 0..m {
        // position j·(n−1)/(m−1), split into integer part and exact remainder
        let num = j * (n - 1);
        let lo = num / (m - 1);
        let rem = num % (m - 1);
        if rem == 0 {
            w[lo * m + j] = T::one();
        } else {
            let frac = T::from_count(rem) / T::from_count(m - 1);
            w[lo * m + j] = T::one() - frac;
            w[(lo + 1) * m + j] = frac;
        }
    }
    w
}

/// Differentiable [`interpolate_resize`] on a `1×n` row.
pub fn resize_var<'t, T: Scalar>(g: &Graph<'t, '_, T>, v: Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    let n = v.value().len();
    if n == 0 || m == 0 {
        return Err(FmtError::Contract("interpolate_resize needs n, m >= 1".into()));
    }
    let row = v.reshape(vec![1, n])?;
    if n == m {
        return Ok(row);
    }
    let w = g.constant(Tensor::new(vec![n, m], interpolation_matrix(n, m))?);
    row.matmul(w)
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub target_dim: usize,
    pub mlp: Mlp,
    /// One learned stand-in per task slot for missing task outputs.
    pub absent: [ParamId; TASK_SLOTS],
}

impl FusionLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        target_dim: usize,
        widths: [usize; 3],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mlp = Mlp::new(
            store,
            "fusion.mlp",
            &[target_dim, widths[0], widths[1], widths[2]],
            &[activation; 3],
            rng,
        );
        let absent = std::array::from_fn(|i| learned_vector(store, &format!("fusion.absent.{i}"), widths[2], 1.0, rng));
        Self {
            target_dim,
            mlp,
            absent,
        }
    }

    pub fn width(&self) -> usize {
        self.mlp.output_width()
    }

    /// Fuses one row per task slot; `None` marks a dropped or missing slot.
    /// Returns `TASK_SLOTS × width`.
    pub fn fuse<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, task_outputs: &[Option<Var<'t, T>>]) -> Result<Var<'t, T>> {
        if task_outputs.len() != TASK_SLOTS {
            return Err(FmtError::Contract(format!(
                "fuse expects {TASK_SLOTS} task slots, got {}",
                task_outputs.len()
            )));
        }
        let w = self.width();
        let ones = g.constant(Tensor::filled(vec![w], T::one()));
        let zeros = g.constant(Tensor::zeros(vec![w]));
        let mut rows = Vec::with_capacity(TASK_SLOTS);
        for (slot, out) in task_outputs.iter().enumerate() {
            let row = match out {
                Some(v) => {
                    let resized = resize_var(g, *v, self.target_dim)?;
                    self.mlp.forward(g, resized)?.layer_norm(ones, zeros)?
                }
                None => g.param(self.absent[slot]).reshape(vec![1, w])?,
            };
            rows.push(row);
        }
        Var::concat_rows(&rows)
    }
}

#[derive(Debug, Clone)]
pub struct ExpertLayer {
    pub experts: Vec<Mlp>,
    pub score: ParamId,
    pub width: usize,
}

impl ExpertLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        n_experts: usize,
        width: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(n_experts >= 1, "an expert layer needs at least one expert");
        let experts = (0..n_experts)
            .map(|e| {
                Mlp::new(
                    store,
                    &format!("{name}.expert.{e}"),
                    &[width, width, width],
                    &[activation, Activation::Identity],
                    rng,
                )
            })
            .collect();
        let score = learned_vector(store, &format!("{name}.score"), width, 1.0, rng);
        Self { experts, score, width }
    }

    /// Returns the mixed output and the expert weights.
    pub fn forward_with_weights<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        h: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        let h = h.reshape(vec![1, self.width])?;
        let outputs = self
            .experts
            .iter()
            .map(|e| e.forward(g, h))
            .collect::<Result<Vec<_>>>()?;
        let score = g.param(self.score).reshape(vec![self.width, 1])?;
        let inv_sqrt = T::one() / T::from_count(self.width).sqrt();
        let scores = outputs
            .iter()
            .map(|o| o.matmul(score).map(|s| s.scale(inv_sqrt)))
            .collect::<Result<Vec<_>>>()?;
        let weights = Var::concat_cols(&scores)?.softmax_rows()?;
        let stacked = Var::concat_rows(&outputs)?;
        let mixed = weights.matmul(stacked)?;
        Ok((mixed, weights.value()))
    }

    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_with_weights(g, h).map(|(o, _)| o)
    }
}

/// Serial cascade of expert layers.
#[derive(Debug, Clone)]
pub struct ExpertStack {
    pub layers: Vec<ExpertLayer>,
}

impl ExpertStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        n_layers: usize,
        n_experts: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|k| ExpertLayer::new(store, &format!("stack.{k}"), n_experts, width, Activation::Gelu, rng))
            .collect();
        Self { layers }
    }

    /// Starts from the mean of the fused rows; returns every layer's output.
    pub fn stack_forward<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, fused: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let (rows, _) = fused.value().dims2()?;
        if rows != TASK_SLOTS {
            return Err(FmtError::dim("stack_forward", &fused.shape(), &[TASK_SLOTS]));
        }
        let mut h = fused.mean_rows()?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(g, h)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Two stacked GRU cells reading the cascade outputs as a sequence.
#[derive(Debug, Clone)]
pub struct GatingGru {
    pub cells: [GruCell; 2],
    pub readout: Affine,
}

impl GatingGru {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c0 = GruCell::new(store, "gate.gru.0", input, hidden, rng);
        let c1 = GruCell::new(store, "gate.gru.1", hidden, hidden, rng);
        let readout = Affine::new(store, "gate.readout", hidden, num_classes, rng);
        Self {
            cells: [c0, c1],
            readout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    /// Logits from the top cell's final hidden state.
    pub fn logits<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, steps: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if steps.is_empty() {
            return Err(FmtError::Contract("gating needs at least one step".into()));
        }
        let hidden = self.hidden();
        let mut h0 = g.constant(Tensor::zeros(vec![1, hidden]));
        let mut h1 = g.constant(Tensor::zeros(vec![1, hidden]));
        for &x in steps {
            let x = x.reshape(vec![1, self.cells[0].input])?;
            h0 = self.cells[0].step(g, x, h0)?;
            h1 = self.cells[1].step(g, h0, h1)?;
        }
        self.readout.forward(g, h1)
    }

    pub fn gate_and_classify<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, steps: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        self.logits(g, steps)?.softmax_rows()
    }
}
