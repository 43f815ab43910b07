//! Small building blocks: affine maps, perceptrons, and a GRU cell.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{FmtError, Result};
use crate::params::{normal, xavier, Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => x,
        }
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Affine {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, input, output));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(g.param(self.weight))?.add_bias(g.param(self.bias))
    }
}

/// Stack of affine layers, each followed by its activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Affine>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; one activation per affine layer.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activations: &[Activation],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(widths.len(), activations.len() + 1, "one activation per layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Affine::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activations: activations.to_vec(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, cols) = x.value().dims2()?;
        if cols != self.input_width() {
            return Err(FmtError::dim("mlp", &x.shape(), &[self.input_width()]));
        }
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = act.apply(layer.forward(g, h)?);
        }
        Ok(h)
    }
}

/// Learned gain and shift for layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(vec![width], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(g.param(self.gamma), g.param(self.beta))
    }
}

/// Gated recurrent unit operating on `1×width` rows:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// n  = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut gate = |g: &str| {
            let w = store.add(format!("{name}.w_{g}"), xavier(rng, input, hidden));
            let u = store.add(format!("{name}.u_{g}"), xavier(rng, hidden, hidden));
            let b = store.add(format!("{name}.b_{g}"), Tensor::zeros(vec![hidden]));
            (w, u, b)
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_n, u_n, b_n) = gate("n");
        Self {
            input,
            hidden,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_n,
            u_n,
            b_n,
        }
    }

    pub fn step<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        x: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let pre = |w: ParamId, u: ParamId, b: ParamId, hh: Var<'t, T>| -> Result<Var<'t, T>> {
            x.matmul(g.param(w))?
                .add(hh.matmul(g.param(u))?)?
                .add_bias(g.param(b))
        };
        let z = pre(self.w_z, self.u_z, self.b_z, h)?.sigmoid();
        let r = pre(self.w_r, self.u_r, self.b_r, h)?.sigmoid();
        let n = pre(self.w_n, self.u_n, self.b_n, r.mul(h)?)?.tanh();
        n.add(z.mul(h.sub(n)?)?)
    }
}

pub(crate) fn learned_vector<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    width: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    store.add(name.to_string(), normal(rng, vec![width], std))
}
