//! Shared oracles for the integration tests: a central finite-difference
//! gradient checker and loop-based reference implementations that read
//! model parameters directly.
#![allow(dead_code)]

use fmt_core::data::Record;
use fmt_core::encoder::{Encoder, MultiHeadAttention};
use fmt_core::moe::ExpertLayer;
use fmt_core::nn::{Affine, Mlp};
use fmt_core::params::ParamStore;
use fmt_core::{AttentionMask, FmtModel, Modality, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
pub const ZERO_GRAD_ABS_TOL: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst agreement between analytic and numeric gradients over a check.
///
/// An entry passes when `|a − n| ≤ ZERO_GRAD_ABS_TOL + REL_TOL·|n|`: the
/// relative bound governs resolvable gradients and the absolute bound
/// governs gradients that are zero at finite-difference resolution.
#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest `|a − n| / (ZERO_GRAD_ABS_TOL + REL_TOL·|n|)`; below 1 passes.
    pub max_ratio: f64,
    /// Largest plain `|a − n| / max(|a|, |n|)` among nonzero entries.
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst: String,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_ratio < 1.0
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        self.max_abs = self.max_abs.max(diff);
        let scale = analytic.abs().max(numeric.abs());
        if scale > 0.0 {
            self.max_rel = self.max_rel.max(diff / scale);
        }
        let ratio = diff / (ZERO_GRAD_ABS_TOL + REL_TOL * numeric.abs());
        if ratio > self.max_ratio || !ratio.is_finite() {
            self.max_ratio = if ratio.is_finite() { ratio } else { f64::INFINITY };
            self.worst = format!("{}: analytic {analytic:e}, numeric {numeric:e}", label());
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        if other.max_ratio > self.max_ratio {
            self.max_ratio = other.max_ratio;
            self.worst = other.worst.clone();
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} entries, max ratio {:.3e}, max |a-n| {:.3e}, max plain rel {:.3e}",
            self.checked, self.max_ratio, self.max_abs, self.max_rel
        )
    }
}

/// Checks d(loss)/d(inputs) where `loss = Σ R ⊙ build(inputs)` for a fixed
/// random `R`, so every output entry contributes with a distinct weight.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, build: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let probe = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out_shape = build(&probe, &leaves).expect("forward").shape();
    let weights = rand_tensor(&mut rng(seed ^ 0xabcd), &out_shape, 1.0);

    let loss_of = |tape: &Tape<f64>, vars: &[Var<'_, f64>]| -> f64 {
        let out = build(tape, vars).expect("forward");
        out.mul(tape.constant(weights.clone())).expect("projection").sum().value().data()[0]
    };

    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &leaves).expect("forward");
    let w = tape.constant(weights.clone());
    let loss = out.mul(w).expect("projection").sum();
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let mut report = GradCheck::default();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let eval = |delta: f64| {
                let t = Tape::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let mut x = x.clone();
                        if j == k {
                            x.data_mut()[idx] += delta;
                        }
                        t.constant(x)
                    })
                    .collect();
                loss_of(&t, &vars)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            report.record(|| format!("input {k}[{idx}]"), analytic[k].data()[idx], numeric);
        }
    }
    report
}

/// Checks analytic parameter gradients of `loss(model)` against central
/// differences over every scalar of every parameter.
pub fn check_model<F>(model: &FmtModel<f64>, analytic: &[Tensor], loss: F) -> GradCheck
where
    F: Fn(&FmtModel<f64>) -> f64,
{
    let mut report = GradCheck::default();
    let mut work = model.clone();
    for (p, grad) in analytic.iter().enumerate() {
        let name = model.store.names()[p].clone();
        for idx in 0..grad.len() {
            let original = work.store.tensors()[p].data()[idx];
            work.store.tensors_mut()[p].data_mut()[idx] = original + FD_STEP;
            let up = loss(&work);
            work.store.tensors_mut()[p].data_mut()[idx] = original - FD_STEP;
            let down = loss(&work);
            work.store.tensors_mut()[p].data_mut()[idx] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(|| format!("{name}[{idx}]"), grad.data()[idx], numeric);
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Loop-based references. They share parameters with the model but none of its
// code paths.

pub type Matrix = Vec<Vec<f64>>;

pub fn to_matrix(t: &Tensor) -> Matrix {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn affine(store: &ParamStore<f64>, layer: &Affine, x: &Matrix) -> Matrix {
    let w = to_matrix(store.get(layer.weight));
    let b = store.get(layer.bias).data();
    naive_matmul(x, &w)
        .into_iter()
        .map(|row| row.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> Matrix {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * rstd * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Per-head weights and the projected output, with explicit loops and the
/// mask applied by skipping blocked keys.
pub fn reference_attention(
    store: &ParamStore<f64>,
    attn: &MultiHeadAttention,
    x: &Matrix,
    mask: Option<&AttentionMask>,
) -> (Matrix, Vec<Matrix>) {
    let l = x.len();
    let d = x[0].len();
    let dh = d / attn.n_heads;
    let q = affine(store, &attn.query, x);
    let k = affine(store, &attn.key, x);
    let v = affine(store, &attn.value, x);
    let mut joined = vec![vec![0.0; d]; l];
    let mut all_weights = Vec::new();
    for h in 0..attn.n_heads {
        let mut weights = vec![vec![0.0; l]; l];
        for i in 0..l {
            let allowed: Vec<bool> = (0..l).map(|j| mask.is_none_or(|m| !m.is_blocked(i, j))).collect();
            let mut scores = vec![f64::NEG_INFINITY; l];
            for j in 0..l {
                if allowed[j] {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[i][c] * k[j][c];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..l {
                if allowed[j] {
                    weights[i][j] = (scores[j] - max).exp();
                    total += weights[i][j];
                }
            }
            for j in 0..l {
                weights[i][j] /= total;
            }
            for c in h * dh..(h + 1) * dh {
                let mut s = 0.0;
                for j in 0..l {
                    s += weights[i][j] * v[j][c];
                }
                joined[i][c] = s;
            }
        }
        all_weights.push(weights);
    }
    (affine(store, &attn.output, &joined), all_weights)
}

fn mlp(store: &ParamStore<f64>, m: &Mlp, x: &Matrix, gelu_mask: &[bool]) -> Matrix {
    let mut h = x.clone();
    for (layer, &use_gelu) in m.layers.iter().zip(gelu_mask) {
        h = affine(store, layer, &h);
        if use_gelu {
            h = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        }
    }
    h
}

/// Encoder without any mask, written from scratch.
pub fn reference_encoder(store: &ParamStore<f64>, encoder: &Encoder, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for layer in &encoder.layers {
        let (att, _) = reference_attention(store, &layer.attention, &h, None);
        let n1 = layer_norm(
            &add(&h, &att),
            store.get(layer.norm1.gamma).data(),
            store.get(layer.norm1.beta).data(),
        );
        let ff = mlp(store, &layer.feed_forward, &n1, &[true, false]);
        h = layer_norm(
            &add(&n1, &ff),
            store.get(layer.norm2.gamma).data(),
            store.get(layer.norm2.beta).data(),
        );
    }
    h
}

/// One expert layer: experts, scores against the score vector, softmax mix.
pub fn reference_expert_layer(store: &ParamStore<f64>, layer: &ExpertLayer, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let x = vec![h.to_vec()];
    let outs: Vec<Vec<f64>> = layer
        .experts
        .iter()
        .map(|e| mlp(store, e, &x, &[true, false]).remove(0))
        .collect();
    let score = store.get(layer.score).data();
    let scale = (layer.width as f64).sqrt();
    let scores: Vec<f64> = outs
        .iter()
        .map(|o| o.iter().zip(score).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut mixed = vec![0.0; layer.width];
    for (w, o) in weights.iter().zip(&outs) {
        for (m, v) in mixed.iter_mut().zip(o) {
            *m += w * v;
        }
    }
    (mixed, weights)
}

/// A record with both modalities and deterministic random content.
pub fn random_record(rng: &mut ChaCha8Rng, vocab: usize, text_len: usize, label: usize) -> Record {
    Record {
        id: format!("r{}", rng.random::<u32>()),
        label,
        image: Some((0..256).map(|_| rng.random::<f64>()).collect()),
        text: Some((0..text_len).map(|_| rng.random_range(0..vocab)).collect()),
        has_image: true,
        has_text: true,
    }
}

/// Class probabilities with `dropped` masked out, as raw bits.
pub fn prob_bits(model: &FmtModel<f64>, r: &Record, dropped: Option<Modality>) -> Vec<u64> {
    model
        .predict_proba(r, dropped)
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient suites shared by the gradient tests and the acceptance run.

pub const SHAPES_PER_OP: u64 = 20;

fn small_shape(rng: &mut ChaCha8Rng, min_cols: usize) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(min_cols..=5))
}

/// One named check per differentiable operation, each over
/// [`SHAPES_PER_OP`] random shapes.
pub fn op_gradient_suite() -> Vec<(&'static str, GradCheck)> {
    type Case = (&'static str, fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Builder));
    let cases: Vec<Case> = vec![
        ("matmul", |r| {
            let (m, k) = small_shape(r, 1);
            let n = r.random_range(1..=4);
            (vec![rand_tensor(r, &[m, k], 1.0), rand_tensor(r, &[k, n], 1.0)], Builder::Matmul)
        }),
        ("add", |r| two_same(r, Builder::Add)),
        ("sub", |r| two_same(r, Builder::Sub)),
        ("mul", |r| two_same(r, Builder::Mul)),
        ("scale", |r| {
            let k = r.random_range(-2.0..2.0);
            one(r, 1, Builder::Scale(k))
        }),
        ("add_bias", |r| {
            let (m, n) = small_shape(r, 1);
            (vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[n], 1.0)], Builder::AddBias)
        }),
        ("gelu", |r| one(r, 1, Builder::Gelu)),
        ("sigmoid", |r| one(r, 1, Builder::Sigmoid)),
        ("tanh", |r| one(r, 1, Builder::Tanh)),
        ("layer_norm", |r| {
            let (m, n) = small_shape(r, 2);
            (
                vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[n], 1.0), rand_tensor(r, &[n], 1.0)],
                Builder::LayerNorm,
            )
        }),
        ("concat_cols", |r| {
            let (m, a) = small_shape(r, 1);
            let b = r.random_range(1..=3);
            (vec![rand_tensor(r, &[m, a], 1.0), rand_tensor(r, &[m, b], 1.0)], Builder::ConcatCols)
        }),
        ("concat_rows", |r| {
            let (a, n) = small_shape(r, 1);
            let b = r.random_range(1..=3);
            (vec![rand_tensor(r, &[a, n], 1.0), rand_tensor(r, &[b, n], 1.0)], Builder::ConcatRows)
        }),
        ("mean_rows", |r| one(r, 1, Builder::MeanRows)),
        ("sum", |r| one(r, 1, Builder::Sum)),
        ("softmax_rows", |r| one(r, 1, Builder::Softmax)),
        ("add_mask", |r| {
            let (m, n) = small_shape(r, 1);
            let mut blocked: Vec<bool> = (0..m * n).map(|_| r.random_bool(0.4)).collect();
            for i in 0..m {
                blocked[i * n + r.random_range(0..n)] = false;
            }
            (vec![rand_tensor(r, &[m, n], 1.0)], Builder::MaskedSoftmax(blocked))
        }),
        ("cross_entropy", |r| {
            let n = r.random_range(2..=5);
            let p: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
            let label = r.random_range(0..n);
            (vec![Tensor::new(vec![1, n], p).unwrap()], Builder::CrossEntropy(label))
        }),
        ("gather", |r| {
            let (m, n) = small_shape(r, 1);
            let count = r.random_range(1..=6);
            let index = (0..count).map(|_| r.random_range(0..m * n)).collect();
            (vec![rand_tensor(r, &[m, n], 1.0)], Builder::Gather(index, vec![1, count]))
        }),
        ("transpose", |r| one(r, 1, Builder::Transpose)),
        ("reshape", |r| one(r, 1, Builder::Reshape)),
        ("select_rows", |r| {
            let (m, n) = small_shape(r, 1);
            let rows = (0..r.random_range(1..=4)).map(|_| r.random_range(0..m)).collect();
            (vec![rand_tensor(r, &[m, n], 1.0)], Builder::SelectRows(rows))
        }),
        ("slice_cols", |r| {
            let (m, n) = small_shape(r, 1);
            let a = r.random_range(0..n);
            let b = r.random_range(a + 1..=n);
            (vec![rand_tensor(r, &[m, n], 1.0)], Builder::SliceCols(a, b))
        }),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(ci, (name, make))| {
            let mut total = GradCheck::default();
            for s in 0..SHAPES_PER_OP {
                let seed = 1000 * ci as u64 + s;
                let (inputs, builder) = make(&mut rng(seed));
                total.merge(&check_op(&inputs, seed, |_, v| builder.apply(v)));
            }
            (name, total)
        })
        .collect()
}

fn one(r: &mut ChaCha8Rng, min_cols: usize, b: Builder) -> (Vec<Tensor>, Builder) {
    let (m, n) = small_shape(r, min_cols);
    (vec![rand_tensor(r, &[m, n], 1.5)], b)
}

fn two_same(r: &mut ChaCha8Rng, b: Builder) -> (Vec<Tensor>, Builder) {
    let (m, n) = small_shape(r, 1);
    (vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m, n], 1.0)], b)
}

pub enum Builder {
    Matmul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    Gelu,
    Sigmoid,
    Tanh,
    LayerNorm,
    ConcatCols,
    ConcatRows,
    MeanRows,
    Sum,
    Softmax,
    MaskedSoftmax(Vec<bool>),
    CrossEntropy(usize),
    Gather(Vec<usize>, Vec<usize>),
    Transpose,
    Reshape,
    SelectRows(Vec<usize>),
    SliceCols(usize, usize),
}

impl Builder {
    pub fn apply<'t>(&self, v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        match self {
            Builder::Matmul => v[0].matmul(v[1]),
            Builder::Add => v[0].add(v[1]),
            Builder::Sub => v[0].sub(v[1]),
            Builder::Mul => v[0].mul(v[1]),
            Builder::Scale(k) => Ok(v[0].scale(*k)),
            Builder::AddBias => v[0].add_bias(v[1]),
            Builder::Gelu => Ok(v[0].gelu()),
            Builder::Sigmoid => Ok(v[0].sigmoid()),
            Builder::Tanh => Ok(v[0].tanh()),
            Builder::LayerNorm => v[0].layer_norm(v[1], v[2]),
            Builder::ConcatCols => Var::concat_cols(&[v[0], v[1]]),
            Builder::ConcatRows => Var::concat_rows(&[v[0], v[1]]),
            Builder::MeanRows => v[0].mean_rows(),
            Builder::Sum => Ok(v[0].sum()),
            Builder::Softmax => v[0].softmax_rows(),
            Builder::MaskedSoftmax(b) => v[0].add_mask(b)?.softmax_rows(),
            Builder::CrossEntropy(l) => v[0].cross_entropy(*l),
            Builder::Gather(i, s) => v[0].gather(i.clone(), s.clone()),
            Builder::Transpose => v[0].transpose(),
            Builder::Reshape => {
                let n = v[0].value().len();
                v[0].reshape(vec![n, 1])
            }
            Builder::SelectRows(rows) => v[0].select_rows(rows),
            Builder::SliceCols(a, b) => v[0].slice_cols(*a, *b),
        }
    }
}

/// Loss of a full model on one record: final cross-entropy plus the
/// auxiliary per-slot terms, so every head receives gradient.
pub fn model_loss<'t>(
    g: &fmt_core::Graph<'t, '_, f64>,
    model: &FmtModel<f64>,
    r: &Record,
    dropped: Option<Modality>,
) -> Var<'t, f64> {
    let out = model.forward(g, r, dropped, true).expect("forward");
    let mut loss = out.probs.cross_entropy(r.label).unwrap();
    for p in &out.aux_probs {
        loss = loss.add(p.cross_entropy(r.label).unwrap()).unwrap();
    }
    loss
}

/// Finite-difference check of every parameter of a model on one record.
pub fn full_model_check(model: &FmtModel<f64>, r: &Record, dropped: Option<Modality>) -> GradCheck {
    let tape = Tape::new();
    let g = fmt_core::Graph::trainable(&tape, &model.store);
    let loss = model_loss(&g, model, r, dropped);
    let analytic = g.backward(loss).unwrap();
    check_model(model, &analytic, |m| {
        let t = Tape::new();
        let g = fmt_core::Graph::frozen(&t, &m.store);
        model_loss(&g, m, r, dropped).value().data()[0]
    })
}

pub fn tiny_record(seed: u64) -> Record {
    let cfg = fmt_core::FmtConfig::tiny();
    random_record(&mut rng(seed), cfg.vocab, cfg.max_text_len, (seed % 2) as usize)
}

/// Operating points of the full-model check: model seed, record seed and
/// forced drop.
pub const MODEL_POINTS: [(u64, u64, Option<Modality>); 8] = [
    (1, 11, None),
    (1, 12, Some(Modality::Text)),
    (2, 21, None),
    (2, 22, Some(Modality::Text)),
    (4, 41, None),
    (4, 42, Some(Modality::Text)),
    (5, 51, None),
    (5, 52, Some(Modality::Image)),
];

pub fn full_model_suite() -> Vec<(String, GradCheck)> {
    MODEL_POINTS
        .iter()
        .map(|&(seed, rec, drop)| {
            let model = FmtModel::<f64>::new(fmt_core::FmtConfig::tiny().with_seed(seed)).unwrap();
            let check = full_model_check(&model, &tiny_record(rec), drop);
            (format!("model seed {seed}, record {rec}, drop {drop:?}"), check)
        })
        .collect()
}

/// Input gradient through a two-layer masked encoder.
pub fn encoder_input_check(seed: u64) -> GradCheck {
    use fmt_core::encoder::{build_mask, EncoderConfig, TaskKind};
    use fmt_core::ModalityTag::*;
    let cfg = EncoderConfig { d_model: 8, n_heads: 2, n_layers: 2, d_ff: 12 };
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, cfg, &mut rng(seed)).unwrap();
    let tags = [ImageCls, Image, TextCls, Text, Text];
    let mask = build_mask(&tags, TaskKind::ImageOnly, None);
    let x = rand_tensor(&mut rng(seed + 1), &[5, 8], 1.0);
    check_op(&[x], seed, |tape, v| {
        let g = fmt_core::Graph::frozen(tape, &store);
        encoder.forward(&g, v[0], &mask)
    })
}

/// Input gradient through the expert cascade and the GRU gate.
pub fn stack_input_check(seed: u64) -> GradCheck {
    use fmt_core::moe::{ExpertStack, GatingGru};
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let stack = ExpertStack::new(&mut store, 3, 3, 6, &mut r);
    let gate = GatingGru::new(&mut store, 6, 6, 2, &mut r);
    let fused = rand_tensor(&mut rng(seed + 1), &[3, 6], 1.0);
    check_op(&[fused], seed, |tape, v| {
        let g = fmt_core::Graph::frozen(tape, &store);
        let layers = stack.stack_forward(&g, v[0])?;
        gate.gate_and_classify(&g, &layers)
    })
}
