//! Transformer encoder with a modality-aware additive attention mask.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::embedding::{Modality, ModalityTag};
use crate::error::{FmtError, Result};
use crate::nn::{Activation, Affine, LayerNormParams, Mlp};
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which token interactions an encoder pass permits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Joint,
    ImageOnly,
    TextOnly,
}

impl TaskKind {
    /// Fixed slot order used by the fusion layer.
    pub const ALL: [TaskKind; 3] = [TaskKind::Joint, TaskKind::ImageOnly, TaskKind::TextOnly];

    pub fn slot(self) -> usize {
        match self {
            TaskKind::Joint => 0,
            TaskKind::ImageOnly => 1,
            TaskKind::TextOnly => 2,
        }
    }

    fn permits(self, modality: Modality) -> bool {
        match self {
            TaskKind::Joint => true,
            TaskKind::ImageOnly => modality == Modality::Image,
            TaskKind::TextOnly => modality == Modality::Text,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint" => Some(TaskKind::Joint),
            "image-only" | "image_only" => Some(TaskKind::ImageOnly),
            "text-only" | "text_only" => Some(TaskKind::TextOnly),
            _ => None,
        }
    }
}

/// Square mask; blocked entries carry the negative-infinity sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn allow_all(size: usize) -> Self {
        Self {
            size,
            blocked: vec![false; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size + j]
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    /// `0` where allowed, negative infinity where prohibited.
    pub fn entry<T: Scalar>(&self, i: usize, j: usize) -> T {
        if self.is_blocked(i, j) {
            T::neg_infinity()
        } else {
            T::zero()
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .blocked
            .iter()
            .map(|&b| if b { T::neg_infinity() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square mask")
    }

    /// `.` allowed, `X` prohibited, one line per row, preceded by a tag legend.
    pub fn render(&self, tags: &[ModalityTag]) -> String {
        let mut out = String::new();
        let legend: Vec<&str> = tags.iter().map(|t| t.short()).collect();
        let _ = writeln!(out, "tags {}", legend.join(" "));
        for i in 0..self.size {
            let line: String = (0..self.size)
                .map(|j| if self.is_blocked(i, j) { 'X' } else { '.' })
                .collect();
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

/// A pair `(i, j)` may interact iff `i == j` or both tokens are permitted by
/// the task and neither belongs to the dropped modality.
pub fn build_mask(tags: &[ModalityTag], task: TaskKind, dropped: Option<Modality>) -> AttentionMask {
    let permitted: Vec<bool> = tags
        .iter()
        .map(|t| {
            let m = t.modality();
            task.permits(m) && dropped != Some(m)
        })
        .collect();
    let size = tags.len();
    let mut blocked = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            blocked[i * size + j] = i != j && !(permitted[i] && permitted[j]);
        }
    }
    AttentionMask { size, blocked }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            n_heads: 4,
            n_layers: 2,
            d_ff: 4 * 768,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FmtError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            query: Affine::new(store, &format!("{name}.query"), d_model, d_model, rng),
            key: Affine::new(store, &format!("{name}.key"), d_model, d_model, rng),
            value: Affine::new(store, &format!("{name}.value"), d_model, d_model, rng),
            output: Affine::new(store, &format!("{name}.output"), d_model, d_model, rng),
            n_heads,
        }
    }

    /// Masked scaled dot-product attention. Returns the projected output and
    /// the post-softmax weights of every head.
    pub fn forward_with_weights<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        x: Var<'t, T>,
        mask: &AttentionMask,
    ) -> Result<(Var<'t, T>, Vec<Tensor<T>>)> {
        let (l, d) = x.value().dims2()?;
        if mask.size() != l {
            return Err(FmtError::dim("attention mask", &[mask.size(), mask.size()], &[l, d]));
        }
        let d_head = d / self.n_heads;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let scale = T::one() / T::from_count(d_head).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (a, b) = (h * d_head, (h + 1) * d_head);
            let qh = q.slice_cols(a, b)?;
            let kh = k.slice_cols(a, b)?;
            let vh = v.slice_cols(a, b)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(scale).add_mask(mask.blocked())?;
            let w = scores.softmax_rows()?;
            weights.push(w.value());
            heads.push(w.matmul(vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat_cols(&heads)?
        };
        Ok((self.output.forward(g, joined)?, weights))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        x: Var<'t, T>,
        mask: &AttentionMask,
    ) -> Result<Var<'t, T>> {
        self.forward_with_weights(g, x, mask).map(|(out, _)| out)
    }
}

/// Post-norm block: attention, residual, norm; feed-forward, residual, norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub feed_forward: Mlp,
    pub norm2: LayerNormParams,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, rng),
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), cfg.d_model),
            feed_forward: Mlp::new(
                store,
                &format!("{name}.ffn"),
                &[cfg.d_model, cfg.d_ff, cfg.d_model],
                &[Activation::Gelu, Activation::Identity],
                rng,
            ),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), cfg.d_model),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        x: Var<'t, T>,
        mask: &AttentionMask,
    ) -> Result<Var<'t, T>> {
        let attended = self.attention.forward(g, x, mask)?;
        let h = self.norm1.forward(g, x.add(attended)?)?;
        let ff = self.feed_forward.forward(g, h)?;
        self.norm2.forward(g, h.add(ff)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.{i}"), &config, rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        x: Var<'t, T>,
        mask: &AttentionMask,
    ) -> Result<Var<'t, T>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (_, width) = h.value().dims2()?;
            if width != self.config.d_model {
                return Err(FmtError::Layer {
                    layer: i,
                    source: Box::new(FmtError::dim("encoder input", &h.shape(), &[self.config.d_model])),
                });
            }
            h = layer.forward(g, h, mask).map_err(|e| FmtError::Layer {
                layer: i,
                source: Box::new(e),
            })?;
        }
        Ok(h)
    }
}

/// Training-time modality removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_drop: f64,
    pub rng_seed: u64,
}

/// Draw number `draw_index` of the policy's stream. Only records that carry
/// both modalities are ever degraded, and never to nothing.
pub fn sample_dropout(policy: &DropoutPolicy, draw_index: u64, has_image: bool, has_text: bool) -> Option<Modality> {
    if !(has_image && has_text) || policy.p_drop <= 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    rng.set_stream(draw_index);
    let u: f64 = rng.random();
    if u >= policy.p_drop {
        return None;
    }
    if rng.random::<bool>() {
        Some(Modality::Image)
    } else {
        Some(Modality::Text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ModalityTag::*;

    const TAGS: [ModalityTag; 4] = [ImageCls, Image, TextCls, Text];

    #[test]
    fn joint_mask_allows_everything() {
        let m = build_mask(&TAGS, TaskKind::Joint, None);
        assert_eq!(m, AttentionMask::allow_all(4));
        assert!(m.to_tensor::<f64>().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn image_only_blocks_text_except_diagonal() {
        let m = build_mask(&TAGS, TaskKind::ImageOnly, None);
        for i in 0..4 {
            for j in 0..4 {
                let expect_blocked = i != j && (i >= 2 || j >= 2);
                assert_eq!(m.is_blocked(i, j), expect_blocked, "({i},{j})");
            }
        }
        assert_eq!(m.entry::<f64>(2, 3), f64::NEG_INFINITY);
        assert_eq!(m.entry::<f64>(3, 3), 0.0);
    }

    #[test]
    fn dropped_text_equals_image_only() {
        assert_eq!(
            build_mask(&TAGS, TaskKind::Joint, Some(Modality::Text)),
            build_mask(&TAGS, TaskKind::ImageOnly, None)
        );
        assert_eq!(
            build_mask(&TAGS, TaskKind::Joint, Some(Modality::Image)),
            build_mask(&TAGS, TaskKind::TextOnly, None)
        );
    }

    #[test]
    fn render_grid() {
        let m = build_mask(&TAGS, TaskKind::ImageOnly, None);
        assert_eq!(m.render(&TAGS), "tags IC I TC T\n..XX\n..XX\nXX.X\nXXX.\n");
    }

    #[test]
    fn dropout_never_drops_with_zero_probability() {
        let p = DropoutPolicy { p_drop: 0.0, rng_seed: 1 };
        assert!((0..1000).all(|i| sample_dropout(&p, i, true, true).is_none()));
    }

    #[test]
    fn dropout_skips_degraded_records() {
        let p = DropoutPolicy { p_drop: 1.0, rng_seed: 1 };
        assert!((0..1000).all(|i| sample_dropout(&p, i, true, false).is_none()));
        assert!((0..1000).all(|i| sample_dropout(&p, i, false, true).is_none()));
    }

    #[test]
    fn dropout_is_balanced_at_full_probability() {
        let p = DropoutPolicy { p_drop: 1.0, rng_seed: 42 };
        let n = 10_000u64;
        let images = (0..n)
            .filter(|&i| sample_dropout(&p, i, true, true) == Some(Modality::Image))
            .count() as f64;
        // binomial(10000, 0.5): sigma = 50
        assert!((images - 5000.0).abs() <= 150.0, "{images}");
        assert_eq!(sample_dropout(&p, 17, true, true), sample_dropout(&p, 17, true, true));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let x = tape.constant(Tensor::from_f64(vec![1, 4], &[0.3, -1.0, 2.0, 0.5]).unwrap());
        let (out, weights) = mha.forward_with_weights(&g, x, &AttentionMask::allow_all(1)).unwrap();
        assert!(weights.iter().all(|w| w.data() == [1.0]));
        // weights are exactly one, so the output is V projected by the output map
        let v = mha.value.forward(&g, x).unwrap();
        let expected = mha.output.forward(&g, v).unwrap().value();
        assert_eq!(out.value(), expected);
    }

    #[test]
    fn equal_scores_average_values() {
        // identity projections, keys identical -> equal scores
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mha = MultiHeadAttention::new(&mut store, "a", 2, 1, &mut rng);
        for aff in [mha.query, mha.value, mha.output] {
            store.set(aff.weight, Tensor::identity(2)).unwrap();
        }
        store.set(mha.key.weight, Tensor::zeros(vec![2, 2])).unwrap();
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap());
        let out = mha.forward(&g, x, &AttentionMask::allow_all(2)).unwrap().value();
        for i in 0..2 {
            assert!((out.get2(i, 0) - 2.0).abs() < 1e-15);
            assert!((out.get2(i, 1) + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_layers_is_passthrough() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig { d_model: 4, n_heads: 2, n_layers: 0, d_ff: 8 };
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let x = Tensor::from_f64(vec![2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.5, 9.0]).unwrap();
        let out = enc.forward(&g, tape.constant(x.clone()), &AttentionMask::allow_all(2)).unwrap();
        assert_eq!(out.value(), x);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = EncoderConfig { d_model: 6, n_heads: 4, n_layers: 1, d_ff: 8 };
        assert!(matches!(cfg.validate(), Err(FmtError::Config(_))));
    }

    #[test]
    fn encoder_reports_layer_of_dimension_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig { d_model: 4, n_heads: 2, n_layers: 2, d_ff: 8 };
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = enc.forward(&g, x, &AttentionMask::allow_all(2)).unwrap_err();
        assert!(matches!(err, FmtError::Layer { layer: 0, .. }), "{err}");
    }
}
