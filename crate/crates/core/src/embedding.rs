//! Turning a record into the composite token sequence
//! `[ImageCls, Image.., TextCls, Text..]`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{FmtError, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{normal, xavier, Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    ImageCls,
    Image,
    TextCls,
    Text,
}

impl ModalityTag {
    pub fn modality(self) -> Modality {
        match self {
            ModalityTag::ImageCls | ModalityTag::Image => Modality::Image,
            ModalityTag::TextCls | ModalityTag::Text => Modality::Text,
        }
    }

    pub fn is_cls(self) -> bool {
        matches!(self, ModalityTag::ImageCls | ModalityTag::TextCls)
    }

    pub fn short(self) -> &'static str {
        match self {
            ModalityTag::ImageCls => "IC",
            ModalityTag::Image => "I",
            ModalityTag::TextCls => "TC",
            ModalityTag::Text => "T",
        }
    }
}

/// Sum of word, segment and position embeddings.
#[derive(Debug, Clone, Copy)]
pub struct TextEmbedder {
    pub word: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub vocab: usize,
    pub max_len: usize,
    pub d_model: usize,
}

pub const SEGMENTS: usize = 2;

impl TextEmbedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab: usize,
        max_len: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            word: store.add("text.word", normal(rng, vec![vocab, d_model], 0.1)),
            segment: store.add("text.segment", normal(rng, vec![SEGMENTS, d_model], 0.1)),
            position: store.add("text.position", normal(rng, vec![max_len, d_model], 0.1)),
            vocab,
            max_len,
            d_model,
        }
    }

    /// Row `i` is `word[token_i] + segment[segment_i] + position[i]`.
    pub fn embed_text<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        token_ids: &[usize],
        segment_ids: &[usize],
    ) -> Result<Var<'t, T>> {
        self.embed_text_at(g, token_ids, segment_ids, 0)
    }

    /// Like [`TextEmbedder::embed_text`] with positions starting at `offset`.
    pub fn embed_text_at<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        token_ids: &[usize],
        segment_ids: &[usize],
        offset: usize,
    ) -> Result<Var<'t, T>> {
        if token_ids.len() != segment_ids.len() {
            return Err(FmtError::dim("embed_text", &[token_ids.len()], &[segment_ids.len()]));
        }
        check_ids("word", token_ids, self.vocab)?;
        check_ids("segment", segment_ids, SEGMENTS)?;
        let positions: Vec<usize> = (offset..offset + token_ids.len()).collect();
        check_ids("position", &positions, self.max_len)?;
        let words = g.param(self.word).select_rows(token_ids)?;
        let segments = g.param(self.segment).select_rows(segment_ids)?;
        let pos = g.param(self.position).select_rows(&positions)?;
        words.add(segments)?.add(pos)
    }
}

fn check_ids(table: &'static str, ids: &[usize], limit: usize) -> Result<()> {
    match ids.iter().position(|&id| id >= limit) {
        Some(index) => Err(FmtError::Vocabulary {
            table,
            id: ids[index],
            index,
            limit,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    /// Images are `side×side` grayscale grids.
    pub side: usize,
    pub kernel: usize,
    pub channels: usize,
    pub pool: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            side: 16,
            kernel: 3,
            channels: 4,
            pool: 2,
        }
    }
}

impl ConvConfig {
    pub fn input_dim(&self) -> usize {
        self.side * self.side
    }

    fn conv_side(&self) -> usize {
        self.side + 1 - self.kernel
    }

    fn pooled_side(&self) -> usize {
        self.conv_side() / self.pool
    }

    pub fn feature_dim(&self) -> usize {
        self.pooled_side() * self.pooled_side() * self.channels
    }
}

/// One valid convolution with `channels` filters, GELU, then average pooling.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    pub config: ConvConfig,
    pub kernel: ParamId,
    pub bias: ParamId,
    patch_index: Vec<usize>,
    pool_matrix: Vec<f64>,
}

impl ConvBackbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ConvConfig, rng: &mut ChaCha8Rng) -> Self {
        let k2 = config.kernel * config.kernel;
        let kernel = store.add("image.conv.kernel", xavier(rng, k2, config.channels));
        let bias = store.add("image.conv.bias", Tensor::zeros(vec![config.channels]));
        let cs = config.conv_side();
        let mut patch_index = Vec::with_capacity(cs * cs * k2);
        for r in 0..cs {
            for c in 0..cs {
                for dr in 0..config.kernel {
                    for dc in 0..config.kernel {
                        patch_index.push((r + dr) * config.side + c + dc);
                    }
                }
            }
        }
        let ps = config.pooled_side();
        let inv = 1.0 / (config.pool * config.pool) as f64;
        let mut pool_matrix = vec![0.0; ps * ps * cs * cs];
        for pr in 0..ps {
            for pc in 0..ps {
                let row = pr * ps + pc;
                for dr in 0..config.pool {
                    for dc in 0..config.pool {
                        let src = (pr * config.pool + dr) * cs + pc * config.pool + dc;
                        pool_matrix[row * cs * cs + src] = inv;
                    }
                }
            }
        }
        Self {
            config,
            kernel,
            bias,
            patch_index,
            pool_matrix,
        }
    }

    /// `image: 1×side²` to `1×feature_dim`.
    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, '_, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = self.config;
        let cs = cfg.conv_side();
        let ps = cfg.pooled_side();
        let patches = image.gather(self.patch_index.clone(), vec![cs * cs, cfg.kernel * cfg.kernel])?;
        let conv = patches
            .matmul(g.param(self.kernel))?
            .add_bias(g.param(self.bias))?
            .gelu();
        let pool = g.constant(Tensor::from_f64(vec![ps * ps, cs * cs], &self.pool_matrix)?);
        pool.matmul(conv)?.reshape(vec![1, cfg.feature_dim()])
    }
}

/// Image feature vector to a single `1×d_model` token.
#[derive(Debug, Clone)]
pub struct ImageProjector {
    pub backbone: Option<ConvBackbone>,
    pub mlp: Mlp,
    pub input_dim: usize,
}

impl ImageProjector {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        conv: ConvConfig,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let backbone = ConvBackbone::new(store, conv, rng);
        let widths = [conv.feature_dim(), d_model, d_model, d_model];
        let mlp = Mlp::new(store, "image.mlp", &widths, &[Activation::Gelu; 3], rng);
        Self {
            backbone: Some(backbone),
            mlp,
            input_dim: conv.input_dim(),
        }
    }

    /// Perceptron only: `widths = [D_img, h1, h2, d_model]`.
    pub fn without_backbone<T: Scalar>(
        store: &mut ParamStore<T>,
        widths: [usize; 4],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mlp = Mlp::new(store, "image.mlp", &widths, &[activation; 3], rng);
        Self {
            backbone: None,
            mlp,
            input_dim: widths[0],
        }
    }

    pub fn d_model(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn project_image<'t, T: Scalar>(
        &self,
        g: &Graph<'t, '_, T>,
        features: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        if features.len() != self.input_dim {
            return Err(FmtError::dim("project_image", features.shape(), &[self.input_dim]));
        }
        let x = g.constant(features.clone().reshape(vec![1, self.input_dim])?);
        let h = match &self.backbone {
            Some(b) => b.forward(g, x)?,
            None => x,
        };
        self.mlp.forward(g, h)
    }
}

/// Embedded tokens plus their modality tags.
#[derive(Debug, Clone)]
pub struct MultimodalSequence<'t, T: Scalar = f64> {
    pub embeddings: Var<'t, T>,
    pub tags: Vec<ModalityTag>,
}

impl<'t, T: Scalar> MultimodalSequence<'t, T> {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index_of(&self, tag: ModalityTag) -> Option<usize> {
        self.tags.iter().position(|&t| t == tag)
    }
}

/// Lays out `[cls_image, image_tokens.., cls_text, text_tokens..]`.
pub fn assemble<'t, T: Scalar>(
    image_tokens: Var<'t, T>,
    text_tokens: Var<'t, T>,
    cls_image: Var<'t, T>,
    cls_text: Var<'t, T>,
) -> Result<MultimodalSequence<'t, T>> {
    let (n_img, wi) = image_tokens.value().dims2()?;
    let (n_txt, wt) = text_tokens.value().dims2()?;
    let ci = cls_image.value();
    let ct = cls_text.value();
    let d = ci.len();
    for (w, shape) in [(wi, image_tokens.shape()), (wt, text_tokens.shape()), (ct.len(), ct.shape().to_vec())] {
        if w != d {
            return Err(FmtError::dim("assemble", &[d], &shape));
        }
    }
    let ci = cls_image.reshape(vec![1, d])?;
    let ct = cls_text.reshape(vec![1, d])?;
    let embeddings = Var::concat_rows(&[ci, image_tokens, ct, text_tokens])?;
    let mut tags = Vec::with_capacity(2 + n_img + n_txt);
    tags.push(ModalityTag::ImageCls);
    tags.extend(std::iter::repeat_n(ModalityTag::Image, n_img));
    tags.push(ModalityTag::TextCls);
    tags.extend(std::iter::repeat_n(ModalityTag::Text, n_txt));
    Ok(MultimodalSequence { embeddings, tags })
}
