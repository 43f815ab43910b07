//! The full model: embedding, three masked encoder passes, fusion and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::Record;
use crate::embedding::{assemble, ConvConfig, ImageProjector, Modality, ModalityTag, MultimodalSequence, TextEmbedder};
use crate::encoder::{build_mask, Encoder, EncoderConfig, TaskKind};
use crate::error::{FmtError, Result};
use crate::moe::{ExpertStack, FusionLayer, GatingGru, TASK_SLOTS};
use crate::nn::{learned_vector, Activation, Affine};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Model family used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// All three task passes, fusion, expert cascade and GRU gate.
    Full,
    /// Image-only pass, fusion row, direct classifier.
    ImageOnly,
    /// Text-only pass, fusion row, direct classifier.
    TextOnly,
    /// All three task passes and fusion, then a direct classifier on the
    /// mean fused row.
    FusionNoStack,
}

impl Variant {
    pub fn tasks(self) -> &'static [TaskKind] {
        match self {
            Variant::Full | Variant::FusionNoStack => &TaskKind::ALL,
            Variant::ImageOnly => &[TaskKind::ImageOnly],
            Variant::TextOnly => &[TaskKind::TextOnly],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmtConfig {
    pub vocab: usize,
    pub max_text_len: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub conv: ConvConfig,
    /// Widths of the three fusion layers; the last is the expert and GRU width.
    pub fusion_widths: [usize; 3],
    pub n_experts: usize,
    pub n_expert_layers: usize,
    pub variant: Variant,
    pub init_seed: u64,
}

impl Default for FmtConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            max_text_len: 16,
            num_classes: 2,
            encoder: EncoderConfig::default(),
            conv: ConvConfig::default(),
            fusion_widths: [512, 256, 128],
            n_experts: 4,
            n_expert_layers: 3,
            variant: Variant::Full,
            init_seed: 0,
        }
    }
}

impl FmtConfig {
    /// Smallest configuration that still exercises every component.
    pub fn tiny() -> Self {
        Self {
            vocab: 12,
            max_text_len: 5,
            encoder: EncoderConfig {
                d_model: 32,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
            },
            conv: ConvConfig {
                channels: 1,
                ..ConvConfig::default()
            },
            fusion_widths: [16, 8, 8],
            n_experts: 2,
            ..Self::default()
        }
    }

    /// Laptop-sized configuration used for training runs.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                d_model: 32,
                n_heads: 2,
                n_layers: 1,
                d_ff: 64,
            },
            conv: ConvConfig {
                channels: 2,
                ..ConvConfig::default()
            },
            fusion_widths: [128, 64, 32],
            n_experts: 4,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Sequence positions: two CLS tokens, at most one image token, text.
    pub fn max_positions(&self) -> usize {
        self.max_text_len + 3
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.n_layers == 0 {
            return Err(FmtError::Config("n_layers must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(FmtError::Config("num_classes must be at least 2".into()));
        }
        if self.n_experts == 0 || self.n_expert_layers == 0 {
            return Err(FmtError::Config("expert counts must be positive".into()));
        }
        if self.fusion_widths.contains(&0) || self.vocab == 0 {
            return Err(FmtError::Config("widths and vocab must be positive".into()));
        }
        if self.conv.kernel > self.conv.side || self.conv.pool == 0 || self.conv.feature_dim() == 0 {
            return Err(FmtError::Config("convolution geometry leaves no features".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Stacked { stack: ExpertStack, gate: GatingGru },
    Direct(Affine),
}

#[derive(Debug, Clone)]
pub struct FmtModel<T: Scalar = f64> {
    pub config: FmtConfig,
    pub store: ParamStore<T>,
    pub text: TextEmbedder,
    pub image: ImageProjector,
    pub cls_image: ParamId,
    pub cls_text: ParamId,
    pub encoder: Encoder,
    pub fusion: FusionLayer,
    pub head: Head,
    /// Per-slot auxiliary classifiers on fused task rows.
    pub aux: [Affine; TASK_SLOTS],
}

/// Everything one forward pass produces.
pub struct ForwardOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub probs: Var<'t, T>,
    pub fused: Var<'t, T>,
    pub slot_present: [bool; TASK_SLOTS],
    pub aux_probs: Vec<Var<'t, T>>,
}

impl<T: Scalar> FmtModel<T> {
    pub fn new(config: FmtConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.encoder.d_model;
        let text = TextEmbedder::new(&mut store, config.vocab, config.max_positions(), d, &mut rng);
        let image = ImageProjector::new(&mut store, config.conv, d, &mut rng);
        let cls_image = learned_vector(&mut store, "cls.image", d, 0.1, &mut rng);
        let cls_text = learned_vector(&mut store, "cls.text", d, 0.1, &mut rng);
        let encoder = Encoder::new(&mut store, config.encoder, &mut rng)?;
        let fusion = FusionLayer::new(&mut store, d, config.fusion_widths, Activation::Gelu, &mut rng);
        let w = config.fusion_widths[2];
        let head = match config.variant {
            Variant::Full => Head::Stacked {
                stack: ExpertStack::new(&mut store, config.n_expert_layers, config.n_experts, w, &mut rng),
                gate: GatingGru::new(&mut store, w, w, config.num_classes, &mut rng),
            },
            _ => Head::Direct(Affine::new(&mut store, "direct.readout", w, config.num_classes, &mut rng)),
        };
        let aux = std::array::from_fn(|i| Affine::new(&mut store, &format!("aux.{i}"), w, config.num_classes, &mut rng));
        Ok(Self {
            config,
            store,
            text,
            image,
            cls_image,
            cls_text,
            encoder,
            fusion,
            head,
            aux,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Checks that the record fits this model's vocabulary and geometry.
    pub fn check_record(&self, r: &Record) -> Result<()> {
        let bad = |msg: String| Err(FmtError::Validation { id: r.id.clone(), msg });
        if r.label >= self.config.num_classes {
            return bad(format!("label {} outside {} classes", r.label, self.config.num_classes));
        }
        self.check_input(r)
    }

    /// Like [`Self::check_record`] but ignores the label.
    pub fn check_input(&self, r: &Record) -> Result<()> {
        let bad = |msg: String| Err(FmtError::Validation { id: r.id.clone(), msg });
        if let Some(img) = &r.image {
            if img.len() != self.image.input_dim {
                return bad(format!("image length {} but model expects {}", img.len(), self.image.input_dim));
            }
        }
        if let Some(text) = &r.text {
            if text.len() > self.config.max_text_len {
                return bad(format!("text length {} exceeds {}", text.len(), self.config.max_text_len));
            }
            if let Some(t) = text.iter().find(|&&t| t >= self.config.vocab) {
                return bad(format!("token {t} outside vocabulary {}", self.config.vocab));
            }
        }
        Ok(())
    }

    /// Builds the composite token sequence of a record.
    pub fn embed<'t>(&self, g: &Graph<'t, '_, T>, r: &Record) -> Result<MultimodalSequence<'t, T>> {
        let d = self.config.encoder.d_model;
        let image_tokens = match &r.image {
            Some(img) => {
                let t = Tensor::new(vec![img.len()], img.iter().map(|&v| T::lit(v)).collect())?;
                self.image.project_image(g, &t)?
            }
            None => g.constant(Tensor::zeros(vec![0, d])),
        };
        let n_img = image_tokens.value().dims2()?.0;
        let text_tokens = match &r.text {
            Some(tokens) => {
                let segments = vec![0; tokens.len()];
                self.text.embed_text_at(g, tokens, &segments, 2 + n_img)?
            }
            None => g.constant(Tensor::zeros(vec![0, d])),
        };
        assemble(image_tokens, text_tokens, g.param(self.cls_image), g.param(self.cls_text))
    }

    /// Runs every task pass of a record. `dropped` hides one modality, as
    /// modality dropout does during training.
    pub fn forward<'t>(
        &self,
        g: &Graph<'t, '_, T>,
        r: &Record,
        dropped: Option<Modality>,
        with_aux: bool,
    ) -> Result<ForwardOutput<'t, T>> {
        self.check_input(r)?;
        let image_present = r.has_image && dropped != Some(Modality::Image);
        let text_present = r.has_text && dropped != Some(Modality::Text);
        let absent = match (image_present, text_present) {
            (true, false) => Some(Modality::Text),
            (false, true) => Some(Modality::Image),
            _ => None,
        };
        let mut slots: [Option<Var<'t, T>>; TASK_SLOTS] = [None; TASK_SLOTS];
        if image_present || text_present {
            let seq = self.embed(g, r)?;
            let icls = seq.index_of(ModalityTag::ImageCls).expect("layout");
            let tcls = seq.index_of(ModalityTag::TextCls).expect("layout");
            for &task in self.config.variant.tasks() {
                let cls_rows: Vec<usize> = match task {
                    TaskKind::Joint => [(image_present, icls), (text_present, tcls)]
                        .into_iter()
                        .filter_map(|(p, i)| p.then_some(i))
                        .collect(),
                    TaskKind::ImageOnly if image_present => vec![icls],
                    TaskKind::TextOnly if text_present => vec![tcls],
                    _ => continue,
                };
                let mask = build_mask(&seq.tags, task, absent);
                let encoded = self.encoder.forward(g, seq.embeddings, &mask)?;
                slots[task.slot()] = Some(encoded.select_rows(&cls_rows)?.mean_rows()?);
            }
        }
        let slot_present = slots.map(|s| s.is_some());
        let fused = self.fusion.fuse(g, &slots)?;
        let logits = match &self.head {
            Head::Stacked { stack, gate } => {
                let layers = stack.stack_forward(g, fused)?;
                gate.logits(g, &layers)?
            }
            Head::Direct(readout) => {
                let pooled = match self.config.variant {
                    Variant::ImageOnly => fused.select_rows(&[TaskKind::ImageOnly.slot()])?,
                    Variant::TextOnly => fused.select_rows(&[TaskKind::TextOnly.slot()])?,
                    _ => fused.mean_rows()?,
                };
                readout.forward(g, pooled)?
            }
        };
        let probs = logits.softmax_rows()?;
        let mut aux_probs = Vec::new();
        if with_aux {
            for (slot, present) in slot_present.iter().enumerate() {
                if *present {
                    let row = fused.select_rows(&[slot])?;
                    aux_probs.push(self.aux[slot].forward(g, row)?.softmax_rows()?);
                }
            }
        }
        Ok(ForwardOutput {
            logits,
            probs,
            fused,
            slot_present,
            aux_probs,
        })
    }

    /// Class probabilities with frozen parameters.
    pub fn predict_proba(&self, r: &Record, dropped: Option<Modality>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &self.store);
        Ok(self.forward(&g, r, dropped, false)?.probs.value())
    }

    /// Pre-softmax class scores with frozen parameters.
    pub fn predict_logits(&self, r: &Record, dropped: Option<Modality>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &self.store);
        Ok(self.forward(&g, r, dropped, false)?.logits.value())
    }

    /// Argmax of the probability row; ties go to the lowest class index.
    pub fn predict(&self, r: &Record, dropped: Option<Modality>) -> Result<usize> {
        Ok(self.predict_proba(r, dropped)?.argmax())
    }
}
