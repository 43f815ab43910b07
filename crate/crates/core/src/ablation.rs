//! Trains the full model and its degraded variants on one shared split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{split, Record, SplitSpec};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{FmtConfig, FmtModel, Variant};
use crate::train::{evaluate, train, TrainConfig};

/// Published comparison figures as `(model, accuracy, recall, f1)`. They are
/// shown next to measured rows for orientation and are never asserted.
pub const REFERENCE_ROWS: [(&str, f64, f64, f64); 8] = [
    ("FMT", 0.94, 0.95, 0.93),
    ("ResNet", 0.89, 0.91, 0.86),
    ("BERT", 0.79, 0.85, 0.84),
    ("TextCNN", 0.88, 0.91, 0.86),
    ("RoBERTa", 0.81, 0.86, 0.85),
    ("BERT+ResNe-Without-CNN", 0.88, 0.86, 0.84),
    ("BERT+ResNet-NN", 0.89, 0.90, 0.84),
    ("CheXMed", 0.90, 0.91, 0.92),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Measured,
    Reference,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Measured => "measured",
            Source::Reference => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent for reference rows.
    pub n_eval: Option<u64>,
    pub source: Source,
}

/// One ablation arm: a model family plus its dropout probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arm {
    pub name: &'static str,
    pub variant: Variant,
    pub p_drop: f64,
}

pub const ARMS: [Arm; 5] = [
    Arm { name: "FMT", variant: Variant::Full, p_drop: 0.3 },
    Arm { name: "image-only", variant: Variant::ImageOnly, p_drop: 0.3 },
    Arm { name: "text-only", variant: Variant::TextOnly, p_drop: 0.3 },
    Arm { name: "fusion-no-stack", variant: Variant::FusionNoStack, p_drop: 0.3 },
    Arm { name: "no-masking", variant: Variant::Full, p_drop: 0.0 },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub model: FmtConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl AblationConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            model: FmtConfig::desk(),
            train: TrainConfig::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates a single arm on a fixed split.
pub fn run_arm(arm: &Arm, train_set: &[Record], test_set: &[Record], cfg: &AblationConfig) -> Result<MetricReport> {
    let model_cfg = cfg.model.clone().with_variant(arm.variant).with_seed(cfg.seed);
    let mut model = FmtModel::<f64>::new(model_cfg)?;
    let tc = TrainConfig {
        p_drop: arm.p_drop,
        seed: cfg.seed,
        ..cfg.train
    };
    train(&mut model, train_set, &tc)?;
    let counts = evaluate(&model, test_set, None)?;
    MetricReport::from_counts(arm.name, &counts)
}

pub fn ablate(dataset: &[Record], cfg: &AblationConfig) -> Result<AblationReport> {
    let (train_set, test_set) = split(dataset, SplitSpec::new(cfg.seed))?;
    let mut rows = Vec::new();
    for arm in &ARMS {
        let r = run_arm(arm, &train_set, &test_set, cfg)?;
        rows.push(AblationRow {
            model: r.model_name,
            accuracy: r.accuracy,
            recall: r.recall,
            f1: r.f1,
            n_eval: Some(r.n_eval),
            source: Source::Measured,
        });
    }
    rows.extend(REFERENCE_ROWS.iter().map(|&(model, accuracy, recall, f1)| AblationRow {
        model: model.to_string(),
        accuracy,
        recall,
        f1,
        n_eval: None,
        source: Source::Reference,
    }));
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "model,accuracy,recall,f1,n_eval,source";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let n = r.n_eval.map(|n| n.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{},{}",
                r.model,
                r.accuracy,
                r.recall,
                r.f1,
                n,
                r.source.as_str()
            );
        }
        s
    }

    /// Human-readable table with the columns Model, Accuracy, Recall, F1
    /// (percentages). Reference rows are marked with `*`.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len() + 1).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "Model", "Accuracy", "Recall", "F1");
        for r in &self.rows {
            let name = match r.source {
                Source::Measured => r.model.clone(),
                Source::Reference => format!("{}*", r.model),
            };
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}",
                name,
                100.0 * r.accuracy,
                100.0 * r.recall,
                100.0 * r.f1
            );
        }
        s.push_str("* published reference figure, not reproduced here\n");
        s
    }

    pub fn measured(&self, model: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.source == Source::Measured && r.model == model)
    }
}
