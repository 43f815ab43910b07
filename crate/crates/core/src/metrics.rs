//! Confusion counts and the accuracy / recall / precision / F1 family.
//!
//! The metric functions are generic over the number type, so the same
//! formulas can be evaluated in `f64` or exactly in a rational type.

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};

/// Label treated as the positive class.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Tallies `(prediction, label)` pairs one-vs-rest for [`POSITIVE_CLASS`].
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut c = Self::default();
        for (pred, label) in pairs {
            c.record(pred, label);
        }
        c
    }

    pub fn record(&mut self, pred: usize, label: usize) {
        match (pred == POSITIVE_CLASS, label == POSITIVE_CLASS) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn n(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn lift<T: FromPrimitive>(x: u64) -> T {
    T::from_u64(x).expect("count representable")
}

/// `(TP + TN) / N`.
pub fn accuracy<T: Num + FromPrimitive>(c: &ConfusionCounts) -> Result<T> {
    if c.n() == 0 {
        return Err(FmtError::UndefinedMetric("accuracy over zero samples"));
    }
    Ok(lift::<T>(c.tp + c.tn) / lift(c.n()))
}

/// `TP / (TP + FN)`.
pub fn recall<T: Num + FromPrimitive>(c: &ConfusionCounts) -> Result<T> {
    if c.tp + c.fn_ == 0 {
        return Err(FmtError::UndefinedMetric("recall without positive samples"));
    }
    Ok(lift::<T>(c.tp) / lift(c.tp + c.fn_))
}

/// `TP / (TP + FP)`.
pub fn precision<T: Num + FromPrimitive>(c: &ConfusionCounts) -> Result<T> {
    if c.tp + c.fp == 0 {
        return Err(FmtError::UndefinedMetric("precision without positive predictions"));
    }
    Ok(lift::<T>(c.tp) / lift(c.tp + c.fp))
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1<T: Num + FromPrimitive + Clone>(precision: T, recall: T) -> T {
    let sum = precision.clone() + recall.clone();
    if sum == T::zero() {
        return T::zero();
    }
    let two = T::one() + T::one();
    two * (precision * recall) / sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_name: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub n_eval: u64,
}

impl MetricReport {
    /// Precision with no positive predictions is reported as 0.
    pub fn from_counts(model_name: impl Into<String>, c: &ConfusionCounts) -> Result<Self> {
        let accuracy = accuracy::<f64>(c)?;
        let recall = recall::<f64>(c)?;
        let precision = precision::<f64>(c).unwrap_or(0.0);
        Ok(Self {
            model_name: model_name.into(),
            accuracy,
            recall,
            precision,
            f1: f1(precision, recall),
            n_eval: c.n(),
        })
    }

    pub const CSV_HEADER: &'static str = "model,accuracy,recall,f1,n_eval";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{}",
            self.model_name, self.accuracy, self.recall, self.f1, self.n_eval
        )
    }
}
