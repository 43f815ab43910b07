//! Mini-batch training with modality dropout, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Record;
use crate::embedding::Modality;
use crate::encoder::{sample_dropout, DropoutPolicy};
use crate::error::{FmtError, Result};
use crate::metrics::ConfusionCounts;
use crate::model::FmtModel;
use crate::optim::AdamState;
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub seed: u64,
    pub aux_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            p_drop: 0.3,
            seed: 0,
            aux_loss_weight: 0.0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FmtError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FmtError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FmtError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(FmtError::Config(format!("p_drop must lie in [0, 1], got {}", self.p_drop)));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(FmtError::Config("aux_loss_weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn dropout_policy(&self) -> DropoutPolicy {
        DropoutPolicy {
            p_drop: self.p_drop,
            rng_seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar = f64> {
    /// Mean sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub adam: AdamState<T>,
}

/// Loss of one sample and its parameter gradients.
pub fn sample_gradients<T: Scalar>(
    model: &FmtModel<T>,
    record: &Record,
    dropped: Option<Modality>,
    aux_loss_weight: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let g = Graph::trainable(&tape, &model.store);
    let out = model.forward(&g, record, dropped, aux_loss_weight > 0.0)?;
    let mut loss = out.probs.cross_entropy(record.label)?;
    if !out.aux_probs.is_empty() {
        let mut aux = out.aux_probs[0].cross_entropy(record.label)?;
        for p in &out.aux_probs[1..] {
            aux = aux.add(p.cross_entropy(record.label)?)?;
        }
        let w = aux_loss_weight / out.aux_probs.len() as f64;
        loss = loss.add(aux.scale(T::lit(w)))?;
    }
    let value = loss.value().data()[0].to_f64_lossless();
    Ok((value, g.backward(loss)?))
}

/// Trains `model` in place. Per-sample gradients of a batch are computed
/// concurrently against the frozen parameters and summed in batch order,
/// so results do not depend on the thread count.
pub fn train<T: Scalar>(model: &mut FmtModel<T>, dataset: &[Record], config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(FmtError::Config("training set is empty".into()));
    }
    for r in dataset {
        model.check_record(r)?;
    }
    let policy = config.dropout_policy();
    let mut adam = AdamState::new(model.store.tensors(), T::lit(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut draw = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let jobs: Vec<(usize, Option<Modality>)> = batch
                .iter()
                .map(|&i| {
                    let r = &dataset[i];
                    let d = sample_dropout(&policy, draw, r.has_image, r.has_text);
                    draw += 1;
                    (i, d)
                })
                .collect();
            let results: Vec<(f64, Vec<Tensor<T>>)> = jobs
                .par_iter()
                .map(|&(i, d)| sample_gradients(model, &dataset[i], d, config.aux_loss_weight))
                .collect::<Result<_>>()?;
            let mut sum: Vec<Tensor<T>> =
                model.store.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            for (loss, grads) in &results {
                total += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let inv = T::one() / T::from_count(batch.len());
            for acc in &mut sum {
                for a in acc.data_mut() {
                    *a *= inv;
                }
            }
            adam.step(model.store.tensors_mut(), &sum)?;
        }
        epoch_losses.push(total / dataset.len() as f64);
    }
    Ok(TrainOutcome { epoch_losses, adam })
}

/// Predicted class per record, evaluated in parallel.
pub fn predictions<T: Scalar>(model: &FmtModel<T>, records: &[Record], forced_drop: Option<Modality>) -> Result<Vec<usize>> {
    records.par_iter().map(|r| model.predict(r, forced_drop)).collect()
}

pub fn predictions_sequential<T: Scalar>(
    model: &FmtModel<T>,
    records: &[Record],
    forced_drop: Option<Modality>,
) -> Result<Vec<usize>> {
    records.iter().map(|r| model.predict(r, forced_drop)).collect()
}

/// One-vs-rest confusion counts of the model's argmax predictions.
pub fn evaluate<T: Scalar>(model: &FmtModel<T>, records: &[Record], forced_drop: Option<Modality>) -> Result<ConfusionCounts> {
    let preds = predictions(model, records, forced_drop)?;
    Ok(ConfusionCounts::from_pairs(preds.into_iter().zip(records.iter().map(|r| r.label))))
}

/// Fraction of exactly correct predictions, for any number of classes.
pub fn accuracy_of<T: Scalar>(model: &FmtModel<T>, records: &[Record], forced_drop: Option<Modality>) -> Result<f64> {
    if records.is_empty() {
        return Err(FmtError::UndefinedMetric("accuracy over zero samples"));
    }
    let preds = predictions(model, records, forced_drop)?;
    let hits = preds.iter().zip(records).filter(|(p, r)| **p == r.label).count();
    Ok(hits as f64 / records.len() as f64)
}
