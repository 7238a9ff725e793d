use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use crate::autodiff::Tape;
use crate::bank::argmax;
use crate::data::LabeledSet;
use crate::losses::cross_entropy;
use crate::model::{Model, StatsMode, UpdateScope};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SourceConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of the pooled source data held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 64,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub first_batch_loss: f64,
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Frozen-statistics accuracy of `model` on `set`.
pub fn accuracy(model: &Model, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let (_, p) = model.predict(&set.inputs())?;
    let correct = (0..set.len()).filter(|&i| argmax(p.row(i)) == set.labels()[i]).count();
    Ok(correct as f64 / set.len() as f64)
}

/// Cross-entropy training on the pooled `sources` with batch statistics in
/// the normalization layers. Returns the checkpoint with the best held-out
/// accuracy (earliest epoch on ties).
pub fn train_source(mut model: Model, sources: &[LabeledSet], cfg: &SourceConfig) -> Result<(Model, TrainReport)> {
    if sources.is_empty() || sources.iter().any(LabeledSet::is_empty) {
        return Err(Error::invalid("source training needs nonempty source domains"));
    }
    if cfg.epochs == 0 || cfg.batch_size < 2 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("source training needs epochs ≥ 1, batch_size ≥ 2 and lr > 0"));
    }
    let c = model.num_classes();
    if let Some(bad) = sources.iter().flat_map(|s| s.labels()).find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let pooled = LabeledSet::concat(sources)?;
    let (train, val) = pooled.split(1.0 - cfg.val_fraction, cfg.seed)?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::invalid("not enough source samples for a train/validation split"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.parameters());
    let mut report = TrainReport {
        first_batch_loss: f64::NAN,
        epoch_loss: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Some(UpdateScope::All));
            let (_, p) = model.forward_on(&mut tape, &bound, &batch.inputs(), StatsMode::Refresh)?;
            let loss = cross_entropy(&mut tape, &p, batch.labels())?;
            let grads = tape.backward(&loss)?;
            let grads: Vec<Option<Vec<f64>>> = bound.iter().map(|b| grads.get(b).map(|g| g.into_values())).collect();
            adam_step(model.parameters_mut(), &grads, &mut state, cfg.lr)?;
            if report.first_batch_loss.is_nan() {
                report.first_batch_loss = loss.item();
            }
            total += loss.item();
            batches += 1;
        }
        report.epoch_loss.push(total / batches.max(1) as f64);
        let acc = accuracy(&model, &val)?;
        report.val_accuracy.push(acc);
        if acc > report.best_val_accuracy {
            report.best_val_accuracy = acc;
            report.best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok((best, report))
}
