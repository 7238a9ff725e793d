use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::adam::{adam_step, AdamState};
use crate::autodiff::{norm, Tape, Tensor};
use crate::bank::{argmax, knn, proto_classify, prototypes, MemoryBank};
use crate::data::StreamBatch;
use crate::losses::{consistency_mask, is_active, mslc_loss_batch, pl_loss, tent_entropy_loss, total_loss, tsd_loss, StoredNeighbor};
use crate::model::{Model, StatsMode, UpdateScope};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Ours,
    Erm,
    Bn,
    Tent,
    Pl,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Erm, Method::Bn, Method::Tent, Method::Pl, Method::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Erm => "erm",
            Method::Bn => "bn",
            Method::Tent => "tent",
            Method::Pl => "pl",
        }
    }

    fn is_gradient_based(self) -> bool {
        matches!(self, Method::Ours | Method::Tent | Method::Pl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Components of the full objective: self-distillation (`sd`), entropy
/// filtering of prototypes (`ef`), the consistency filter (`cf`) and local
/// clustering (`mslc`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub sd: bool,
    pub ef: bool,
    pub cf: bool,
    pub mslc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            sd: true,
            ef: true,
            cf: true,
            mslc: true,
        }
    }
}

impl Ablation {
    /// The four cumulative rungs, keyed `SD`, `SD+EF`, `SD+EF+CF`,
    /// `SD+EF+CF+MSLC`.
    pub fn ladder() -> [(&'static str, Ablation); 4] {
        let rung = |ef, cf, mslc| Ablation { sd: true, ef, cf, mslc };
        [
            ("SD", rung(false, false, false)),
            ("SD+EF", rung(true, false, false)),
            ("SD+EF+CF", rung(true, true, false)),
            ("SD+EF+CF+MSLC", rung(true, true, true)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sd && (self.ef || self.cf || self.mslc) {
            return Err(Error::invalid("ef, cf and mslc build on sd; enable sd first"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub method: Method,
    pub lr: f64,
    pub lambda: f64,
    pub k: usize,
    /// Entropy filter count; `None` disables the filter.
    pub m: Option<usize>,
    pub batch_size: usize,
    pub pl_threshold: f64,
    pub update_scope: UpdateScope,
    pub seed: u64,
    pub ablation: Ablation,
    /// Score each batch after its update instead of before.
    pub predict_after_update: bool,
    /// FIFO cap on stream entries in the bank.
    pub bank_cap: Option<usize>,
    /// Insert the batch into the bank before computing prototypes.
    pub insert_before_prototypes: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::Ours,
            lr: 1e-3,
            lambda: 0.1,
            k: 3,
            m: Some(20),
            batch_size: 64,
            pl_threshold: 0.9,
            update_scope: UpdateScope::All,
            seed: 0,
            ablation: Ablation::default(),
            predict_after_update: false,
            bank_cap: None,
            insert_before_prototypes: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.pl_threshold > 0.0 && self.pl_threshold < 1.0) {
            return Err(Error::invalid("pl_threshold must lie in (0, 1)"));
        }
        self.ablation.validate()
    }
}

/// Per-batch trace and totals of one adaptation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub per_batch_accuracy: Vec<f64>,
    pub per_batch_correct: Vec<usize>,
    pub per_batch_size: Vec<usize>,
    pub cumulative_accuracy: f64,
    pub per_batch_loss: Vec<f64>,
    pub per_batch_reliable: Vec<usize>,
    pub per_batch_bank_size: Vec<usize>,
    /// Batches without an optimizer step: nothing to learn from, a
    /// non-finite loss or gradient, or a batch too small for statistics.
    pub skipped_batches: usize,
    /// Subset of skipped batches caused by non-finite values.
    pub nonfinite_batches: usize,
    pub optimizer_steps: u64,
    pub predictions: Vec<Vec<usize>>,
}

impl Metrics {
    /// Running accuracy after each batch.
    pub fn cumulative_trace(&self) -> Vec<f64> {
        let (mut c, mut n) = (0usize, 0usize);
        self.per_batch_correct
            .iter()
            .zip(&self.per_batch_size)
            .map(|(bc, bs)| {
                c += bc;
                n += bs;
                c as f64 / n as f64
            })
            .collect()
    }

    fn record(&mut self, batch: &StreamBatch, preds: Vec<usize>) {
        let correct = batch.labels.correct(&preds);
        self.per_batch_correct.push(correct);
        self.per_batch_size.push(batch.len());
        self.per_batch_accuracy.push(correct as f64 / batch.len() as f64);
        self.predictions.push(preds);
    }
}

fn predictions(p: &Tensor) -> Vec<usize> {
    (0..p.rows()).map(|i| argmax(p.row(i))).collect()
}

enum Outcome {
    Loss { value: f64, reliable: usize },
    Idle { reliable: usize },
}

struct Runner<'a> {
    cfg: &'a AdaptConfig,
    state: AdamState,
    bank: Option<MemoryBank>,
}

impl Runner<'_> {
    /// Records the objective on `tape`; `None` when there is nothing to
    /// optimize for this batch.
    fn objective(&mut self, tape: &mut Tape, z: &Tensor, p: &Tensor) -> Result<(Option<Tensor>, usize)> {
        let b = p.rows();
        match self.cfg.method {
            Method::Tent => Ok((Some(tent_entropy_loss(tape, p)?), b)),
            Method::Pl => {
                let (loss, n) = pl_loss(tape, p, self.cfg.pl_threshold)?;
                Ok((is_active(&loss).then_some(loss), n))
            }
            Method::Ours => self.ours(tape, z, p),
            Method::Erm | Method::Bn => Ok((None, 0)),
        }
    }

    fn ours(&mut self, tape: &mut Tape, z: &Tensor, p: &Tensor) -> Result<(Option<Tensor>, usize)> {
        let cfg = self.cfg;
        let ab = cfg.ablation;
        let bank = self.bank.as_mut().expect("bank exists for ours");
        let (zv, pv) = (z.detach(), p.detach());
        let (b, c) = (pv.rows(), pv.cols());

        let mut own = Vec::new();
        if cfg.insert_before_prototypes {
            own = bank.insert_batch(&zv, &pv)?;
        }
        let protos = prototypes(bank, if ab.ef { cfg.m } else { None });
        if !cfg.insert_before_prototypes {
            own = bank.insert_batch(&zv, &pv)?;
        }
        if !ab.sd {
            return Ok((None, 0));
        }

        let mut y = Vec::with_capacity(b * c);
        let mut usable = vec![true; b];
        for i in 0..b {
            if norm(zv.row(i)) == 0.0 {
                usable[i] = false;
                y.extend(std::iter::repeat_n(1.0 / c as f64, c));
            } else {
                y.extend(proto_classify(zv.row(i), &protos)?);
            }
        }
        let y = Tensor::matrix(b, c, y)?;
        let mask: Vec<bool> = if ab.cf {
            consistency_mask(&pv, &y)?.into_iter().zip(&usable).map(|(m, u)| m && *u).collect()
        } else {
            usable
        };
        let reliable = mask.iter().filter(|&&m| m).count();
        let tsd = tsd_loss(tape, p, &y, &mask)?;

        let mslc = if ab.mslc && cfg.lambda > 0.0 {
            let lists: Vec<Vec<StoredNeighbor>> = (0..b)
                .map(|i| {
                    let exclude = HashSet::from([own[i]]);
                    knn(bank, zv.row(i), cfg.k, &exclude)
                        .into_iter()
                        .map(|n| StoredNeighbor {
                            z: &n.entry.z,
                            logits: &n.entry.p,
                        })
                        .collect()
                })
                .collect();
            mslc_loss_batch(tape, z, p, &lists)?
        } else {
            Tensor::scalar(0.0)
        };
        let total = total_loss(tape, &tsd, &mslc, cfg.lambda)?;
        Ok((is_active(&total).then_some(total), reliable))
    }

    fn gradient_update(&mut self, model: &mut Model, batch: &StreamBatch, scored: &mut Option<Vec<usize>>) -> Result<Outcome> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Some(self.cfg.update_scope));
        let (z, p) = model.forward_on(&mut tape, &bound, &batch.inputs, StatsMode::Frozen)?;
        if scored.is_none() {
            *scored = Some(predictions(&p));
        }
        let (loss, reliable) = self.objective(&mut tape, &z, &p)?;
        let Some(loss) = loss else {
            return Ok(Outcome::Idle { reliable });
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        let grads = tape.backward(&loss)?;
        let grads: Vec<Option<Vec<f64>>> = bound.iter().map(|t| grads.get(t).map(Tensor::into_values)).collect();
        adam_step(model.parameters_mut(), &grads, &mut self.state, self.cfg.lr)?;
        Ok(Outcome::Loss { value, reliable })
    }
}

/// Runs the online protocol over `stream`: for each batch, predict with
/// frozen statistics, score against the hidden labels, then apply the
/// method's single update. `model` holds the adapted state afterwards.
pub fn adapt_stream(model: &mut Model, stream: &[StreamBatch], cfg: &AdaptConfig) -> Result<Metrics> {
    cfg.validate()?;
    let bank = match cfg.method {
        Method::Ours => Some(MemoryBank::init_from_classifier(&model.head_weights())?.with_stream_cap(cfg.bank_cap)),
        _ => None,
    };
    let mut runner = Runner {
        cfg,
        state: AdamState::new(model.parameters()),
        bank,
    };
    let mut metrics = Metrics::default();
    for batch in stream {
        if batch.is_empty() {
            continue;
        }
        let mut scored = if cfg.predict_after_update {
            None
        } else {
            Some(predictions(&model.predict(&batch.inputs)?.1))
        };
        let (loss, reliable) = if cfg.method.is_gradient_based() {
            match runner.gradient_update(model, batch, &mut scored) {
                Ok(Outcome::Loss { value, reliable }) => (value, reliable),
                Ok(Outcome::Idle { reliable }) => {
                    metrics.skipped_batches += 1;
                    (0.0, reliable)
                }
                Err(Error::NonFinite(_)) => {
                    metrics.skipped_batches += 1;
                    metrics.nonfinite_batches += 1;
                    (f64::NAN, 0)
                }
                Err(e) => return Err(e),
            }
        } else {
            if cfg.method == Method::Bn {
                if batch.len() >= 2 {
                    model.update_norm_stats(&batch.inputs)?;
                } else {
                    metrics.skipped_batches += 1;
                }
            }
            (0.0, 0)
        };
        if cfg.predict_after_update {
            scored = Some(predictions(&model.predict(&batch.inputs)?.1));
        }
        metrics.record(batch, scored.expect("predictions recorded"));
        metrics.per_batch_loss.push(loss);
        metrics.per_batch_reliable.push(reliable);
        metrics.per_batch_bank_size.push(runner.bank.as_ref().map_or(0, MemoryBank::len));
    }
    let seen: usize = metrics.per_batch_size.iter().sum();
    let correct: usize = metrics.per_batch_correct.iter().sum();
    metrics.cumulative_accuracy = if seen == 0 { 0.0 } else { correct as f64 / seen as f64 };
    metrics.optimizer_steps = runner.state.t;
    Ok(metrics)
}
