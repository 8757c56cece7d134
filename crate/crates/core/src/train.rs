//! Mini-batch Adam training with step decay, L2, and early stopping on
//! validation MRR.

use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Catalog;
use crate::eval::{evaluate, EncodedExample, EvalError, DEFAULT_K};
use crate::model::{Model, ModelError, ModelParams, SideIndex};

/// Examples per gradient partial sum. Fixed so the reduction order does not
/// depend on the thread count.
const REDUCE_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    NoExamples,
    #[error("invalid training setting `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("training example {index} has an empty input or unknown target")]
    Unencodable { index: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub l2: f64,
    pub patience: usize,
    pub seed: u64,
    /// Share of the most recent training examples held out for early stopping.
    pub validation_fraction: f64,
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            learning_rate: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 3,
            l2: 1e-5,
            patience: 3,
            seed: 42,
            validation_fraction: 0.1,
            eval_k: DEFAULT_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key, reason: &str| {
            Err(TrainError::InvalidConfig {
                key,
                reason: reason.to_string(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor", "must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every", "must be at least 1");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2", "must be non-negative");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must lie in [0, 1)");
        }
        if self.eval_k == 0 {
            return bad("eval_k", "must be at least 1");
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch.saturating_sub(1) / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay_factor.powi(drops)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recall: f64,
    pub mrr: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub validation_size: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,recall20,mrr20,lr,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.8},{:.6},{:.6},{:e},{:.3}\n",
                e.epoch, e.loss, e.recall, e.mrr, e.lr, e.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// First and second moment estimates for every tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    pub fn new(like: &ModelParams) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: ModelParams::zeros_like(like),
            v: ModelParams::zeros_like(like),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (id, p) in params.iter_mut() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m.get_mut(id).expect("moment shapes follow parameters");
            for (mi, gi) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(id).expect("moment shapes follow parameters");
            for (vi, gi) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let m = self.m.expect(id).as_slice();
            let v = self.v.expect(id).as_slice();
            for ((pi, mi), vi) in p.as_mut_slice().iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Parameters plus optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub l2: f64,
}

impl Trainer {
    pub fn new(model: Model, l2: f64) -> Self {
        let adam = Adam::new(&model.params);
        Self { model, adam, l2 }
    }

    /// Adds the L2 gradient `2·l2·θ` to `data_grads` and applies one Adam step.
    pub fn step_with_gradients(&mut self, data_grads: &ModelParams, lr: f64) {
        let mut grads = data_grads.clone();
        if self.l2 > 0.0 {
            for (id, g) in grads.iter_mut() {
                let p = self.model.params.expect(id);
                for (gi, pi) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                    *gi += 2.0 * self.l2 * pi;
                }
            }
        }
        self.adam.step(&mut self.model.params, &grads, lr);
    }

    /// Mean loss and mean gradient over `batch`.
    pub fn batch_gradients(
        &self,
        side: &SideIndex,
        batch: &[&EncodedExample],
    ) -> Result<(f64, ModelParams), ModelError> {
        batch_gradients(&self.model, side, batch)
    }
}

pub fn batch_gradients(
    model: &Model,
    side: &SideIndex,
    batch: &[&EncodedExample],
) -> Result<(f64, ModelParams), ModelError> {
    let partials: Vec<(f64, ModelParams)> = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut acc: Option<ModelParams> = None;
            for ex in chunk {
                let target = ex.target.expect("training targets are encoded");
                let (l, g) = model.loss_and_gradients(side, &ex.items, target)?;
                loss += l;
                match acc.as_mut() {
                    Some(a) => a.add_assign(&g),
                    None => acc = Some(g),
                }
            }
            Ok((loss, acc.expect("chunks are nonempty")))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("batch is nonempty");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Splits `examples` into (train, validation) with the newest
/// `floor(n · fraction)` examples held out.
pub fn validation_split(
    examples: &[EncodedExample],
    fraction: f64,
) -> (&[EncodedExample], &[EncodedExample]) {
    let n_val = (examples.len() as f64 * fraction).floor() as usize;
    let n_val = n_val.min(examples.len().saturating_sub(1));
    examples.split_at(examples.len() - n_val)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Trains `model` on `examples` (ordered oldest to newest).
pub fn train(
    model: Model,
    examples: &[EncodedExample],
    catalog: &Catalog,
    side: &SideIndex,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::NoExamples);
    }
    if let Some(index) = examples
        .iter()
        .position(|e| e.items.is_empty() || e.target.is_none())
    {
        return Err(TrainError::Unencodable { index });
    }
    let (fit, val) = validation_split(examples, cfg.validation_fraction);

    let mut trainer = Trainer::new(model, cfg.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut log = TrainLog {
        validation_size: val.len(),
        ..TrainLog::default()
    };
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &fit[i]).collect();
            let (loss, grads) =
                trainer
                    .batch_gradients(side, &batch)
                    .map_err(|source| match source {
                        ModelError::Tensor(_) => TrainError::NonFiniteLoss {
                            epoch,
                            batch: b + 1,
                        },
                        source => TrainError::Batch {
                            epoch,
                            batch: b + 1,
                            source,
                        },
                    })?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            total += loss * batch.len() as f64;
            trainer.step_with_gradients(&grads, lr);
        }

        let (recall, mrr) = if val.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&trainer.model, val, catalog, side, cfg.eval_k)?;
            (r.recall, r.mrr)
        };
        let entry = EpochLog {
            epoch,
            loss: total / fit.len() as f64,
            recall,
            mrr,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);

        if val.is_empty() {
            log.best_epoch = epoch;
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| mrr > *b) {
            best = Some((mrr, trainer.model.clone()));
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    let model = match best {
        Some((_, m)) => m,
        None => trainer.model,
    };
    Ok(TrainOutcome { model, log })
}
