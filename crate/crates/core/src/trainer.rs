//! Adagrad training with linear warmup and global-norm clipping.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SequenceRecord;
use crate::model::{Checkpoint, Mode, Model, ModelError};
use crate::tensor::{Real, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training records")]
    NoRecords,
    #[error("non-finite {what} at step {step} (epoch {epoch}, batch {batch}, records {records:?})")]
    NonFinite {
        what: &'static str,
        step: u64,
        epoch: u64,
        batch: usize,
        records: Vec<usize>,
    },
    #[error("record {index} has {len} tokens; expected {expected}")]
    RecordLength { index: usize, len: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Global gradient-norm threshold.
    pub clip: f64,
    pub adagrad_eps: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_interval: u64,
    /// Steps between metric lines; 0 disables them.
    pub eval_interval: u64,
    /// Cap on validation records scored per evaluation; 0 means all.
    pub max_eval_records: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 16,
            clip: 0.25,
            adagrad_eps: 1e-10,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 100,
            max_eval_records: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.clip > 0.0) {
            return fail("clip must be positive");
        }
        if !(self.adagrad_eps > 0.0) {
            return fail("adagrad_eps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        Ok(())
    }
}

/// `η·t/W` during warmup, `η` afterwards. The update numbered `t` (from 1)
/// uses `lr_schedule(t)`, so the first update is not wasted at zero.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    if step < config.warmup_steps {
        config.lr * step as f64 / config.warmup_steps as f64
    } else {
        config.lr
    }
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Scale every gradient by `c/g` when the global norm `g` exceeds `c`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], c: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > c {
        let s = T::from_f64_lossy(c / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Per-parameter squared-gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub accumulators: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn zeros_like(params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            accumulators: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    /// `acc += g²; θ -= lr·g/(√acc + eps)` elementwise.
    pub fn adagrad_step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64, eps: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.accumulators.len());
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(eps);
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            for ((theta, &g), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                *a += g * g;
                *theta -= lr * g / (a.sqrt() + eps);
            }
        }
        self.step += 1;
    }
}

/// Mean next-token NLL of `records` in eval mode (no dropout, no gradients).
pub fn loss_batch<T: Real>(model: &Model<T>, records: &[&[u32]]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = model.loss_on_tape(&mut tape, &bound, records, Mode::Eval)?;
    Ok(tape.value(loss).data()[0].to_f64_lossless())
}

/// Mean NLL over all predicted positions of `records`, scored `batch` at a time.
pub fn evaluate<T: Real>(model: &Model<T>, records: &[SequenceRecord], batch: usize) -> Result<f64> {
    if records.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in records.chunks(batch.max(1)) {
        let ids: Vec<&[u32]> = chunk.iter().map(|r| r.tokens.as_slice()).collect();
        let positions: usize = ids.iter().map(|r| r.len() - 1).sum();
        total += loss_batch(model, &ids)? * positions as f64;
        count += positions;
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// 1-based update number.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricLine {
    pub step: u64,
    pub split: &'static str,
    pub nll: f64,
}

impl MetricLine {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{:.6}", self.step, self.split, self.nll)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub history: Vec<StepReport>,
    pub metrics: Vec<MetricLine>,
    pub checkpoints: Vec<PathBuf>,
}

/// Output locations for [`Trainer::run`].
#[derive(Default)]
pub struct RunOutputs<'w> {
    pub metrics: Option<&'w mut dyn Write>,
    /// Directory for `step-XXXXXXXX.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

/// Owns a model and its optimizer state. Batch order and dropout masks are
/// pure functions of `(seed, step)`, so a run resumed from a checkpoint
/// replays the remaining updates exactly.
pub struct Trainer<T: Real = f32> {
    model: Model<T>,
    optimizer: OptimizerState<T>,
    config: TrainConfig,
    order: Option<(u64, Vec<usize>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::zeros_like(&model.params().tensors());
        Ok(Trainer {
            model,
            optimizer,
            config,
            order: None,
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(checkpoint.config, checkpoint.params)?;
        let optimizer = match checkpoint.accumulators {
            Some(accumulators) => OptimizerState {
                accumulators,
                step: checkpoint.step,
            },
            None => OptimizerState {
                step: checkpoint.step,
                ..OptimizerState::zeros_like(&model.params().tensors())
            },
        };
        Ok(Trainer {
            model,
            optimizer,
            config,
            order: None,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: *self.model.config(),
            params: self.model.params().clone(),
            step: self.optimizer.step,
            accumulators: Some(self.optimizer.accumulators.clone()),
        }
    }

    fn batches_per_epoch(&self, n: usize) -> u64 {
        (n / self.config.batch_size).max(1) as u64
    }

    /// Record indices used by the update after `step` completed updates.
    /// Each epoch is a fresh permutation keyed by `(seed, epoch)`; a partial
    /// final batch is dropped.
    pub fn batch_indices(&mut self, step: u64, n: usize) -> (u64, usize, Vec<usize>) {
        let per_epoch = self.batches_per_epoch(n);
        let epoch = step / per_epoch;
        let batch = (step % per_epoch) as usize;
        if self.order.as_ref().map(|(e, o)| (*e, o.len())) != Some((epoch, n)) {
            let mut perm: Vec<usize> = (0..n).collect();
            let key = self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().unwrap().1;
        let b = self.config.batch_size.min(n);
        (epoch, batch, perm[batch * b..(batch + 1) * b].to_vec())
    }

    /// One forward/backward/update on the scheduled batch.
    pub fn train_step(&mut self, records: &[SequenceRecord]) -> Result<StepReport> {
        if records.is_empty() {
            return Err(TrainError::NoRecords);
        }
        let step = self.optimizer.step;
        let (epoch, batch, indices) = self.batch_indices(step, records.len());
        let ids: Vec<&[u32]> = indices.iter().map(|&i| records[i].tokens.as_slice()).collect();
        let non_finite = |what| TrainError::NonFinite {
            what,
            step: step + 1,
            epoch,
            batch,
            records: indices.clone(),
        };

        let (loss, mut grads) = {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let mode = Mode::Train {
                seed: self.config.seed,
                step,
            };
            let loss = match self.model.loss_on_tape(&mut tape, &bound, &ids, mode) {
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => return Err(non_finite("loss")),
                other => other?,
            };
            let value = tape.value(loss).data()[0].to_f64_lossless();
            if !value.is_finite() {
                return Err(non_finite("loss"));
            }
            let mut g = tape.backward(loss).map_err(ModelError::from)?;
            let grads: Vec<Tensor<T>> = bound
                .all
                .iter()
                .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
                .collect();
            (value, grads)
        };
        let grad_norm = clip_global_norm(&mut grads, self.config.clip);
        if !grad_norm.is_finite() {
            return Err(non_finite("gradient norm"));
        }
        let lr = lr_schedule(step + 1, &self.config);
        let mut params = self.model.params_mut().tensors_mut();
        self.optimizer
            .adagrad_step(&mut params, &grads, lr, self.config.adagrad_eps);
        Ok(StepReport {
            step: step + 1,
            lr,
            loss,
            grad_norm,
        })
    }

    fn check_lengths(&self, records: &[SequenceRecord]) -> Result<()> {
        let expected = self.model.config().context;
        for (index, r) in records.iter().enumerate() {
            if r.tokens.len() != expected {
                return Err(TrainError::RecordLength {
                    index,
                    len: r.tokens.len(),
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Train until `total_steps` updates have been applied in all.
    pub fn run(
        &mut self,
        train: &[SequenceRecord],
        valid: &[SequenceRecord],
        mut out: RunOutputs<'_>,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(TrainError::NoRecords);
        }
        self.check_lengths(train)?;
        self.check_lengths(valid)?;
        let mut summary = TrainSummary::default();
        let mut window = (0.0, 0u64);
        while self.optimizer.step < self.config.total_steps {
            let report = self.train_step(train)?;
            summary.history.push(report);
            window.0 += report.loss;
            window.1 += 1;
            let step = report.step;

            let log_now = self.config.eval_interval > 0
                && (step % self.config.eval_interval == 0 || step == self.config.total_steps);
            if log_now {
                let mut lines = vec![MetricLine {
                    step,
                    split: "train",
                    nll: window.0 / window.1 as f64,
                }];
                window = (0.0, 0);
                if !valid.is_empty() {
                    let cap = match self.config.max_eval_records {
                        0 => valid.len(),
                        m => m.min(valid.len()),
                    };
                    lines.push(MetricLine {
                        step,
                        split: "valid",
                        nll: evaluate(&self.model, &valid[..cap], self.config.batch_size)?,
                    });
                }
                if let Some(w) = out.metrics.as_deref_mut() {
                    for l in &lines {
                        writeln!(w, "{}", l.to_line())?;
                    }
                    w.flush()?;
                }
                summary.metrics.extend(lines);
            }

            let ck_now = self.config.checkpoint_interval > 0
                && (step % self.config.checkpoint_interval == 0 || step == self.config.total_steps);
            if let (true, Some(dir)) = (ck_now, out.checkpoint_dir.as_deref()) {
                summary.checkpoints.push(self.save_checkpoint(dir)?);
            }
        }
        Ok(summary)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(checkpoint_name(self.optimizer.step));
        self.checkpoint().save(&path)?;
        Ok(path)
    }
}
