//! Optimizers, the epoch loop with validation-based model selection, and
//! seeded replicate runs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::{DataError, Vectorized};
use crate::error::ModelError;
use crate::layers::{Mode, ParamId, ParamStore};
use crate::metrics::{EvalReport, MetricsError};
use crate::models::{argmax_rows, build_model, ClassifierModel, ModelSpec};
use crate::tensor::{Tensor, TensorError};

pub const THREADS_ENV: &str = "IMPLICIT_SENT_THREADS";
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("could not write the epoch log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl Optimizer {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Optimizer::Adam => 1e-3,
            Optimizer::Sgd => 1e-1,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub seed: u64,
    pub replicates: usize,
    /// Global-norm clipping threshold, applied to recurrent models only.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: Optimizer::Adam,
            learning_rate: Optimizer::Adam.default_learning_rate(),
            seed: 0,
            replicates: 3,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.replicates == 0 {
            return Err(TrainError::Config("replicates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug)]
pub enum SeedStream {
    Init = 0,
    Shuffle = 1,
    Dropout = 2,
}

pub fn stream_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Mean of `-ln p[label]` over the batch, with `p` clamped at 1e-12.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var, TensorError> {
    tape.nll(probs, labels)
}

#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64) -> Self {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd { lr },
            Optimizer::Adam => OptimizerState::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            OptimizerState::Sgd { .. } => 0,
            OptimizerState::Adam { t, .. } => *t,
        }
    }

    /// Applies one update to `ids` in `store` given their gradients.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &[Tensor]) -> Result<(), TrainError> {
        for (&id, g) in ids.iter().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient {
                    param: store.entry(id).name.clone(),
                });
            }
        }
        match self {
            OptimizerState::Sgd { lr } => {
                for (&id, g) in ids.iter().zip(grads) {
                    for (p, &gi) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= *lr * gi;
                    }
                }
            }
            OptimizerState::Adam { lr, beta1, beta2, eps, t, m, v } => {
                if m.is_empty() {
                    *m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
                    *v = m.clone();
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for (k, (&id, g)) in ids.iter().zip(grads).enumerate() {
                    let (mk, vk) = (m[k].data_mut(), v[k].data_mut());
                    let p = store.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        mk[i] = *beta1 * mk[i] + (1.0 - *beta1) * gi;
                        vk[i] = *beta2 * vk[i] + (1.0 - *beta2) * gi * gi;
                        let mhat = mk[i] / c1;
                        let vhat = vk[i] / c2;
                        p[i] -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub val_macro_f1: f64,
    pub val_accuracy: f64,
}

/// Inference-mode evaluation of `model` on `data`.
pub fn evaluate(model: &ClassifierModel, data: &Vectorized) -> Result<EvalReport, TrainError> {
    let predicted = predict_all(model, data)?;
    Ok(EvalReport::from_predictions(&data.labels, &predicted)?)
}

pub fn predict_all(model: &ClassifierModel, data: &Vectorized) -> Result<Vec<usize>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let probs = model.probabilities(&data.batch(chunk))?;
        out.extend(argmax_rows(&probs));
    }
    Ok(out)
}

/// Drives training one epoch at a time and tracks the best model by
/// validation macro-F1 (earliest epoch wins ties).
pub struct Trainer<'a> {
    model: ClassifierModel,
    config: TrainConfig,
    train: &'a Vectorized,
    validation: &'a Vectorized,
    optimizer: OptimizerState,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    reports: Vec<EpochReport>,
    best: Option<(f64, usize, ClassifierModel)>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// The selected (best-validation) model.
    pub model: ClassifierModel,
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ClassifierModel,
        config: &TrainConfig,
        train: &'a Vectorized,
        validation: &'a Vectorized,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let seed = model.seed();
        Ok(Trainer {
            optimizer: OptimizerState::new(config.optimizer, config.learning_rate),
            shuffle_rng: stream_rng(seed, SeedStream::Shuffle),
            dropout_rng: stream_rng(seed, SeedStream::Dropout),
            model,
            config: config.clone(),
            train,
            validation,
            reports: Vec::new(),
            best: None,
        })
    }

    pub fn model(&self) -> &ClassifierModel {
        &self.model
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    /// One optimizer step on the given training rows; returns the batch loss.
    pub fn train_step(&mut self, rows: &[usize]) -> Result<f64, TrainError> {
        let batch = self.train.batch(rows);
        let labels = self.train.labels_of(rows);
        let store = self.model.params();
        let ids = store.trainable_ids();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let probs = self.model.forward(&mut tape, &bind, &batch, Mode::Train, Some(&mut self.dropout_rng))?;
        let loss = cross_entropy(&mut tape, probs, &labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                epoch: self.reports.len() + 1,
                batch: 0,
                loss: value,
            });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Tensor> = ids.iter().map(|&id| tape.grad(bind.var(id))).collect();
        drop(tape);
        let table = self.model.embedding().table_id();
        if let Some(k) = ids.iter().position(|&id| id == table) {
            let dim = self.model.embedding().dim();
            grads[k].data_mut()[..dim].fill(0.0);
        }
        if self.model.spec().kind.is_recurrent() {
            clip_global_norm(&mut grads, self.config.clip_norm);
        }
        self.optimizer.step(self.model.params_mut(), &ids, &grads)?;
        Ok(value)
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport, TrainError> {
        let epoch = self.reports.len() + 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut total = 0.0;
        for (b, rows) in order.chunks(self.config.batch_size).enumerate() {
            let loss = self.train_step(rows).map_err(|e| match e {
                TrainError::Diverged { loss, .. } => TrainError::Diverged {
                    epoch,
                    batch: b + 1,
                    loss,
                },
                e => e,
            })?;
            total += loss * rows.len() as f64;
        }
        let (val_macro_f1, val_accuracy) = if self.validation.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&self.model, self.validation)?;
            (r.macro_f1, r.accuracy)
        };
        let report = EpochReport {
            epoch,
            loss: total / self.train.len() as f64,
            val_macro_f1,
            val_accuracy,
        };
        let better = match &self.best {
            None => true,
            Some((f1, _, _)) => val_macro_f1 > *f1,
        };
        if better {
            self.best = Some((val_macro_f1, epoch, self.model.clone()));
        }
        self.reports.push(report.clone());
        Ok(report)
    }

    pub fn finish(self) -> FitResult {
        match self.best {
            Some((_, best_epoch, model)) => FitResult {
                model,
                best_epoch,
                reports: self.reports,
            },
            None => FitResult {
                model: self.model,
                best_epoch: 0,
                reports: self.reports,
            },
        }
    }
}

/// Trains for `config.epochs` epochs, writing one JSON line per epoch to
/// `log` when given, and returns the best-validation model.
pub fn fit(
    model: ClassifierModel,
    train: &Vectorized,
    validation: &Vectorized,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitResult, TrainError> {
    let mut trainer = Trainer::new(model, config, train, validation)?;
    for _ in 0..config.epochs {
        let report = trainer.run_epoch()?;
        log::info!(
            "epoch {} loss {:.4} val macro-F1 {:.2}",
            report.epoch,
            report.loss,
            report.val_macro_f1
        );
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &report).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
    }
    Ok(trainer.finish())
}

/// Vectorized train/validation/test partitions.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vectorized,
    pub validation: Vectorized,
    pub test: Vectorized,
}

#[derive(Clone, Debug)]
pub struct ReplicateRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochReport>,
    pub test: EvalReport,
}

#[derive(Clone, Debug)]
pub struct ReplicateSummary {
    pub runs: Vec<ReplicateRun>,
    pub average: EvalReport,
}

/// A replicate failed; the runs that finished are kept.
#[derive(Debug, Error)]
#[error("replicate with seed {seed} failed: {error}")]
pub struct ReplicateFailure {
    pub seed: u64,
    pub error: TrainError,
    pub completed: Vec<ReplicateRun>,
}

/// Worker count: `IMPLICIT_SENT_THREADS` if set and positive, otherwise the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool capped by [`worker_threads`].
pub fn with_worker_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

pub fn train_and_evaluate(
    spec: &ModelSpec,
    table: &Tensor,
    data: &PreparedData,
    config: &TrainConfig,
    seed: u64,
) -> Result<ReplicateRun, TrainError> {
    let model = build_model(spec, table.clone(), seed)?;
    let fitted = fit(model, &data.train, &data.validation, config, None)?;
    Ok(ReplicateRun {
        seed,
        best_epoch: fitted.best_epoch,
        epochs: fitted.reports,
        test: evaluate(&fitted.model, &data.test)?,
    })
}

/// Trains one replicate per seed (in parallel) and averages their test
/// reports.
pub fn run_replicates_with_seeds(
    spec: &ModelSpec,
    table: &Tensor,
    data: &PreparedData,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<ReplicateSummary, ReplicateFailure> {
    if seeds.is_empty() {
        return Err(ReplicateFailure {
            seed: config.seed,
            error: TrainError::Config("at least one replicate is required".into()),
            completed: Vec::new(),
        });
    }
    let results: Vec<(u64, Result<ReplicateRun, TrainError>)> = with_worker_pool(|| {
        seeds
            .par_iter()
            .map(|&s| (s, train_and_evaluate(spec, table, data, config, s)))
            .collect()
    });
    let mut runs = Vec::with_capacity(seeds.len());
    let mut first_error = None;
    for (seed, r) in results {
        match r {
            Ok(run) => runs.push(run),
            Err(error) if first_error.is_none() => first_error = Some((seed, error)),
            Err(_) => {}
        }
    }
    if let Some((seed, error)) = first_error {
        return Err(ReplicateFailure {
            seed,
            error,
            completed: runs,
        });
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.test.clone()).collect();
    let average = EvalReport::average(&reports).expect("at least one run");
    Ok(ReplicateSummary { runs, average })
}

/// `n` replicates with seeds `config.seed, config.seed + 1, …`.
pub fn run_replicates(
    spec: &ModelSpec,
    table: &Tensor,
    data: &PreparedData,
    config: &TrainConfig,
    n: usize,
) -> Result<ReplicateSummary, ReplicateFailure> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| config.seed.wrapping_add(i)).collect();
    run_replicates_with_seeds(spec, table, data, config, &seeds)
}
