//! Composite loss, batched reverse-mode gradients, Adam with early
//! stopping, evaluation metrics, gradient certification and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod metrics;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSample;
use crate::error::{Error, Result};
use crate::model::decoder::sigmoid;
use crate::model::{Model, ModelParams};
pub use adam::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub patience: usize,
    /// Weight of the squared alignment margin in the loss.
    pub lambda_eps: f64,
    pub seed: u64,
    /// Evaluate samples of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            max_steps: None,
            patience: 10,
            lambda_eps: 1e-3,
            seed: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.lambda_eps < 0.0 {
            return Err(Error::Config("betas must lie in [0, 1) and lambda_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean squared error over all `S x H` entries plus `lambda * eps^2`.
pub fn loss(yhat: &Array2<f64>, y: &Array2<f64>, eps_margin: f64, lambda_eps: f64) -> Result<f64> {
    Ok(mse(yhat, y)? + lambda_eps * eps_margin * eps_margin)
}

fn mse(yhat: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if yhat.dim() != y.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", yhat.dim(), y.dim())));
    }
    if yhat.iter().chain(y.iter()).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in loss inputs".into()));
    }
    let n = y.len() as f64;
    Ok(yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// MSE and its gradient for a single sample (no margin term).
pub fn sample_gradient(model: &Model, sample: &WindowSample) -> Result<(f64, ModelParams)> {
    let pass = model.forward(sample)?;
    let err = mse(&pass.yhat, &sample.y)?;
    let n = sample.y.len() as f64;
    let d_yhat = (&pass.yhat - &sample.y) * (2.0 / n);
    Ok((err, model.backward(&pass, &d_yhat)?))
}

/// Batch-mean loss and gradients. Per-sample terms may be computed in
/// parallel; they are always reduced in sample order.
pub fn batch_gradient(model: &Model, batch: &[&WindowSample], lambda_eps: f64, parallel: bool) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per_sample: Vec<Result<(f64, ModelParams)>> = if parallel {
        batch.par_iter().map(|s| sample_gradient(model, s)).collect()
    } else {
        batch.iter().map(|s| sample_gradient(model, s)).collect()
    };
    let mut total = 0.0;
    let mut grads = model.params.zeros_like();
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        grads.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    for (_, t) in grads.tensors_mut() {
        t.mapv_inplace(|v| v * inv);
    }
    let raw = model.params.eps_margin[[0, 0]];
    let eps = model.params.coefficients().eps;
    grads.eps_margin[[0, 0]] += 2.0 * lambda_eps * eps * sigmoid(raw);
    if let Err(name) = grads.all_finite() {
        return Err(Error::Numeric(format!("non-finite gradient in `{name}`")));
    }
    Ok((total * inv + lambda_eps * eps * eps, grads))
}

/// Batch-mean objective without gradients.
pub fn batch_loss(model: &Model, batch: &[&WindowSample], lambda_eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += mse(&model.forward(s)?.yhat, &s.y)?;
    }
    let eps = model.params.coefficients().eps;
    Ok(total / batch.len() as f64 + lambda_eps * eps * eps)
}

/// Mean normalized MSE over windows.
pub fn mean_mse(model: &Model, windows: &[WindowSample], parallel: bool) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let errs: Vec<Result<f64>> = if parallel {
        windows.par_iter().map(|w| mse(&model.forward(w)?.yhat, &w.y)).collect()
    } else {
        windows.iter().map(|w| mse(&model.forward(w)?.yhat, &w.y)).collect()
    };
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / windows.len() as f64)
}

/// Tracks the best validation score and counts epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Returns `true` if `score` is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        match self.best {
            Some(b) if score >= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some(score);
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub alpha_dir: f64,
    pub alpha_dist: f64,
    pub beta_speed: f64,
    pub sigma_d: f64,
    pub eps: f64,
    pub mean_gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation score seen.
    pub best: Model,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    pub steps: usize,
}

/// Writes the history as CSV.
pub fn write_history(path: impl AsRef<std::path::Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for rec in history {
        w.serialize(rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains `model` on shuffled mini-batches; `validate` scores a model after
/// every epoch (lower is better).
pub fn fit(
    model: Model,
    train: &[WindowSample],
    cfg: &TrainConfig,
    mut validate: impl FnMut(&Model) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = model;
    let mut state = AdamState::new(&model.params);
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut steps = 0;
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (l, grads) = match batch_gradient(&model, &batch, cfg.lambda_eps, cfg.parallel) {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) | Err(Error::Numeric(_)) => {
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut model.params, &grads, &mut state, &adam);
            if model.params.all_finite().is_err() {
                stop = StopReason::Diverged;
                break 'epochs;
            }
            epoch_loss += l;
            batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let val = validate(&model)?;
        if !val.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        let k = model.params.coefficients();
        history.push(EpochRecord {
            epoch,
            steps,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_mse: val,
            alpha_dir: k.alpha_dir,
            alpha_dist: k.alpha_dist,
            beta_speed: k.beta_speed,
            sigma_d: k.sigma_d,
            eps: k.eps,
            mean_gamma: model.params.gamma.mean().unwrap_or(0.0),
        });
        if stopper.observe(val) {
            best = model.clone();
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            stop = StopReason::MaxSteps;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_val: stopper.best.unwrap_or(f64::INFINITY),
        history,
        stop,
        steps,
    })
}

/// [`fit`] with validation MSE over `val` windows.
pub fn train(model: Model, train: &[WindowSample], val: &[WindowSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(model, train, cfg, |m| mean_mse(m, val, cfg.parallel))
}
