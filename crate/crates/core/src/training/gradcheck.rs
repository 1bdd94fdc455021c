//! Central-difference certification of the reverse-mode gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_gradient, batch_loss};
use crate::dataio::WindowSample;
use crate::error::Result;
use crate::model::{Model, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    /// Magnitude below which relative error is measured against this
    /// value instead, so that two near-zero gradients compare as equal.
    pub floor: f64,
    pub lambda_eps: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 20,
            floor: 1e-7,
            lambda_eps: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates over tolerance.
    pub failures: Vec<CoordCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.failures.is_empty())
    }

    pub fn failing(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.failures.is_empty()).map(|t| t.name.as_str()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let tag = if t.failures.is_empty() { "ok  " } else { "FAIL" };
            writeln!(f, "{tag} {:<14} max_rel_err={:.3e} coords={}", t.name, t.max_rel_error, t.checked)?;
            for c in &t.failures {
                writeln!(
                    f,
                    "     {:?} analytic={:.6e} numeric={:.6e} rel={:.3e}",
                    c.index, c.analytic, c.numeric, c.rel_error
                )?;
            }
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks the model's own backward pass on `samples`.
pub fn gradcheck(model: &Model, samples: &[WindowSample], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let (_, grads) = batch_gradient(model, &refs, cfg.lambda_eps, false)?;
    gradcheck_with(model, samples, &grads, cfg)
}

/// Checks an arbitrary gradient against central differences of the loss.
pub fn gradcheck_with(model: &Model, samples: &[WindowSample], grads: &ModelParams, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for (name, g) in grads.tensors() {
        let cols = g.ncols();
        let n = g.len();
        let mut picks = sample(&mut rng, n, n.min(cfg.coords_per_tensor)).into_vec();
        picks.sort_unstable();
        let mut check = TensorCheck {
            name: name.to_string(),
            max_rel_error: 0.0,
            checked: picks.len(),
            failures: Vec::new(),
        };
        for flat in picks {
            let idx = (flat / cols, flat % cols);
            let orig = model.params.get(name).expect("tensor names agree")[idx];
            set(&mut probe.params, name, idx, orig + cfg.step);
            let plus = batch_loss(&probe, &refs, cfg.lambda_eps)?;
            set(&mut probe.params, name, idx, orig - cfg.step);
            let minus = batch_loss(&probe, &refs, cfg.lambda_eps)?;
            set(&mut probe.params, name, idx, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = g[idx];
            let rel = relative_error(analytic, numeric, cfg.floor);
            check.max_rel_error = check.max_rel_error.max(rel);
            if !(rel < cfg.tolerance) {
                check.failures.push(CoordCheck {
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        tensors.push(check);
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        tensors,
    })
}

fn set(params: &mut ModelParams, name: &str, idx: (usize, usize), value: f64) {
    for (n, t) in params.tensors_mut() {
        if n == name {
            t[idx] = value;
            return;
        }
    }
}
