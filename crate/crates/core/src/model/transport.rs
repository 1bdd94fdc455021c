//! Wind-conditioned cross-station transport.
//!
//! For each forecast patch the physics score rewards aligned upwind pairs
//! and penalizes squared distance; a learnable residual adjacency is added,
//! non-upwind pairs and self-loops are masked out, and the remaining
//! logits are normalized per target row. Rows without any upwind source
//! stay all-zero.

use ndarray::{Array2, Array3, Array1};
use serde::{Deserialize, Serialize};

use crate::geometry::WindSummary;

/// Positive physics coefficients after the softplus map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsCoefficients {
    pub alpha_dir: f64,
    pub alpha_dist: f64,
    pub beta_speed: f64,
    /// km
    pub sigma_d: f64,
    /// Alignment margin, `>= 0`.
    pub eps: f64,
}

/// Per-patch transport tensors retained for backward and attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub alignment: Array2<f64>,
    /// Wind speed applying to each target row.
    pub speed: Vec<f64>,
    pub phi: Array2<f64>,
    pub z: Array2<f64>,
    pub mask: Array2<bool>,
    pub weights: Array2<f64>,
}

/// Alignment matrix for patch `m`. With one summary the wind is shared by
/// all rows; with one per station, row `s` uses station `s`'s wind.
pub fn patch_alignment(bearings: &ndarray::Array3<f64>, wind: &[WindSummary], m: usize) -> (Array2<f64>, Vec<f64>) {
    let s_len = bearings.shape()[0];
    let mut a = Array2::zeros((s_len, s_len));
    let mut speed = vec![0.0; s_len];
    for s in 0..s_len {
        let w = if wind.len() == 1 { &wind[0] } else { &wind[s] };
        let u = w.u_hat[m];
        speed[s] = w.speed[m];
        for s0 in 0..s_len {
            if s0 != s {
                a[[s, s0]] = u[0] * bearings[[s, s0, 0]] + u[1] * bearings[[s, s0, 1]];
            }
        }
    }
    (a, speed)
}

/// `beta * v * alpha_dir * [A - eps]_+ - alpha_dist * (D / sigma)^2`.
pub fn physics_score(alignment: &Array2<f64>, speed: &[f64], distances: &Array2<f64>, k: &PhysicsCoefficients) -> Array2<f64> {
    let mut phi = Array2::zeros(alignment.dim());
    for ((s, s0), out) in phi.indexed_iter_mut() {
        let rect = (alignment[[s, s0]] - k.eps).max(0.0);
        let dist = distances[[s, s0]] / k.sigma_d;
        *out = k.beta_speed * speed[s] * k.alpha_dir * rect - k.alpha_dist * dist * dist;
    }
    phi
}

/// True where `s0 != s` and the alignment reaches the margin.
pub fn upwind_mask(alignment: &Array2<f64>, eps: f64) -> Array2<bool> {
    Array2::from_shape_fn(alignment.dim(), |(s, s0)| s != s0 && alignment[[s, s0]] >= eps)
}

/// Row softmax over unmasked entries; masked entries are exactly zero and
/// fully masked rows stay zero.
pub fn spatial_weights(z: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    let mut w = Array2::zeros(z.dim());
    for s in 0..z.nrows() {
        let max = (0..z.ncols())
            .filter(|&j| mask[[s, j]])
            .map(|j| z[[s, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..z.ncols() {
            if mask[[s, j]] {
                let e = (z[[s, j]] - max).exp();
                w[[s, j]] = e;
                total += e;
            }
        }
        w.row_mut(s).mapv_inplace(|x| x / total);
    }
    w
}

pub fn build_plan(
    distances: &Array2<f64>,
    bearings: &ndarray::Array3<f64>,
    wind: &[WindSummary],
    m: usize,
    k: &PhysicsCoefficients,
    residual: &Array2<f64>,
) -> TransportPlan {
    let (alignment, speed) = patch_alignment(bearings, wind, m);
    let phi = physics_score(&alignment, &speed, distances, k);
    let z = &phi + residual;
    let mask = upwind_mask(&alignment, k.eps);
    let weights = spatial_weights(&z, &mask);
    TransportPlan {
        alignment,
        speed,
        phi,
        z,
        mask,
        weights,
    }
}

/// `C_nb[:, m, :] = W_m G[:, m, :]` for every patch.
pub fn aggregate(plans: &[TransportPlan], g: &Array3<f64>) -> Array3<f64> {
    let (s_len, m_pred, d) = g.dim();
    let mut out = Array3::zeros((s_len, m_pred, d));
    for (m, plan) in plans.iter().enumerate() {
        for s in 0..s_len {
            for s0 in 0..s_len {
                let w = plan.weights[[s, s0]];
                if w == 0.0 {
                    continue;
                }
                for c in 0..d {
                    out[[s, m, c]] += w * g[[s0, m, c]];
                }
            }
        }
    }
    out
}

pub(crate) struct TransportGrads {
    pub d_g: Array3<f64>,
    pub d_residual: Array2<f64>,
    /// Gradients with respect to the mapped coefficients, in the order
    /// alpha_dir, alpha_dist, beta_speed, sigma_d, eps.
    pub d_coeffs: Array1<f64>,
}

/// Backward through aggregation, masked softmax and the physics score.
/// The mask and the rectifier's active set are constants of the pass.
pub(crate) fn transport_backward(
    d_cnb: &Array3<f64>,
    plans: &[TransportPlan],
    g: &Array3<f64>,
    distances: &Array2<f64>,
    k: &PhysicsCoefficients,
) -> TransportGrads {
    let (s_len, _, d) = g.dim();
    let mut out = TransportGrads {
        d_g: Array3::zeros(g.dim()),
        d_residual: Array2::zeros((s_len, s_len)),
        d_coeffs: Array1::zeros(5),
    };
    let mut d_w = vec![0.0; s_len];
    for (m, plan) in plans.iter().enumerate() {
        for s in 0..s_len {
            let mut inner = 0.0;
            for s0 in 0..s_len {
                let w = plan.weights[[s, s0]];
                if !plan.mask[[s, s0]] {
                    d_w[s0] = 0.0;
                    continue;
                }
                let mut acc = 0.0;
                for c in 0..d {
                    let up = d_cnb[[s, m, c]];
                    acc += up * g[[s0, m, c]];
                    out.d_g[[s0, m, c]] += w * up;
                }
                d_w[s0] = acc;
                inner += w * acc;
            }
            for s0 in 0..s_len {
                if !plan.mask[[s, s0]] {
                    continue;
                }
                let dz = plan.weights[[s, s0]] * (d_w[s0] - inner);
                out.d_residual[[s, s0]] += dz;
                let gap = plan.alignment[[s, s0]] - k.eps;
                let v = plan.speed[s];
                if gap > 0.0 {
                    out.d_coeffs[0] += dz * k.beta_speed * v * gap;
                    out.d_coeffs[2] += dz * v * k.alpha_dir * gap;
                    out.d_coeffs[4] -= dz * k.beta_speed * v * k.alpha_dir;
                }
                let ratio = distances[[s, s0]] / k.sigma_d;
                out.d_coeffs[1] -= dz * ratio * ratio;
                out.d_coeffs[3] += dz * 2.0 * k.alpha_dist * ratio * ratio / k.sigma_d;
            }
        }
    }
    out
}
