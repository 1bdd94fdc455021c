//! Gated fusion of local and transported context and the patch decoder.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Gelu,
    Softplus,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Softplus => softplus(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// `G + gamma * C_nb`; `gamma` is `(S, 1)` for a scalar gate per station or
/// `(S, d)` for one gate per channel.
pub fn fuse(g: &Array3<f64>, cnb: &Array3<f64>, gamma: &Array2<f64>) -> Array3<f64> {
    let (s_len, m_pred, d) = g.dim();
    let per_channel = gamma.ncols() > 1;
    let mut c = g.clone();
    for s in 0..s_len {
        for m in 0..m_pred {
            for ch in 0..d {
                let gate = gamma[[s, if per_channel { ch } else { 0 }]];
                c[[s, m, ch]] += gate * cnb[[s, m, ch]];
            }
        }
    }
    c
}

/// Affine map `d -> P` per (station, patch); returns the pre-activation
/// and the activated patches.
pub fn decode(c: &Array3<f64>, w_dec: &Array2<f64>, b_dec: &Array2<f64>, act: Activation) -> (Array3<f64>, Array3<f64>) {
    let (s_len, m_pred, d) = c.dim();
    let p = w_dec.ncols();
    let flat = c.view().into_shape_with_order((s_len * m_pred, d)).expect("contiguous");
    let mut pre = flat.dot(w_dec);
    pre += &b_dec.row(0);
    let pre = pre.into_shape_with_order((s_len, m_pred, p)).expect("shape");
    let out = pre.mapv(|x| act.apply(x));
    (pre, out)
}

/// Concatenates patches in temporal order: hour `m * P + p`.
pub fn reshape_forecast(patches: &Array3<f64>, horizon: usize) -> Result<Array2<f64>> {
    let (s_len, m_pred, p) = patches.dim();
    if m_pred * p != horizon {
        return Err(Error::Shape(format!("{m_pred} patches of {p} hours do not cover horizon {horizon}")));
    }
    Ok(patches
        .to_owned()
        .into_shape_with_order((s_len, horizon))
        .expect("contiguous patches"))
}

pub fn unreshape_forecast(y: &Array2<f64>, patch: usize) -> Result<Array3<f64>> {
    let (s_len, h) = y.dim();
    if patch == 0 || h % patch != 0 {
        return Err(Error::Shape(format!("horizon {h} is not a multiple of patch {patch}")));
    }
    Ok(y.to_owned().into_shape_with_order((s_len, h / patch, patch)).expect("contiguous"))
}

pub(crate) struct DecodeGrads {
    pub d_c: Array3<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array2<f64>,
}

pub(crate) fn decode_backward(d_out: &Array3<f64>, pre: &Array3<f64>, c: &Array3<f64>, w_dec: &Array2<f64>, act: Activation) -> DecodeGrads {
    let (s_len, m_pred, d) = c.dim();
    let p = w_dec.ncols();
    let mut d_pre = d_out.clone();
    if act != Activation::Identity {
        d_pre.zip_mut_with(pre, |g, &x| *g *= act.derivative(x));
    }
    let d_pre = d_pre.into_shape_with_order((s_len * m_pred, p)).expect("shape");
    let flat = c.view().into_shape_with_order((s_len * m_pred, d)).expect("contiguous");
    let b: Array1<f64> = d_pre.sum_axis(ndarray::Axis(0));
    DecodeGrads {
        d_c: d_pre.dot(&w_dec.t()).into_shape_with_order((s_len, m_pred, d)).expect("shape"),
        w_dec: flat.t().dot(&d_pre),
        b_dec: b.insert_axis(ndarray::Axis(0)),
    }
}
