//! Time-feature tokens, patch projection with convolutional and
//! feature-code position terms, and the station-wise affine gate.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which feature and which patch of that feature's block a token covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub feature: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    /// `(S, N_all, P)`
    pub values: Array3<f64>,
    pub meta: Vec<TokenMeta>,
}

/// Token layout for features with the given block lengths.
pub fn token_layout(block_lens: &[usize], patch: usize) -> Result<Vec<TokenMeta>> {
    let mut meta = Vec::new();
    for (feature, &len) in block_lens.iter().enumerate() {
        if patch == 0 || len % patch != 0 {
            return Err(Error::Config(format!(
                "block of feature {feature} ({len} hours) is not divisible by patch length {patch}"
            )));
        }
        meta.extend((0..len / patch).map(|p| TokenMeta { feature, patch: p }));
    }
    Ok(meta)
}

/// Splits every feature block into consecutive non-overlapping patches and
/// concatenates them in feature order.
pub fn tokenize(blocks: &[Array2<f64>], patch: usize) -> Result<TokenGrid> {
    let lens: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
    let meta = token_layout(&lens, patch)?;
    let s = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    if blocks.iter().any(|b| b.nrows() != s) {
        return Err(Error::Shape("feature blocks disagree on station count".into()));
    }
    let mut values = Array3::zeros((s, meta.len(), patch));
    for k in 0..s {
        for (n, tm) in meta.iter().enumerate() {
            let block = &blocks[tm.feature];
            for p in 0..patch {
                values[[k, n, p]] = block[[k, tm.patch * patch + p]];
            }
        }
    }
    Ok(TokenGrid { values, meta })
}

/// Fixed sinusoidal code per feature index, `(F, d)`.
pub fn feature_codes(features: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((features, d));
    for i in 0..features {
        for c in 0..d {
            let k = (c / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * k / d as f64);
            let angle = i as f64 * freq;
            pe[[i, c]] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Index of the token `offset` positions away within the same feature.
pub(crate) fn neighbor(meta: &[TokenMeta], n: usize, offset: isize) -> Option<usize> {
    let j = n as isize + offset;
    if j < 0 || j as usize >= meta.len() {
        return None;
    }
    let j = j as usize;
    (meta[j].feature == meta[n].feature).then_some(j)
}

/// `tokens . W_proj`, `(S, N, d)`.
pub fn project(tokens: &Array3<f64>, w_proj: &Array2<f64>) -> Array3<f64> {
    let (s, n, p) = tokens.dim();
    let d = w_proj.ncols();
    let flat = tokens.view().into_shape_with_order((s * n, p)).expect("contiguous tokens");
    flat.dot(w_proj).into_shape_with_order((s, n, d)).expect("shape")
}

/// Depthwise convolution along each feature's token sequence, zero padded
/// at feature boundaries. `kernel` is `(width, d)`.
pub fn conv_positions(xp: &Array3<f64>, kernel: &Array2<f64>, meta: &[TokenMeta]) -> Array3<f64> {
    let (s, n, d) = xp.dim();
    let half = (kernel.nrows() / 2) as isize;
    let mut out = Array3::zeros((s, n, d));
    for t in 0..n {
        for (kk, row) in kernel.outer_iter().enumerate() {
            let Some(j) = neighbor(meta, t, kk as isize - half) else {
                continue;
            };
            for k in 0..s {
                for c in 0..d {
                    out[[k, t, c]] += row[c] * xp[[k, j, c]];
                }
            }
        }
    }
    out
}

/// Full token embedding; returns the projected tokens and `H`.
pub fn embed(
    grid: &TokenGrid,
    w_proj: &Array2<f64>,
    kernel: &Array2<f64>,
    codes: &Array2<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let xp = project(&grid.values, w_proj);
    let mut h = conv_positions(&xp, kernel, &grid.meta);
    h += &xp;
    let (s, n, d) = h.dim();
    for t in 0..n {
        let code = codes.row(grid.meta[t].feature);
        for k in 0..s {
            for c in 0..d {
                h[[k, t, c]] += code[c];
            }
        }
    }
    (xp, h)
}

/// `Gamma * (H + E) + B`, broadcast over tokens.
pub fn station_gate(h: &Array3<f64>, gamma: &Array2<f64>, emb: &Array2<f64>, bias: &Array2<f64>) -> Array3<f64> {
    let mut out = h.clone();
    let (s, n, d) = h.dim();
    for k in 0..s {
        for t in 0..n {
            for c in 0..d {
                out[[k, t, c]] = gamma[[k, c]] * (h[[k, t, c]] + emb[[k, c]]) + bias[[k, c]];
            }
        }
    }
    out
}

pub(crate) struct GateGrads {
    pub d_h: Array3<f64>,
    pub gamma: Array2<f64>,
    pub emb: Array2<f64>,
    pub bias: Array2<f64>,
}

pub(crate) fn station_gate_backward(
    d_out: &Array3<f64>,
    h: &Array3<f64>,
    gamma: &Array2<f64>,
    emb: &Array2<f64>,
) -> GateGrads {
    let (s, n, d) = h.dim();
    let mut g = GateGrads {
        d_h: Array3::zeros((s, n, d)),
        gamma: Array2::zeros((s, d)),
        emb: Array2::zeros((s, d)),
        bias: Array2::zeros((s, d)),
    };
    for k in 0..s {
        for t in 0..n {
            for c in 0..d {
                let up = d_out[[k, t, c]];
                g.gamma[[k, c]] += up * (h[[k, t, c]] + emb[[k, c]]);
                g.bias[[k, c]] += up;
                let dh = up * gamma[[k, c]];
                g.d_h[[k, t, c]] = dh;
                g.emb[[k, c]] += dh;
            }
        }
    }
    g
}

/// Gradients of the projection and convolution weights given `dL/dH`.
pub(crate) fn embed_backward(
    d_h: &Array3<f64>,
    grid: &TokenGrid,
    xp: &Array3<f64>,
    kernel: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (s, n, d) = d_h.dim();
    let p = grid.values.dim().2;
    let half = (kernel.nrows() / 2) as isize;
    let mut d_xp = d_h.clone();
    let mut d_kernel = Array2::zeros(kernel.dim());
    for t in 0..n {
        for (kk, row) in kernel.outer_iter().enumerate() {
            let Some(j) = neighbor(&grid.meta, t, kk as isize - half) else {
                continue;
            };
            for k in 0..s {
                for c in 0..d {
                    let up = d_h[[k, t, c]];
                    d_xp[[k, j, c]] += row[c] * up;
                    d_kernel[[kk, c]] += up * xp[[k, j, c]];
                }
            }
        }
    }
    let tokens = grid.values.view().into_shape_with_order((s * n, p)).expect("contiguous tokens");
    let d_xp = d_xp.into_shape_with_order((s * n, d)).expect("shape");
    (tokens.t().dot(&d_xp), d_kernel)
}
