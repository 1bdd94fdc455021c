//! Station-wise attention with learnable target queries.
//!
//! Queries do not depend on the input; they are learned per forecast
//! patch and shared by every station. Keys and values come from the gated
//! token embeddings of each station separately, so no information crosses
//! stations here.

use ndarray::{s, Array2, Array3, Array4, Axis};

/// Attention output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalContext {
    /// `(S, M_pred, d)` context vectors.
    pub g: Array3<f64>,
    /// `(S, n_heads, M_pred, N_all)` per-head attention weights.
    pub heads: Array4<f64>,
}

impl LocalContext {
    /// Attention weights averaged over heads, `(S, M_pred, N_all)`.
    pub fn attribution(&self) -> Array3<f64> {
        self.heads.mean_axis(Axis(1)).expect("at least one head")
    }
}

/// `(P_time + P_feat) W_Q`; returns the query embedding and the queries.
pub fn build_queries(time: &Array2<f64>, feat: &Array2<f64>, w_q: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let q_emb = time + &feat.row(0);
    let q = q_emb.dot(w_q);
    (q_emb, q)
}

/// Per-station `H~ W` for a `(d, d)` weight.
pub fn project_tokens(ht: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (s, n, d) = ht.dim();
    let flat = ht.view().into_shape_with_order((s * n, d)).expect("contiguous");
    flat.dot(w).into_shape_with_order((s, n, w.ncols())).expect("shape")
}

pub fn project_kv(ht: &Array3<f64>, w_k: &Array2<f64>, w_v: &Array2<f64>) -> (Array3<f64>, Array3<f64>) {
    (project_tokens(ht, w_k), project_tokens(ht, w_v))
}

/// In-place numerically stable softmax of a row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Multi-head scaled dot-product attention of shared queries over each
/// station's tokens.
pub fn attend(q: &Array2<f64>, k: &Array3<f64>, v: &Array3<f64>, n_heads: usize) -> LocalContext {
    let (s_len, n, d) = k.dim();
    let m_pred = q.nrows();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Array4::zeros((s_len, n_heads, m_pred, n));
    let mut g = Array3::zeros((s_len, m_pred, d));
    let mut row = vec![0.0; n];
    for s in 0..s_len {
        for h in 0..n_heads {
            let ch = h * dk..(h + 1) * dk;
            for m in 0..m_pred {
                for (t, r) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in ch.clone() {
                        acc += q[[m, c]] * k[[s, t, c]];
                    }
                    *r = acc * scale;
                }
                softmax_in_place(&mut row);
                for (t, &p) in row.iter().enumerate() {
                    heads[[s, h, m, t]] = p;
                    for c in ch.clone() {
                        g[[s, m, c]] += p * v[[s, t, c]];
                    }
                }
            }
        }
    }
    LocalContext { g, heads }
}

pub(crate) struct AttendGrads {
    /// Summed over stations (queries are shared).
    pub d_q: Array2<f64>,
    pub d_k: Array3<f64>,
    pub d_v: Array3<f64>,
}

pub(crate) fn attend_backward(
    d_g: &Array3<f64>,
    ctx: &LocalContext,
    q: &Array2<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
) -> AttendGrads {
    let (s_len, n, d) = k.dim();
    let (_, n_heads, m_pred, _) = ctx.heads.dim();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = AttendGrads {
        d_q: Array2::zeros(q.dim()),
        d_k: Array3::zeros(k.dim()),
        d_v: Array3::zeros(v.dim()),
    };
    let mut dp = vec![0.0; n];
    for s in 0..s_len {
        for h in 0..n_heads {
            let ch = h * dk..(h + 1) * dk;
            let probs = ctx.heads.slice(s![s, h, .., ..]);
            for m in 0..m_pred {
                let mut inner = 0.0;
                for t in 0..n {
                    let p = probs[[m, t]];
                    let mut acc = 0.0;
                    for c in ch.clone() {
                        let up = d_g[[s, m, c]];
                        acc += up * v[[s, t, c]];
                        out.d_v[[s, t, c]] += p * up;
                    }
                    dp[t] = acc;
                    inner += p * acc;
                }
                for t in 0..n {
                    let dl = probs[[m, t]] * (dp[t] - inner) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    for c in ch.clone() {
                        out.d_q[[m, c]] += dl * k[[s, t, c]];
                        out.d_k[[s, t, c]] += dl * q[[m, c]];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn queries_shared_and_zero() {
        let time = Array2::from_shape_fn((6, 4), |(m, c)| (m + c) as f64);
        let feat = Array2::from_elem((1, 4), 0.5);
        let (emb, q) = build_queries(&time, &feat, &Array2::eye(4));
        assert_eq!(emb[[2, 1]], 3.5);
        assert_eq!(q, emb);
        assert_eq!(q.nrows(), 6);
        let (_, q0) = build_queries(&Array2::zeros((6, 4)), &Array2::zeros((1, 4)), &Array2::ones((4, 4)));
        assert!(q0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kv_projection_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ht = random3(&mut rng, (2, 16, 4));
        let w = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let (k, v) = project_kv(&ht, &Array2::eye(4), &w);
        assert_eq!(k, ht);
        for s in 0..2 {
            for t in 0..16 {
                for c in 0..4 {
                    let mut acc = 0.0;
                    for j in 0..4 {
                        acc += ht[[s, t, j]] * w[[j, c]];
                    }
                    assert!((v[[s, t, c]] - acc).abs() < 1e-12);
                }
            }
        }
        let (k0, _) = project_kv(&Array3::zeros((2, 3, 4)), &w, &w);
        assert!(k0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_and_saturated_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random3(&mut rng, (2, 5, 4));
        let v = random3(&mut rng, (2, 5, 4));
        let ctx = attend(&Array2::zeros((3, 4)), &k, &v, 2);
        assert!(ctx.heads.iter().all(|&p| (p - 0.2).abs() < 1e-15));

        let mut k = Array3::zeros((1, 4, 1));
        k[[0, 2, 0]] = 1000.0;
        let ctx = attend(&Array2::ones((1, 1)), &k, &Array3::ones((1, 4, 1)), 1);
        assert!((ctx.heads[[0, 0, 0, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s_len, m_pred, n, d) = (2, 2, 5, 4);
        let q = Array2::from_shape_fn((m_pred, d), |_| rng.random_range(-1.0..1.0));
        let k = random3(&mut rng, (s_len, n, d));
        let v = random3(&mut rng, (s_len, n, d));
        let ctx = attend(&q, &k, &v, 1);
        for s in 0..s_len {
            for m in 0..m_pred {
                let logits: Vec<f64> = (0..n)
                    .map(|t| (0..d).map(|c| q[[m, c]] * k[[s, t, c]]).sum::<f64>() / 2.0)
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..d {
                    let expected: f64 = (0..n).map(|t| logits[t].exp() / z * v[[s, t, c]]).sum();
                    assert!((ctx.g[[s, m, c]] - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let k = random3(&mut rng, (3, 7, 6));
            let v = random3(&mut rng, (3, 7, 6));
            let q = Array2::from_shape_fn((2, 6), |_| rng.random_range(-3.0..3.0));
            let ctx = attend(&q, &k, &v, 3);
            for row in ctx.heads.lanes(Axis(3)) {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            assert_eq!(ctx.g.dim(), (3, 2, 6));
        }
        let mut row = vec![0.3, -1.2, 2.0];
        let mut shifted: Vec<f64> = row.iter().map(|v| v + 17.5).collect();
        softmax_in_place(&mut row);
        softmax_in_place(&mut shifted);
        for (a, b) in row.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stations_do_not_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random3(&mut rng, (3, 5, 4));
        let v = random3(&mut rng, (3, 5, 4));
        let q = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let base = attend(&q, &k, &v, 2);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2.slice_mut(s![1, .., ..]).mapv_inplace(|x| x * 3.0 - 1.0);
        v2.slice_mut(s![1, .., ..]).mapv_inplace(|x| x + 2.0);
        let pert = attend(&q, &k2, &v2, 2);
        for st in [0, 2] {
            assert_eq!(base.g.slice(s![st, .., ..]), pert.g.slice(s![st, .., ..]));
        }
    }
}
