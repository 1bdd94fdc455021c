//! The forecasting model: token embedding, station-wise attention,
//! wind-conditioned transport, gated fusion and patch decoding, with an
//! exact reverse-mode backward pass through all of them.

pub mod decoder;
pub mod embedding;
pub mod local_encoder;
pub mod transport;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSample;
use crate::error::{Error, Result};
use crate::geometry::StationNetwork;
use decoder::{sigmoid, softplus, softplus_inverse, Activation};
use embedding::{TokenGrid, TokenMeta};
use local_encoder::LocalContext;
use transport::{PhysicsCoefficients, TransportPlan};

/// Architecture and window geometry of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub stations: usize,
    /// Names of the tokenized input features, in token order.
    pub input_features: Vec<String>,
    /// Hours past the anchor available for each input feature.
    pub availabilities: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub conv_width: usize,
    pub activation: Activation,
    /// One fusion gate per channel instead of one per station.
    pub per_channel_gate: bool,
    /// When false the transport module is removed entirely.
    pub transport: bool,
}

impl ModelSpec {
    pub fn forecast_patches(&self) -> usize {
        self.horizon / self.patch
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.availabilities.iter().map(|m| self.lookback + m).collect()
    }

    pub fn token_meta(&self) -> Result<Vec<TokenMeta>> {
        embedding::token_layout(&self.block_lens(), self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stations < 2 {
            return Err(Error::NetworkTooSmall(self.stations));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads {} must divide d {}",
                self.n_heads, self.d_model
            )));
        }
        if self.conv_width == 0 || self.conv_width.is_multiple_of(2) {
            return Err(Error::Config("conv_width must be odd".into()));
        }
        if self.patch == 0 || !self.horizon.is_multiple_of(self.patch) || !self.lookback.is_multiple_of(self.patch) {
            return Err(Error::Config("patch length must divide look-back and horizon".into()));
        }
        if self.input_features.len() != self.availabilities.len() || self.input_features.is_empty() {
            return Err(Error::Config("input features and availabilities differ".into()));
        }
        self.token_meta().map(|_| ())
    }
}

macro_rules! model_params {
    ($($(#[$doc:meta])* $field:ident),* $(,)?) => {
        /// Every trainable tensor, stored as 2-D arrays (scalars are `1 x 1`).
        ///
        /// The same struct holds gradients and optimizer moments.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ModelParams {
            $($(#[$doc])* pub $field: Array2<f64>,)*
        }

        impl ModelParams {
            /// Stable enumeration order used for checkpoints and optimizers.
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }

            pub fn zeros_like(&self) -> Self {
                Self { $($field: Array2::zeros(self.$field.dim()),)* }
            }
        }
    };
}

model_params! {
    /// `(P, d)` patch projection.
    w_proj,
    /// `(conv_width, d)` depthwise kernel over token sequences.
    conv_kernel,
    /// `(S, d)` station embedding `E`.
    station_emb,
    /// `(S, d)` gate scale `Gamma`.
    gate_scale,
    /// `(S, d)` gate offset `B`.
    gate_bias,
    w_k,
    w_v,
    w_q,
    /// `(M_pred, d)` learnable temporal query code.
    query_time,
    /// `(1, d)` learnable query code of the predicted feature.
    query_feat,
    /// Unconstrained; the coefficient is `softplus` of this value.
    alpha_dir,
    alpha_dist,
    beta_speed,
    sigma_d,
    eps_margin,
    /// `(S, S)` residual adjacency logits `U`.
    residual_adj,
    /// `(S, 1)` or `(S, d)` fusion gates.
    gamma,
    /// `(d, P)`
    w_dec,
    /// `(1, P)`
    b_dec,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn all_finite(&self) -> std::result::Result<(), &'static str> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }

    /// Physics coefficients mapped to their positive domain.
    pub fn coefficients(&self) -> PhysicsCoefficients {
        PhysicsCoefficients {
            alpha_dir: softplus(self.alpha_dir[[0, 0]]),
            alpha_dist: softplus(self.alpha_dist[[0, 0]]),
            beta_speed: softplus(self.beta_speed[[0, 0]]),
            sigma_d: softplus(self.sigma_d[[0, 0]]),
            eps: softplus(self.eps_margin[[0, 0]]),
        }
    }

    /// Fresh parameters. Projections and embeddings start small, the
    /// station gate as identity, the transport kernel as pure physics.
    pub fn init(spec: &ModelSpec, median_distance: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, d, p, m) = (spec.stations, spec.d_model, spec.patch, spec.forecast_patches());
        let mut normal = |shape: (usize, usize), std: f64| {
            let dist = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn(shape, |_| dist.sample(&mut rng))
        };
        let attn_std = 1.0 / (d as f64).sqrt();
        let scalar = |v: f64| Array2::from_elem((1, 1), softplus_inverse(v));
        Self {
            w_proj: normal((p, d), 0.02),
            conv_kernel: normal((spec.conv_width, d), 0.02),
            station_emb: normal((s, d), 0.02),
            gate_scale: Array2::ones((s, d)),
            gate_bias: Array2::zeros((s, d)),
            w_k: normal((d, d), attn_std),
            w_v: normal((d, d), attn_std),
            w_q: normal((d, d), attn_std),
            query_time: normal((m, d), 1.0),
            query_feat: normal((1, d), 1.0),
            alpha_dir: scalar(1.0),
            alpha_dist: scalar(1.0),
            beta_speed: scalar(1.0),
            sigma_d: scalar(median_distance),
            eps_margin: scalar(0.05),
            residual_adj: Array2::zeros((s, s)),
            gamma: Array2::from_elem((s, if spec.per_channel_gate { d } else { 1 }), 0.1),
            w_dec: normal((d, p), attn_std),
            b_dec: Array2::zeros((1, p)),
        }
    }

    /// Reorders every station-indexed tensor so that new station `k` is
    /// old station `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows = |a: &Array2<f64>| a.select(ndarray::Axis(0), perm);
        let mut out = self.clone();
        out.station_emb = rows(&self.station_emb);
        out.gate_scale = rows(&self.gate_scale);
        out.gate_bias = rows(&self.gate_bias);
        out.gamma = rows(&self.gamma);
        out.residual_adj = rows(&self.residual_adj).select(ndarray::Axis(1), perm);
        out
    }
}

/// Model spec, station geometry and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub distances: Array2<f64>,
    pub bearings: Array3<f64>,
    pub params: ModelParams,
    codes: Array2<f64>,
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub grid: TokenGrid,
    pub xp: Array3<f64>,
    pub h: Array3<f64>,
    pub ht: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
    pub q_emb: Array2<f64>,
    pub q: Array2<f64>,
    pub local: LocalContext,
    pub coefficients: PhysicsCoefficients,
    /// One plan per forecast patch; empty without transport.
    pub plans: Vec<TransportPlan>,
    pub cnb: Option<Array3<f64>>,
    pub c: Array3<f64>,
    pub pre: Array3<f64>,
    /// `(S, H)` forecast in normalized target units.
    pub yhat: Array2<f64>,
}

/// Forecast with its attribution tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    pub yhat: Array2<f64>,
    /// `(S, M_pred, N_all)` head-averaged attention.
    pub attention: Array3<f64>,
    /// One `(S, S)` spatial weight matrix per patch.
    pub spatial: Vec<Array2<f64>>,
    pub gamma: Array2<f64>,
    pub g: Array3<f64>,
    pub cnb: Option<Array3<f64>>,
}

impl ForwardPass {
    pub fn bundle(&self, gamma: &Array2<f64>) -> ForecastBundle {
        ForecastBundle {
            yhat: self.yhat.clone(),
            attention: self.local.attribution(),
            spatial: self.plans.iter().map(|p| p.weights.clone()).collect(),
            gamma: gamma.clone(),
            g: self.local.g.clone(),
            cnb: self.cnb.clone(),
        }
    }
}

impl Model {
    pub fn new(spec: ModelSpec, network: &StationNetwork, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&spec, network.median_distance(), seed);
        Self::from_parts(spec, network.distances.clone(), network.bearings.clone(), params)
    }

    pub fn from_parts(spec: ModelSpec, distances: Array2<f64>, bearings: Array3<f64>, params: ModelParams) -> Result<Self> {
        spec.validate()?;
        let s = spec.stations;
        if distances.dim() != (s, s) || bearings.dim() != (s, s, 2) {
            return Err(Error::Shape("geometry does not match station count".into()));
        }
        let expected = ModelParams::init(&spec, 1.0, 0);
        for ((name, a), (_, b)) in params.tensors().into_iter().zip(expected.tensors()) {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!("parameter `{name}` has shape {:?}, expected {:?}", a.dim(), b.dim())));
            }
        }
        let codes = embedding::feature_codes(spec.input_features.len(), spec.d_model);
        Ok(Self {
            spec,
            distances,
            bearings,
            params,
            codes,
        })
    }

    /// Same model on a reordered network.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let d = self.distances.select(ndarray::Axis(0), perm).select(ndarray::Axis(1), perm);
        let b = self.bearings.select(ndarray::Axis(0), perm).select(ndarray::Axis(1), perm);
        Self::from_parts(self.spec.clone(), d, b, self.params.permuted(perm))
    }

    fn check_sample(&self, sample: &WindowSample) -> Result<()> {
        let spec = &self.spec;
        if sample.x.len() != spec.availabilities.len() {
            return Err(Error::Shape(format!(
                "sample has {} input features, model expects {}",
                sample.x.len(),
                spec.availabilities.len()
            )));
        }
        for (block, len) in sample.x.iter().zip(spec.block_lens()) {
            if block.dim() != (spec.stations, len) {
                return Err(Error::Shape(format!("input block {:?}, expected {:?}", block.dim(), (spec.stations, len))));
            }
        }
        if spec.transport {
            let m = spec.forecast_patches();
            let ok = (sample.wind.len() == 1 || sample.wind.len() == spec.stations)
                && sample.wind.iter().all(|w| w.patches() == m);
            if !ok {
                return Err(Error::Shape("wind summary does not match forecast patches".into()));
            }
        }
        Ok(())
    }

    pub fn forward(&self, sample: &WindowSample) -> Result<ForwardPass> {
        self.check_sample(sample)?;
        let p = &self.params;
        let spec = &self.spec;
        let grid = embedding::tokenize(&sample.x, spec.patch)?;
        let (xp, h) = embedding::embed(&grid, &p.w_proj, &p.conv_kernel, &self.codes);
        let ht = embedding::station_gate(&h, &p.gate_scale, &p.station_emb, &p.gate_bias);
        let (k, v) = local_encoder::project_kv(&ht, &p.w_k, &p.w_v);
        let (q_emb, q) = local_encoder::build_queries(&p.query_time, &p.query_feat, &p.w_q);
        let local = local_encoder::attend(&q, &k, &v, spec.n_heads);
        let coefficients = p.coefficients();
        let (plans, cnb, c) = if spec.transport {
            let plans: Vec<TransportPlan> = (0..spec.forecast_patches())
                .map(|m| {
                    transport::build_plan(&self.distances, &self.bearings, &sample.wind, m, &coefficients, &p.residual_adj)
                })
                .collect();
            let cnb = transport::aggregate(&plans, &local.g);
            let c = decoder::fuse(&local.g, &cnb, &p.gamma);
            (plans, Some(cnb), c)
        } else {
            (Vec::new(), None, local.g.clone())
        };
        let (pre, patches) = decoder::decode(&c, &p.w_dec, &p.b_dec, spec.activation);
        let yhat = decoder::reshape_forecast(&patches, spec.horizon)?;
        Ok(ForwardPass {
            grid,
            xp,
            h,
            ht,
            k,
            v,
            q_emb,
            q,
            local,
            coefficients,
            plans,
            cnb,
            c,
            pre,
            yhat,
        })
    }

    pub fn predict(&self, sample: &WindowSample) -> Result<ForecastBundle> {
        Ok(self.forward(sample)?.bundle(&self.params.gamma))
    }

    /// Gradients of a scalar objective given `d_yhat = dL/dY_hat` for the
    /// forward pass `pass`.
    pub fn backward(&self, pass: &ForwardPass, d_yhat: &Array2<f64>) -> Result<ModelParams> {
        let p = &self.params;
        let spec = &self.spec;
        let mut grads = p.zeros_like();

        let d_patches = decoder::unreshape_forecast(d_yhat, spec.patch)?;
        let dec = decoder::decode_backward(&d_patches, &pass.pre, &pass.c, &p.w_dec, spec.activation);
        grads.w_dec = dec.w_dec;
        grads.b_dec = dec.b_dec;
        let mut d_g = dec.d_c;

        if let Some(cnb) = &pass.cnb {
            let (s_len, m_pred, d) = cnb.dim();
            let per_channel = p.gamma.ncols() > 1;
            let mut d_cnb = Array3::zeros(cnb.dim());
            for s in 0..s_len {
                for m in 0..m_pred {
                    for ch in 0..d {
                        let col = if per_channel { ch } else { 0 };
                        let up = d_g[[s, m, ch]];
                        grads.gamma[[s, col]] += up * cnb[[s, m, ch]];
                        d_cnb[[s, m, ch]] = up * p.gamma[[s, col]];
                    }
                }
            }
            let tg = transport::transport_backward(&d_cnb, &pass.plans, &pass.local.g, &self.distances, &pass.coefficients);
            d_g += &tg.d_g;
            grads.residual_adj = tg.d_residual;
            let raw = [&p.alpha_dir, &p.alpha_dist, &p.beta_speed, &p.sigma_d, &p.eps_margin];
            let outs = [
                &mut grads.alpha_dir,
                &mut grads.alpha_dist,
                &mut grads.beta_speed,
                &mut grads.sigma_d,
                &mut grads.eps_margin,
            ];
            for (i, (r, o)) in raw.into_iter().zip(outs).enumerate() {
                o[[0, 0]] = tg.d_coeffs[i] * sigmoid(r[[0, 0]]);
            }
        }

        let ag = local_encoder::attend_backward(&d_g, &pass.local, &pass.q, &pass.k, &pass.v);
        grads.w_q = pass.q_emb.t().dot(&ag.d_q);
        let d_qemb = ag.d_q.dot(&p.w_q.t());
        grads.query_feat = d_qemb.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        grads.query_time = d_qemb;

        let (s_len, n, d) = pass.ht.dim();
        let ht = pass.ht.view().into_shape_with_order((s_len * n, d)).expect("contiguous");
        let dk = ag.d_k.into_shape_with_order((s_len * n, d)).expect("shape");
        let dv = ag.d_v.into_shape_with_order((s_len * n, d)).expect("shape");
        grads.w_k = ht.t().dot(&dk);
        grads.w_v = ht.t().dot(&dv);
        let d_ht = (dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t()))
            .into_shape_with_order((s_len, n, d))
            .expect("shape");

        let gg = embedding::station_gate_backward(&d_ht, &pass.h, &p.gate_scale, &p.station_emb);
        grads.gate_scale = gg.gamma;
        grads.gate_bias = gg.bias;
        grads.station_emb = gg.emb;
        let (d_proj, d_kernel) = embedding::embed_backward(&gg.d_h, &pass.grid, &pass.xp, &p.conv_kernel);
        grads.w_proj = d_proj;
        grads.conv_kernel = d_kernel;
        Ok(grads)
    }
}
