//! Small models and random windows shared by unit tests.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::WindowSample;
use crate::geometry::{StationNetwork, WindSummary};
use crate::model::decoder::Activation;
use crate::model::{Model, ModelSpec};

pub fn tiny_network() -> StationNetwork {
    StationNetwork::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec!["A".into(), "B".into(), "C".into()],
        vec![(59.30, 18.00), (59.33, 18.08), (59.36, 18.02)],
    )
    .unwrap()
}

pub fn tiny_spec(transport: bool) -> ModelSpec {
    ModelSpec {
        stations: 3,
        input_features: vec!["pm10".into(), "wind_speed".into()],
        availabilities: vec![0, 12],
        lookback: 24,
        horizon: 12,
        patch: 6,
        d_model: 4,
        n_heads: 2,
        conv_width: 3,
        activation: Activation::Identity,
        per_channel_gate: false,
        transport,
    }
}

pub fn tiny_model(transport: bool, seed: u64) -> Model {
    Model::new(tiny_spec(transport), &tiny_network(), seed).unwrap()
}

pub fn random_samples(model: &Model, n: usize, seed: u64) -> Vec<WindowSample> {
    let spec = &model.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.stations;
    (0..n)
        .map(|i| {
            let x = spec
                .block_lens()
                .iter()
                .map(|&len| Array2::from_shape_simple_fn((s, len), || rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let y = Array2::from_shape_simple_fn((s, spec.horizon), || rng.sample::<f64, _>(StandardNormal));
            let vectors: Vec<[f64; 2]> = (0..spec.forecast_patches())
                .map(|_| {
                    let th = rng.random_range(0.0..std::f64::consts::TAU);
                    let v = rng.random_range(1.0..6.0);
                    [v * th.cos(), v * th.sin()]
                })
                .collect();
            WindowSample {
                t_index: i,
                t0: i as i64,
                x,
                y,
                wind: vec![WindSummary::from_vectors(&vectors, 0.1)],
            }
        })
        .collect()
}
