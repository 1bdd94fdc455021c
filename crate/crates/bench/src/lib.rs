//! Fixtures shared by the benchmarks.

use advecta_core::config::RunConfig;
use advecta_core::pipeline::{build_model, Dataset};
use advecta_core::{Model, WindowSample};

/// A grid9 dataset and a fresh model of width `d_model`.
pub fn grid9_fixture(d_model: usize, hours: usize) -> (Model, Vec<WindowSample>) {
    let mut cfg = RunConfig {
        simulator: Some(advecta_core::config::SimulatorConfig {
            preset: "grid9".into(),
            seed: 1,
            hours,
            ..Default::default()
        }),
        ..Default::default()
    };
    cfg.model.d_model = d_model;
    cfg.data.stride = 3;
    let data = Dataset::from_config(&cfg, None).expect("grid9 dataset");
    let model = build_model(&cfg.model, &data).expect("model");
    (model, data.train)
}
