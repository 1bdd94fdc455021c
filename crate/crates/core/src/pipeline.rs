//! End-to-end wiring: data sources, datasets with fitted normalization,
//! model construction, training runs and forecast export.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::config::{ModelConfig, RunConfig, SimulatorConfig};
use crate::dataio::{
    chronological_split, format_hour, load_network, load_series, make_windows, FeatureSpec, Frame, Normalizer, Splits,
    WindowConfig, WindowSample,
};
use crate::error::{Error, Result};
use crate::geometry::StationNetwork;
use crate::model::{Model, ModelSpec};
use crate::simulator::{preset, simulate, SimulationOutput};
use crate::training::checkpoint::{station_records, Checkpoint, RunMeta};
use crate::training::{train, TrainConfig, TrainOutcome};

/// Frame, splits, train-fitted normalization and the windows of each split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub network: StationNetwork,
    pub frame: Frame,
    pub features: Vec<FeatureSpec>,
    pub window: WindowConfig,
    pub splits: Splits,
    pub normalizer: Normalizer,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl Dataset {
    /// Splits `frame` chronologically. The normalizer is fitted on the
    /// training hours unless one is supplied.
    pub fn new(
        network: StationNetwork,
        frame: Frame,
        features: Vec<FeatureSpec>,
        window: WindowConfig,
        split: [f64; 3],
        normalizer: Option<Normalizer>,
    ) -> Result<Self> {
        window.validate()?;
        if frame.station_ids != network.station_ids {
            return Err(Error::Schema("series stations differ from the network".into()));
        }
        let splits = chronological_split(frame.hours(), split, window.lookback + window.horizon)?;
        let normalizer = match normalizer {
            Some(n) => n,
            None => Normalizer::fit(&frame, &features, splits.train.clone())?,
        };
        let collect = |range: std::ops::Range<usize>| -> Result<Vec<WindowSample>> {
            Ok(make_windows(&frame, &normalizer, &features, &window, range, true)?.collect())
        };
        let train = collect(splits.train.clone())?;
        let val = collect(splits.val.clone())?;
        let test = collect(splits.test.clone())?;
        for (name, w) in [("train", &train), ("validation", &val), ("test", &test)] {
            if w.is_empty() {
                return Err(Error::SplitTooShort {
                    name,
                    len: 0,
                    needed: 1,
                });
            }
        }
        Ok(Self {
            network,
            frame,
            features,
            window,
            splits,
            normalizer,
            train,
            val,
            test,
        })
    }

    /// Loads files named by the config, or simulates its scenario.
    pub fn from_config(cfg: &RunConfig, normalizer: Option<Normalizer>) -> Result<Self> {
        let features = cfg.features();
        let (network, frame) = match (&cfg.paths.stations, &cfg.paths.series) {
            (Some(st), Some(se)) => {
                let network = load_network(st)?;
                let frame = load_series(se, &network, &features)?;
                (network, frame)
            }
            _ => {
                let sim = simulate_config(&cfg.simulator.clone().unwrap_or_default())?;
                let network = sim_network(&cfg.simulator.clone().unwrap_or_default())?;
                let frame = reframe(&sim.frame, &features)?;
                (network, frame)
            }
        };
        Self::new(network, frame, features, cfg.window(), cfg.data.split, normalizer)
    }

    pub fn target(&self) -> &str {
        &self.features.iter().find(|f| f.is_target).expect("validated target").name
    }
}

/// Re-orders the columns of `frame` to match `specs`; calendar features
/// are recomputed.
pub fn reframe(frame: &Frame, specs: &[FeatureSpec]) -> Result<Frame> {
    let mut cols = HashMap::new();
    for (fi, name) in frame.feature_names.iter().enumerate() {
        cols.insert(name.clone(), frame.values.slice(ndarray::s![.., .., fi]).to_owned());
    }
    Frame::from_columns(frame.start_hour, frame.station_ids.clone(), specs, &cols, frame.hours())
}

fn sim_scenario(sim: &SimulatorConfig) -> Result<crate::simulator::SyntheticScenario> {
    let mut sc = preset(&sim.preset, sim.seed, sim.hours)?;
    if let Some(v) = sim.noise_std {
        sc.noise_std = v;
    }
    if let Some(v) = sim.kappa {
        sc.kappa = v;
    }
    if let Some(v) = sim.decay {
        sc.decay = v;
    }
    Ok(sc)
}

fn sim_network(sim: &SimulatorConfig) -> Result<StationNetwork> {
    Ok(sim_scenario(sim)?.network)
}

/// Runs the configured preset with its overrides.
pub fn simulate_config(sim: &SimulatorConfig) -> Result<SimulationOutput> {
    simulate(&sim_scenario(sim)?, sim.hours)
}

pub fn model_spec(cfg: &ModelConfig, window: &WindowConfig, features: &[FeatureSpec], stations: usize) -> ModelSpec {
    let inputs: Vec<&FeatureSpec> = features.iter().filter(|f| f.input).collect();
    ModelSpec {
        stations,
        input_features: inputs.iter().map(|f| f.name.clone()).collect(),
        availabilities: inputs.iter().map(|f| f.availability).collect(),
        lookback: window.lookback,
        horizon: window.horizon,
        patch: window.patch,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        conv_width: cfg.conv_width,
        activation: cfg.activation,
        per_channel_gate: cfg.per_channel_gate,
        transport: cfg.transport,
    }
}

pub fn build_model(cfg: &ModelConfig, data: &Dataset) -> Result<Model> {
    let spec = model_spec(cfg, &data.window, &data.features, data.network.len());
    Model::new(spec, &data.network, cfg.seed)
}

pub fn run_meta(model: &Model, data: &Dataset, train: &TrainConfig) -> RunMeta {
    RunMeta {
        model: model.spec.clone(),
        window: data.window.clone(),
        features: data.features.clone(),
        normalizer: data.normalizer.clone(),
        train: train.clone(),
        stations: station_records(&data.network),
    }
}

/// Trains a fresh model on `data`; returns the outcome and the best
/// checkpoint.
pub fn train_run(cfg: &RunConfig, data: &Dataset) -> Result<(TrainOutcome, Checkpoint)> {
    let model = build_model(&cfg.model, data)?;
    let outcome = train(model, &data.train, &data.val, &cfg.train)?;
    let ck = Checkpoint::new(&outcome.best, run_meta(&outcome.best, data, &cfg.train), cfg.model.seed);
    Ok((outcome, ck))
}

/// Dataset rebuilt from the checkpoint's own features, window and
/// normalizer over the data source of `cfg`.
pub fn dataset_for_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Dataset> {
    let meta = &ck.meta.config;
    let mut cfg = cfg.clone();
    cfg.features = Some(meta.features.clone());
    let mut data = Dataset::from_config(&cfg, Some(meta.normalizer.clone()))?;
    if data.window != meta.window {
        data = Dataset::new(
            data.network,
            data.frame,
            data.features,
            meta.window.clone(),
            cfg.data.split,
            Some(meta.normalizer.clone()),
        )?;
    }
    if data.network.station_ids != meta.stations.iter().map(|s| s.id.clone()).collect::<Vec<_>>() {
        return Err(Error::Schema("data stations differ from the checkpoint".into()));
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRow {
    /// Anchor (issue) time of the forecast.
    pub timestamp: String,
    pub station_id: String,
    pub horizon_hour: usize,
    pub yhat: f64,
    pub y_if_known: Option<f64>,
}

/// Forecasts in physical units for every window.
pub fn forecast_rows(model: &Model, windows: &[WindowSample], data: &Dataset) -> Result<Vec<ForecastRow>> {
    let fi = data
        .normalizer
        .index(data.target())
        .ok_or_else(|| Error::Config("normalizer lacks target".into()))?;
    let mut rows = Vec::new();
    for w in windows {
        let yhat = model.forward(w)?.yhat;
        for (s, id) in data.network.station_ids.iter().enumerate() {
            for h in 0..model.spec.horizon {
                let y = w.y[[s, h]];
                rows.push(ForecastRow {
                    timestamp: format_hour(w.t0),
                    station_id: id.clone(),
                    horizon_hour: h + 1,
                    yhat: data.normalizer.invert(fi, yhat[[s, h]]),
                    y_if_known: (!y.is_nan()).then(|| data.normalizer.invert(fi, y)),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_forecast(path: impl AsRef<Path>, rows: &[ForecastRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
