//! JSON run configuration. Every section is optional and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{validate_features, FeatureSpec, WindowConfig};
use crate::error::{Error, Result};
use crate::model::decoder::Activation;
use crate::simulator::{scenario_features, PRESETS};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// `station_id,name,lat,lon` file.
    pub stations: Option<PathBuf>,
    /// Long-format `timestamp,station_id,<features...>` file.
    pub series: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            stations: None,
            series: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub horizon: usize,
    /// Defaults to `horizon + 24`.
    pub lookback: Option<usize>,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub conv_width: usize,
    pub activation: Activation,
    pub per_channel_gate: bool,
    pub transport: bool,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            lookback: None,
            patch: 12,
            d_model: 16,
            n_heads: 2,
            conv_width: 3,
            activation: Activation::Identity,
            per_channel_gate: false,
            transport: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Train, validation and test fractions of the hourly span.
    pub split: [f64; 3],
    pub stride: usize,
    pub per_station_wind: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: [0.7, 0.15, 0.15],
            stride: 1,
            per_station_wind: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub preset: String,
    pub seed: u64,
    pub hours: usize,
    pub noise_std: Option<f64>,
    pub kappa: Option<f64>,
    pub decay: Option<f64>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            preset: "grid9".into(),
            seed: 7,
            hours: 4000,
            noise_std: None,
            kappa: None,
            decay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    /// Defaults to the simulator's columns with wind speed tokenized.
    pub features: Option<Vec<FeatureSpec>>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Data source when no station/series paths are given.
    pub simulator: Option<SimulatorConfig>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn features(&self) -> Vec<FeatureSpec> {
        self.features.clone().unwrap_or_else(|| scenario_features(self.model.horizon, true))
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            lookback: self.model.lookback.unwrap_or(self.model.horizon + 24),
            horizon: self.model.horizon,
            patch: self.model.patch,
            stride: self.data.stride,
            per_station_wind: self.data.per_station_wind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window().validate()?;
        validate_features(&self.features(), self.model.horizon, self.model.patch, self.model.transport)?;
        self.train.validate()?;
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) {
            return Err(Error::Config(format!("model.n_heads {} must divide model.d_model {}", m.n_heads, m.d_model)));
        }
        if m.conv_width.is_multiple_of(2) {
            return Err(Error::Config("model.conv_width must be odd".into()));
        }
        let split = self.data.split;
        if split.iter().any(|f| !(*f > 0.0)) || split.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config("data.split fractions must be positive and sum to at most 1".into()));
        }
        match (&self.paths.stations, &self.paths.series) {
            (Some(_), Some(_)) => {}
            (None, None) => {
                if let Some(sim) = &self.simulator {
                    if !PRESETS.contains(&sim.preset.as_str()) {
                        return Err(Error::Config(format!("unknown preset `{}`", sim.preset)));
                    }
                }
            }
            _ => return Err(Error::Config("paths.stations and paths.series must be given together".into())),
        }
        Ok(())
    }
}
