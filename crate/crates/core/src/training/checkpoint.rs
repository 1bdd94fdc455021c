//! JSON checkpoints: run metadata plus every parameter tensor as nested
//! arrays of 64-bit decimals.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::dataio::{FeatureSpec, Normalizer, WindowConfig};
use crate::error::{Error, Result};
use crate::geometry::StationNetwork;
use crate::model::{Model, ModelParams, ModelSpec};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationRecord {
    pub id: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

/// Everything needed to rebuild the model and its data pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub model: ModelSpec,
    pub window: WindowConfig,
    pub features: Vec<FeatureSpec>,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    pub stations: Vec<StationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunMeta,
    pub code_version: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
}

pub fn station_records(network: &StationNetwork) -> Vec<StationRecord> {
    (0..network.len())
        .map(|i| StationRecord {
            id: network.station_ids[i].clone(),
            name: network.names[i].clone(),
            lat: network.latlon[i].0,
            lon: network.latlon[i].1,
        })
        .collect()
}

impl Checkpoint {
    pub fn new(model: &Model, config: RunMeta, seed: u64) -> Self {
        let params = model
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| (name.to_string(), t.outer_iter().map(|r| r.to_vec()).collect()))
            .collect();
        Self {
            meta: CheckpointMeta {
                config,
                code_version: CODE_VERSION.to_string(),
                seed,
            },
            params,
        }
    }

    pub fn network(&self) -> Result<StationNetwork> {
        let st = &self.meta.config.stations;
        StationNetwork::new(
            st.iter().map(|s| s.id.clone()).collect(),
            st.iter().map(|s| s.name.clone()).collect(),
            st.iter().map(|s| (s.lat, s.lon)).collect(),
        )
    }

    pub fn model(&self) -> Result<Model> {
        let network = self.network()?;
        let spec = self.meta.config.model.clone();
        let mut params = ModelParams::init(&spec, network.median_distance(), 0);
        for (name, t) in params.tensors_mut() {
            let rows = self
                .params
                .get(name)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor `{name}`")))?;
            *t = to_array(name, rows, t.dim())?;
        }
        if let Some(extra) = self.params.keys().find(|k| !ModelParams::NAMES.contains(&k.as_str())) {
            return Err(Error::Schema(format!("unknown tensor `{extra}` in checkpoint")));
        }
        Model::from_parts(spec, network.distances.clone(), network.bearings.clone(), params)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn to_array(name: &str, rows: &[Vec<f64>], dim: (usize, usize)) -> Result<Array2<f64>> {
    if rows.len() != dim.0 || rows.iter().any(|r| r.len() != dim.1) {
        return Err(Error::Shape(format!("tensor `{name}` should be {dim:?}")));
    }
    Ok(Array2::from_shape_vec(dim, rows.concat()).expect("checked shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_model, tiny_network, tiny_spec};

    fn meta() -> RunMeta {
        let spec = tiny_spec(true);
        RunMeta {
            window: WindowConfig::new(spec.horizon, spec.patch),
            model: spec,
            features: vec![FeatureSpec::target("pm10")],
            normalizer: Normalizer {
                names: vec!["pm10".into()],
                mean: vec![20.0],
                std: vec![0.1 + 0.2],
            },
            train: TrainConfig::default(),
            stations: station_records(&tiny_network()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = tiny_model(true, 17);
        let ck = Checkpoint::new(&model, meta(), 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.model().unwrap();
        assert_eq!(rebuilt.params, model.params);
        assert_eq!(rebuilt.distances, model.distances);
    }

    #[test]
    fn bad_tensors_rejected() {
        let model = tiny_model(true, 1);
        let mut ck = Checkpoint::new(&model, meta(), 1);
        ck.params.get_mut("w_q").unwrap().pop();
        assert!(matches!(ck.model(), Err(Error::Shape(_))));
        let mut ck = Checkpoint::new(&model, meta(), 1);
        ck.params.remove("gamma");
        assert!(matches!(ck.model(), Err(Error::Schema(_))));
    }

    #[test]
    fn unknown_meta_keys_rejected() {
        let ck = Checkpoint::new(&tiny_model(true, 1), meta(), 1);
        let mut v = serde_json::to_value(&ck).unwrap();
        v["meta"]["colour"] = 1.into();
        assert!(serde_json::from_value::<Checkpoint>(v).is_err());
    }
}
