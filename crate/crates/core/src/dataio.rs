//! Station and series ingestion, normalization, chronological splits and
//! window construction.
//!
//! A [`Frame`] is a dense `(time, station, feature)` array on an hourly
//! grid, with `NaN` marking missing values. Features keep the order of the
//! [`FeatureSpec`] list they were loaded with; calendar features are derived
//! from the timestamps rather than read from the series file.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Datelike, TimeZone, Timelike, Utc};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{StationNetwork, WindSummary};

/// Longest run of missing hours that is forward-filled.
pub const MAX_FILL_HOURS: usize = 3;
/// Patch-mean wind slower than this (m/s) counts as calm.
pub const CALM_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Pollutant,
    MeteorologyForecast,
    Calendar,
    ExogenousForecast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindComponent {
    /// Wind speed in m/s.
    Speed,
    /// Meteorological direction in degrees: where the wind comes from.
    Direction,
}

/// One input column and how far past the anchor hour it is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    /// Hours past the anchor for which the feature is available (`m_i`).
    pub availability: usize,
    #[serde(default)]
    pub is_target: bool,
    pub role: FeatureRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wind_component: Option<WindComponent>,
    /// Whether the feature is tokenized as a model input. Wind columns may
    /// be used only for the transport wind summary.
    #[serde(default = "default_true")]
    pub input: bool,
}

fn default_true() -> bool {
    true
}

impl FeatureSpec {
    pub fn new(name: &str, availability: usize, role: FeatureRole) -> Self {
        Self {
            name: name.to_string(),
            availability,
            is_target: false,
            role,
            wind_component: None,
            input: true,
        }
    }

    pub fn target(name: &str) -> Self {
        Self {
            is_target: true,
            ..Self::new(name, 0, FeatureRole::Pollutant)
        }
    }

    pub fn wind(mut self, component: WindComponent) -> Self {
        self.wind_component = Some(component);
        self
    }

    pub fn not_input(mut self) -> Self {
        self.input = false;
        self
    }
}

const CALENDAR_FEATURES: [&str; 4] = ["hour_sin", "hour_cos", "dow_sin", "dow_cos"];

fn calendar_value(name: &str, hour: i64) -> f64 {
    let ts = Utc.timestamp_opt(hour * 3600, 0).single().expect("hour in range");
    let tau = std::f64::consts::TAU;
    let h = ts.hour() as f64 / 24.0;
    let dow = ts.weekday().num_days_from_monday() as f64 / 7.0;
    match name {
        "hour_sin" => (tau * h).sin(),
        "hour_cos" => (tau * h).cos(),
        "dow_sin" => (tau * dow).sin(),
        "dow_cos" => (tau * dow).cos(),
        _ => unreachable!("calendar names validated"),
    }
}

/// Checks the feature list against the window geometry.
pub fn validate_features(specs: &[FeatureSpec], horizon: usize, patch: usize, transport: bool) -> Result<()> {
    let targets: Vec<_> = specs.iter().filter(|f| f.is_target).collect();
    if targets.len() != 1 {
        return Err(Error::Config(format!("exactly one target feature required, found {}", targets.len())));
    }
    if targets[0].availability != 0 || !targets[0].input {
        return Err(Error::Config("target feature must be an input with availability 0".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for f in specs {
        if !seen.insert(f.name.as_str()) {
            return Err(Error::Config(format!("duplicate feature `{}`", f.name)));
        }
        if f.availability > horizon {
            return Err(Error::Config(format!(
                "feature `{}` availability {} exceeds horizon {horizon}",
                f.name, f.availability
            )));
        }
        if patch == 0 || f.availability % patch != 0 {
            return Err(Error::Config(format!(
                "feature `{}` availability {} is not a multiple of patch length {patch}",
                f.name, f.availability
            )));
        }
        if f.role == FeatureRole::Calendar && !CALENDAR_FEATURES.contains(&f.name.as_str()) {
            return Err(Error::Config(format!(
                "unknown calendar feature `{}` (expected one of {CALENDAR_FEATURES:?})",
                f.name
            )));
        }
        if f.wind_component.is_some() && f.availability != horizon {
            return Err(Error::Config(format!("wind feature `{}` must be available for the full horizon", f.name)));
        }
    }
    let count = |c| specs.iter().filter(|f| f.wind_component == Some(c)).count();
    let (speed, dir) = (count(WindComponent::Speed), count(WindComponent::Direction));
    if speed > 1 || dir > 1 {
        return Err(Error::Config("at most one wind speed and one wind direction feature".into()));
    }
    if transport && (speed != 1 || dir != 1) {
        return Err(Error::Config(
            "transport requires one wind speed and one wind direction feature".into(),
        ));
    }
    Ok(())
}

/// Reads `station_id,name,lat,lon`.
pub fn load_network(path: impl AsRef<Path>) -> Result<StationNetwork> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let (ci, cn, clat, clon) = (col("station_id")?, col("name")?, col("lat")?, col("lon")?);
    let (mut ids, mut names, mut latlon) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize, what: &str| {
            field(i).parse::<f64>().map_err(|_| {
                Error::Schema(format!("{}: row {}: non-numeric {what} `{}`", path.display(), row + 2, field(i)))
            })
        };
        let id = field(ci).to_string();
        if ids.contains(&id) {
            return Err(Error::Schema(format!("{}: duplicate station_id `{id}`", path.display())));
        }
        latlon.push((num(clat, "lat")?, num(clon, "lon")?));
        names.push(field(cn).to_string());
        ids.push(id);
    }
    if ids.len() < 2 {
        return Err(Error::NetworkTooSmall(ids.len()));
    }
    StationNetwork::new(ids, names, latlon)
}

pub fn write_network(path: impl AsRef<Path>, network: &StationNetwork) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let wrap = |e| Error::csv(path, e);
    w.write_record(["station_id", "name", "lat", "lon"]).map_err(wrap)?;
    for k in 0..network.len() {
        let (lat, lon) = network.latlon[k];
        w.write_record([
            network.station_ids[k].as_str(),
            network.names[k].as_str(),
            &lat.to_string(),
            &lon.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dense hourly `(time, station, feature)` array; `NaN` marks missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Hours since the Unix epoch of row 0.
    pub start_hour: i64,
    pub station_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub values: Array3<f64>,
}

pub fn parse_hour(s: &str) -> Result<i64> {
    let ts: DateTime<Utc> = s
        .trim()
        .parse()
        .map_err(|e| Error::Schema(format!("bad timestamp `{s}`: {e}")))?;
    if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
        return Err(Error::Schema(format!("timestamp `{s}` is not on an exact hour")));
    }
    Ok(ts.timestamp().div_euclid(3600))
}

pub fn format_hour(hour: i64) -> String {
    Utc.timestamp_opt(hour * 3600, 0)
        .single()
        .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_default()
}

impl Frame {
    /// Builds a frame from raw `(time, station)` columns keyed by feature
    /// name. Calendar features are computed; gaps are forward-filled.
    pub fn from_columns(
        start_hour: i64,
        station_ids: Vec<String>,
        specs: &[FeatureSpec],
        columns: &HashMap<String, Array2<f64>>,
        hours: usize,
    ) -> Result<Self> {
        let s = station_ids.len();
        let mut values = Array3::from_elem((hours, s, specs.len()), f64::NAN);
        for (fi, spec) in specs.iter().enumerate() {
            if spec.role == FeatureRole::Calendar {
                for t in 0..hours {
                    let v = calendar_value(&spec.name, start_hour + t as i64);
                    for k in 0..s {
                        values[[t, k, fi]] = v;
                    }
                }
                continue;
            }
            let col = columns
                .get(&spec.name)
                .ok_or_else(|| Error::Schema(format!("missing feature column `{}`", spec.name)))?;
            if col.dim() != (hours, s) {
                return Err(Error::Shape(format!("column `{}` has shape {:?}", spec.name, col.dim())));
            }
            values.slice_mut(ndarray::s![.., .., fi]).assign(col);
        }
        forward_fill(&mut values, MAX_FILL_HOURS);
        Ok(Self {
            start_hour,
            station_ids,
            feature_names: specs.iter().map(|f| f.name.clone()).collect(),
            values,
        })
    }

    pub fn hours(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn stations(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Reorders the station axis so that new station `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (k, &p) in perm.iter().enumerate() {
            out.station_ids[k] = self.station_ids[p].clone();
            out.values
                .slice_mut(ndarray::s![.., k, ..])
                .assign(&self.values.slice(ndarray::s![.., p, ..]));
        }
        out
    }
}

/// Fills runs of at most `limit` missing hours with the preceding value.
fn forward_fill(values: &mut Array3<f64>, limit: usize) {
    let (t_len, s_len, f_len) = values.dim();
    for s in 0..s_len {
        for f in 0..f_len {
            let mut t = 0;
            while t < t_len {
                if !values[[t, s, f]].is_nan() {
                    t += 1;
                    continue;
                }
                let start = t;
                while t < t_len && values[[t, s, f]].is_nan() {
                    t += 1;
                }
                if start > 0 && t - start <= limit {
                    let prev = values[[start - 1, s, f]];
                    for u in start..t {
                        values[[u, s, f]] = prev;
                    }
                }
            }
        }
    }
}

/// Reads `timestamp,station_id,<features...>` into a [`Frame`] aligned to
/// the network's station order.
pub fn load_series(path: impl AsRef<Path>, network: &StationNetwork, specs: &[FeatureSpec]) -> Result<Frame> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let schema = |msg: String| Error::Schema(format!("{}: {msg}", path.display()));
    let ct = find("timestamp").ok_or_else(|| schema("missing column `timestamp`".into()))?;
    let cs = find("station_id").ok_or_else(|| schema("missing column `station_id`".into()))?;
    let mut feature_cols = Vec::new();
    for spec in specs.iter().filter(|f| f.role != FeatureRole::Calendar) {
        let c = find(&spec.name).ok_or_else(|| schema(format!("missing feature column `{}`", spec.name)))?;
        feature_cols.push((spec.name.clone(), c));
    }

    let s = network.len();
    let mut rows: Vec<(i64, usize, Vec<f64>)> = Vec::new();
    let mut last: Vec<Option<i64>> = vec![None; s];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = i + 2;
        let hour = parse_hour(rec.get(ct).unwrap_or("")).map_err(|e| schema(format!("line {line}: {e}")))?;
        let id = rec.get(cs).unwrap_or("").trim();
        let k = network
            .index_of(id)
            .ok_or_else(|| schema(format!("line {line}: unknown station id `{id}`")))?;
        if let Some(prev) = last[k] {
            if hour <= prev {
                return Err(schema(format!("line {line}: timestamps for station `{id}` are not increasing")));
            }
        }
        last[k] = Some(hour);
        let mut vals = Vec::with_capacity(feature_cols.len());
        for (name, c) in &feature_cols {
            let raw = rec.get(*c).unwrap_or("").trim();
            let v = if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                raw.parse::<f64>()
                    .map_err(|_| schema(format!("line {line}: non-numeric `{name}` value `{raw}`")))?
            };
            vals.push(v);
        }
        rows.push((hour, k, vals));
    }
    let start = rows.iter().map(|r| r.0).min().ok_or_else(|| schema("no data rows".into()))?;
    let end = rows.iter().map(|r| r.0).max().unwrap_or(start);
    let hours = (end - start + 1) as usize;
    let mut columns: HashMap<String, Array2<f64>> = feature_cols
        .iter()
        .map(|(n, _)| (n.clone(), Array2::from_elem((hours, s), f64::NAN)))
        .collect();
    for (hour, k, vals) in rows {
        let t = (hour - start) as usize;
        for ((name, _), v) in feature_cols.iter().zip(vals) {
            columns.get_mut(name).expect("column allocated")[[t, k]] = v;
        }
    }
    Frame::from_columns(start, network.station_ids.clone(), specs, &columns, hours)
}

/// Writes the non-calendar features of a frame as `series.csv`.
pub fn write_series(path: impl AsRef<Path>, frame: &Frame, specs: &[FeatureSpec]) -> Result<()> {
    let path = path.as_ref();
    let wrap = |e| Error::csv(path, e);
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    let cols: Vec<(usize, &FeatureSpec)> = specs
        .iter()
        .enumerate()
        .filter(|(_, f)| f.role != FeatureRole::Calendar)
        .collect();
    let mut header = vec!["timestamp".to_string(), "station_id".to_string()];
    header.extend(cols.iter().map(|(_, f)| f.name.clone()));
    w.write_record(&header).map_err(wrap)?;
    for t in 0..frame.hours() {
        let ts = format_hour(frame.start_hour + t as i64);
        for (k, id) in frame.station_ids.iter().enumerate() {
            let mut rec = vec![ts.clone(), id.clone()];
            for (fi, _) in &cols {
                let v = frame.values[[t, k, *fi]];
                rec.push(if v.is_nan() { String::new() } else { v.to_string() });
            }
            w.write_record(&rec).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-feature z-score statistics over the model input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Pools every station and every hour of `range`, skipping missing values.
    pub fn fit(frame: &Frame, specs: &[FeatureSpec], range: Range<usize>) -> Result<Self> {
        let mut out = Normalizer {
            names: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (fi, spec) in specs.iter().enumerate().filter(|(_, f)| f.input) {
            let vals: Vec<f64> = frame
                .values
                .slice(ndarray::s![range.clone(), .., fi])
                .iter()
                .copied()
                .filter(|v| !v.is_nan())
                .collect();
            if vals.is_empty() {
                return Err(Error::Config(format!("feature `{}` has no training values", spec.name)));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::ConstantFeature(spec.name.clone()));
            }
            out.names.push(spec.name.clone());
            out.mean.push(mean);
            out.std.push(std);
        }
        Ok(out)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn apply(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    pub fn invert(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

/// Contiguous train/validation/test hour ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Splits `hours` chronologically. Train and validation lengths are rounded
/// down; the test split takes the remainder. Every split must hold at
/// least `min_len` hours.
pub fn chronological_split(hours: usize, fractions: [f64; 3], min_len: usize) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    if fractions.contains(&0.0) {
        return Err(Error::Config("every split needs a positive fraction".into()));
    }
    let n_train = (hours as f64 * fractions[0] + 1e-9).floor() as usize;
    let n_val = (hours as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_test = hours - n_train - n_val;
    for (name, len) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if len < min_len {
            return Err(Error::SplitTooShort {
                name,
                len,
                needed: min_len,
            });
        }
    }
    Ok(Splits {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..hours,
    })
}

/// Window geometry and sampling options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch: usize,
    pub stride: usize,
    #[serde(default)]
    pub per_station_wind: bool,
}

impl WindowConfig {
    /// Uses the default look-back `L = H + 24`.
    pub fn new(horizon: usize, patch: usize) -> Self {
        Self {
            lookback: horizon + 24,
            horizon,
            patch,
            stride: 1,
            per_station_wind: false,
        }
    }

    pub fn forecast_patches(&self) -> usize {
        self.horizon / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.lookback.is_multiple_of(self.patch) || !self.horizon.is_multiple_of(self.patch) || self.horizon == 0 {
            return Err(Error::Config(format!(
                "patch length {} must divide look-back {} and horizon {}",
                self.patch, self.lookback, self.horizon
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(())
    }
}

/// One model input window anchored at hour `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Frame row of the anchor hour.
    pub t_index: usize,
    /// Anchor hour since the epoch.
    pub t0: i64,
    /// Per input feature: normalized `S x (L + m_i)` block covering hours
    /// `t - L + 1 ..= t + m_i`.
    pub x: Vec<Array2<f64>>,
    /// Normalized target for hours `t + 1 ..= t + H`; `NaN` when unknown.
    pub y: Array2<f64>,
    /// One summary for the whole network, or one per station.
    pub wind: Vec<WindSummary>,
}

/// Converts meteorological (from-direction) wind to the east/north vector
/// the air moves toward.
pub fn wind_to_vector(speed: f64, direction_deg: f64) -> [f64; 2] {
    let th = direction_deg.to_radians();
    [-speed * th.sin(), -speed * th.cos()]
}

fn wind_columns(frame: &Frame, specs: &[FeatureSpec]) -> Option<(usize, usize)> {
    let find = |c| specs.iter().position(|f| f.wind_component == Some(c));
    Some((find(WindComponent::Speed)?, find(WindComponent::Direction)?))
        .filter(|(a, b)| *a < frame.feature_names.len() && *b < frame.feature_names.len())
}

/// Averages wind vectors over each forecast patch after anchor `t`.
pub fn patch_wind(frame: &Frame, specs: &[FeatureSpec], t: usize, cfg: &WindowConfig) -> Result<Vec<WindSummary>> {
    let (cs, cd) = wind_columns(frame, specs)
        .ok_or_else(|| Error::Config("wind speed/direction features required for transport".into()))?;
    let m_pred = cfg.forecast_patches();
    let s_len = frame.stations();
    let groups: Vec<Vec<usize>> = if cfg.per_station_wind {
        (0..s_len).map(|k| vec![k]).collect()
    } else {
        vec![(0..s_len).collect()]
    };
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let mut vectors = Vec::with_capacity(m_pred);
        for m in 0..m_pred {
            let mut acc = [0.0; 2];
            let mut n = 0.0;
            for h in 0..cfg.patch {
                let row = t + 1 + m * cfg.patch + h;
                if row >= frame.hours() {
                    return Err(Error::Index {
                        index: row,
                        len: frame.hours(),
                    });
                }
                for &k in &group {
                    let v = wind_to_vector(frame.values[[row, k, cs]], frame.values[[row, k, cd]]);
                    acc[0] += v[0];
                    acc[1] += v[1];
                    n += 1.0;
                }
            }
            vectors.push([acc[0] / n, acc[1] / n]);
        }
        out.push(WindSummary::from_vectors(&vectors, CALM_THRESHOLD));
    }
    Ok(out)
}

/// Builds windows with anchors inside `range`, visiting anchors at the
/// configured stride and skipping windows that touch missing values.
///
/// With `require_target`, every window lies entirely inside `range`;
/// otherwise target hours may run past the end of the frame and are `NaN`.
pub fn make_windows<'a>(
    frame: &'a Frame,
    normalizer: &'a Normalizer,
    specs: &'a [FeatureSpec],
    cfg: &'a WindowConfig,
    range: Range<usize>,
    require_target: bool,
) -> Result<impl Iterator<Item = WindowSample> + 'a> {
    cfg.validate()?;
    let transport_wind = wind_columns(frame, specs).is_some();
    let max_m = specs.iter().map(|f| f.availability).max().unwrap_or(0);
    let inputs: Vec<(usize, usize, &FeatureSpec)> = specs
        .iter()
        .enumerate()
        .filter(|(_, f)| f.input)
        .map(|(fi, f)| {
            normalizer
                .index(&f.name)
                .map(|ni| (fi, ni, f))
                .ok_or_else(|| Error::Config(format!("normalizer lacks feature `{}`", f.name)))
        })
        .collect::<Result<_>>()?;
    for f in specs.iter().filter(|f| f.input) {
        if !(cfg.lookback + f.availability).is_multiple_of(cfg.patch) {
            return Err(Error::Config(format!("patch length does not divide block of `{}`", f.name)));
        }
    }
    let target = specs
        .iter()
        .position(|f| f.is_target)
        .ok_or_else(|| Error::Config("no target feature".into()))?;
    let target_norm = normalizer
        .index(&specs[target].name)
        .ok_or_else(|| Error::Config("normalizer lacks target".into()))?;
    let (l, h) = (cfg.lookback, cfg.horizon);
    let first = range.start + l - 1;
    let last = if require_target {
        range.end.checked_sub(h + 1)
    } else {
        range.end.checked_sub(max_m + 1)
    };
    let stride = cfg.stride;
    let anchors = last.filter(|&last| last >= first).into_iter().flat_map(move |last| (first..=last).step_by(stride));
    Ok(anchors.filter_map(move |t| {
        let hours = frame.hours();
        let s_len = frame.stations();
        let mut x = Vec::with_capacity(inputs.len());
        for &(fi, ni, spec) in &inputs {
            let len = l + spec.availability;
            let mut block = Array2::zeros((s_len, len));
            for k in 0..s_len {
                for j in 0..len {
                    let v = frame.values[[t + 1 + j - l, k, fi]];
                    if v.is_nan() {
                        return None;
                    }
                    block[[k, j]] = normalizer.apply(ni, v);
                }
            }
            x.push(block);
        }
        let mut y = Array2::from_elem((s_len, h), f64::NAN);
        for k in 0..s_len {
            for j in 0..h {
                let row = t + 1 + j;
                if row >= hours {
                    continue;
                }
                let v = frame.values[[row, k, target]];
                if v.is_nan() {
                    if require_target {
                        return None;
                    }
                    continue;
                }
                y[[k, j]] = normalizer.apply(target_norm, v);
            }
        }
        let wind = if transport_wind {
            // Wind hours are checked for gaps like any other input.
            let (cs, cd) = wind_columns(frame, specs)?;
            for row in t + 1..=t + h {
                for k in 0..s_len {
                    if frame.values[[row, k, cs]].is_nan() || frame.values[[row, k, cd]].is_nan() {
                        return None;
                    }
                }
            }
            patch_wind(frame, specs, t, cfg).ok()?
        } else {
            Vec::new()
        };
        Some(WindowSample {
            t_index: t,
            t0: frame.start_hour + t as i64,
            x,
            y,
            wind,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn specs() -> Vec<FeatureSpec> {
        vec![
            FeatureSpec::target("pm10"),
            FeatureSpec::new("wind_speed", 24, FeatureRole::MeteorologyForecast).wind(WindComponent::Speed),
            FeatureSpec::new("wind_dir", 24, FeatureRole::MeteorologyForecast)
                .wind(WindComponent::Direction)
                .not_input(),
        ]
    }

    fn synthetic_frame(hours: usize, stations: usize) -> Frame {
        let mut cols = HashMap::new();
        let mut pm = Array2::zeros((hours, stations));
        let mut ws = Array2::zeros((hours, stations));
        let mut wd = Array2::zeros((hours, stations));
        for t in 0..hours {
            for k in 0..stations {
                pm[[t, k]] = 10.0 + (t as f64 * 0.3 + k as f64).sin() * 3.0;
                ws[[t, k]] = 3.0 + (t as f64 * 0.05).cos();
                wd[[t, k]] = 270.0;
            }
        }
        cols.insert("pm10".to_string(), pm);
        cols.insert("wind_speed".to_string(), ws);
        cols.insert("wind_dir".to_string(), wd);
        let ids = (0..stations).map(|k| format!("S{k}")).collect();
        Frame::from_columns(440_000, ids, &specs(), &cols, hours).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn network_loading() {
        let mut text = String::from("station_id,name,lat,lon\n");
        for k in 0..9 {
            text.push_str(&format!("s{k},Station {k},{},{}\n", 59.3 + 0.01 * k as f64, 18.0 + 0.02 * (k % 3) as f64));
        }
        assert_eq!(load_network(write_tmp(&text).path()).unwrap().len(), 9);

        let one = write_tmp("station_id,name,lat,lon\na,A,59.3,18.0\n");
        assert!(matches!(load_network(one.path()), Err(Error::NetworkTooSmall(1))));

        let dup = write_tmp("station_id,name,lat,lon\na,A,59.3,18.0\na,B,59.4,18.0\n");
        assert!(matches!(load_network(dup.path()), Err(Error::Schema(_))));

        let missing = write_tmp("station_id,name,lat\na,A,59.3\n");
        assert!(matches!(load_network(missing.path()), Err(Error::Schema(_))));

        let bad = write_tmp("station_id,name,lat,lon\na,A,north,18.0\nb,B,59.4,18.0\n");
        assert!(matches!(load_network(bad.path()), Err(Error::Schema(_))));
    }

    fn two_station_network() -> StationNetwork {
        StationNetwork::new(
            vec!["a".into(), "b".into()],
            vec!["A".into(), "B".into()],
            vec![(59.3, 18.0), (59.3, 18.1)],
        )
        .unwrap()
    }

    fn series_text(hours: usize, skip: &[(usize, &str)]) -> String {
        let mut text = String::from("timestamp,station_id,pm10,wind_speed,wind_dir\n");
        for t in 0..hours {
            for id in ["a", "b"] {
                if skip.contains(&(t, id)) {
                    continue;
                }
                text.push_str(&format!("{},{id},{},{},{}\n", format_hour(450_000 + t as i64), t, 2.0 + t as f64 * 0.01, 180));
            }
        }
        text
    }

    #[test]
    fn series_shape_and_fill() {
        let net = two_station_network();
        let f = load_series(write_tmp(&series_text(100, &[])).path(), &net, &specs()).unwrap();
        assert_eq!(f.values.dim(), (100, 2, 3));

        let f = load_series(write_tmp(&series_text(100, &[(10, "a")])).path(), &net, &specs()).unwrap();
        assert_eq!(f.values[[10, 0, 0]], 9.0);

        let gap: Vec<(usize, &str)> = (20..25).map(|t| (t, "b")).collect();
        let f = load_series(write_tmp(&series_text(100, &gap)).path(), &net, &specs()).unwrap();
        assert!((20..25).all(|t| f.values[[t, 1, 0]].is_nan()));
        assert_eq!(f.values[[25, 1, 0]], 25.0);
    }

    #[test]
    fn series_errors() {
        let net = two_station_network();
        let unknown = series_text(3, &[]) + "2021-05-01T00:00:00Z,zz,1,1,1\n";
        assert!(matches!(load_series(write_tmp(&unknown).path(), &net, &specs()), Err(Error::Schema(_))));
        let backwards = series_text(3, &[]) + &format!("{},a,1,1,1\n", format_hour(450_000));
        assert!(matches!(load_series(write_tmp(&backwards).path(), &net, &specs()), Err(Error::Schema(_))));
        let off_hour = "timestamp,station_id,pm10,wind_speed,wind_dir\n2021-05-01T00:30:00Z,a,1,1,1\n";
        assert!(matches!(load_series(write_tmp(off_hour).path(), &net, &specs()), Err(Error::Schema(_))));
    }

    #[test]
    fn series_round_trip() {
        let f = synthetic_frame(30, 2);
        let net = two_station_network();
        let f = Frame {
            station_ids: net.station_ids.clone(),
            ..f
        };
        let tmp = tempfile::NamedTempFile::new().unwrap();
        write_series(tmp.path(), &f, &specs()).unwrap();
        let back = load_series(tmp.path(), &net, &specs()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn calendar_features() {
        let spec = vec![
            FeatureSpec::target("pm10"),
            FeatureSpec::new("hour_sin", 24, FeatureRole::Calendar),
            FeatureSpec::new("dow_cos", 24, FeatureRole::Calendar),
        ];
        let mut cols = HashMap::new();
        cols.insert("pm10".to_string(), Array2::zeros((30, 1)));
        // 2024-01-01 was a Monday.
        let start = parse_hour("2024-01-01T06:00:00Z").unwrap();
        let f = Frame::from_columns(start, vec!["a".into()], &spec, &cols, 30).unwrap();
        assert!((f.values[[0, 0, 1]] - 1.0).abs() < 1e-12);
        assert!((f.values[[0, 0, 2]] - 1.0).abs() < 1e-12);
        let bad = vec![FeatureSpec::target("pm10"), FeatureSpec::new("moon", 24, FeatureRole::Calendar)];
        assert!(validate_features(&bad, 24, 12, false).is_err());
    }

    #[test]
    fn normalizer_properties() {
        let f = synthetic_frame(200, 3);
        let n = Normalizer::fit(&f, &specs(), 0..140).unwrap();
        assert_eq!(n.names, vec!["pm10", "wind_speed"]);
        let z: Vec<f64> = f.values.slice(ndarray::s![0..140, .., 0]).iter().map(|&v| n.apply(0, v)).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-12);

        let mut g = f.clone();
        g.values.slice_mut(ndarray::s![150.., .., ..]).fill(1234.5);
        assert_eq!(Normalizer::fit(&g, &specs(), 0..140).unwrap(), n);

        let mut c = f.clone();
        c.values.slice_mut(ndarray::s![.., .., 1]).fill(4.0);
        assert!(matches!(Normalizer::fit(&c, &specs(), 0..140), Err(Error::ConstantFeature(_))));
    }

    proptest! {
        #[test]
        fn normalizer_round_trip(x in prop::collection::vec(-1e4f64..1e4, 1..50), mean in -100.0f64..100.0, std in 0.01f64..50.0) {
            let n = Normalizer { names: vec!["a".into()], mean: vec![mean], std: vec![std] };
            for v in x {
                prop_assert!((n.invert(0, n.apply(0, v)) - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn splits() {
        let s = chronological_split(1000, [0.7, 0.2, 0.1], 48).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 200, 100));
        assert_eq!(s.val.start, 700);
        assert_eq!(s.test.end, 1000);
        assert!(matches!(chronological_split(10, [0.7, 0.2, 0.1], 48), Err(Error::SplitTooShort { .. })));
        assert!(matches!(chronological_split(1000, [1.0, 0.0, 0.0], 48), Err(Error::Config(_))));
        assert!(matches!(chronological_split(1000, [0.5, 0.2, 0.1], 48), Err(Error::Config(_))));
    }

    #[test]
    fn window_counts_and_shapes() {
        let f = synthetic_frame(300, 2);
        let sp = specs();
        let n = Normalizer::fit(&f, &sp, 0..300).unwrap();
        let cfg = WindowConfig::new(24, 12);
        let w: Vec<_> = make_windows(&f, &n, &sp, &cfg, 0..300, true).unwrap().collect();
        assert_eq!(w.len(), 300 - (48 + 24) + 1);
        assert_eq!(w[0].x[0].dim(), (2, 48));
        assert_eq!(w[0].x[1].dim(), (2, 72));
        assert_eq!(w[0].y.dim(), (2, 24));
        assert_eq!(w[0].wind[0].patches(), 2);

        let strided = WindowConfig { stride: 24, ..cfg.clone() };
        let w: Vec<_> = make_windows(&f, &n, &sp, &strided, 0..2 * 72, true).unwrap().collect();
        assert!(!w.is_empty());

        let bad = WindowConfig { patch: 5, ..cfg };
        assert!(matches!(make_windows(&f, &n, &sp, &bad, 0..300, true).map(|_| ()), Err(Error::Config(_))));
    }

    #[test]
    fn token_count_for_three_day_horizon() {
        let cfg = WindowConfig::new(72, 12);
        assert_eq!(cfg.lookback, 96);
        assert_eq!(cfg.forecast_patches(), 6);
    }

    #[test]
    fn windows_skip_gaps() {
        let mut f = synthetic_frame(200, 2);
        let sp = specs();
        let n = Normalizer::fit(&f, &sp, 0..200).unwrap();
        let cfg = WindowConfig::new(24, 12);
        let all = make_windows(&f, &n, &sp, &cfg, 0..200, true).unwrap().count();
        f.values[[100, 1, 0]] = f64::NAN;
        let kept: Vec<_> = make_windows(&f, &n, &sp, &cfg, 0..200, true).unwrap().collect();
        assert_eq!(kept.len(), all - 72);
        assert!(kept.iter().all(|w| w.t_index + 24 < 100 || w.t_index >= 100 + 48));
    }

    #[test]
    fn windows_do_not_leak() {
        let f = synthetic_frame(200, 2);
        let sp = specs();
        let n = Normalizer::fit(&f, &sp, 0..200).unwrap();
        let cfg = WindowConfig::new(24, 12);
        let t = 100;
        let base = make_windows(&f, &n, &sp, &cfg, 0..200, true).unwrap().find(|w| w.t_index == t).unwrap();
        let mut g = f.clone();
        for row in t + 1..200 {
            g.values[[row, 0, 0]] += 50.0;
        }
        for row in t + 25..200 {
            g.values[[row, 1, 1]] += 5.0;
            g.values[[row, 1, 2]] = 10.0;
        }
        let pert = make_windows(&g, &n, &sp, &cfg, 0..200, true).unwrap().find(|w| w.t_index == t).unwrap();
        assert_eq!(base.x, pert.x);
        assert_eq!(base.wind, pert.wind);
    }

    #[test]
    fn wind_conventions() {
        let cases = [(0.0, [0.0, -1.0]), (90.0, [-1.0, 0.0]), (180.0, [0.0, 1.0]), (270.0, [1.0, 0.0])];
        for (dir, expected) in cases {
            let v = wind_to_vector(1.0, dir);
            assert!((v[0] - expected[0]).abs() < 1e-12 && (v[1] - expected[1]).abs() < 1e-12, "{dir}");
        }

        let mut f = synthetic_frame(100, 3);
        f.values.slice_mut(ndarray::s![.., .., 1]).fill(5.0);
        let cfg = WindowConfig::new(24, 12);
        let w = patch_wind(&f, &specs(), 50, &cfg).unwrap();
        assert!((w[0].u_hat[0][0] - 1.0).abs() < 1e-12 && w[0].u_hat[0][1].abs() < 1e-12);
        assert!((w[0].speed[0] - 5.0).abs() < 1e-12);

        // Opposite directions cancel to calm.
        for row in 0..100 {
            for k in 0..3 {
                f.values[[row, k, 2]] = if row % 2 == 0 { 90.0 } else { 270.0 };
            }
        }
        let w = patch_wind(&f, &specs(), 50, &cfg).unwrap();
        assert_eq!(w[0].speed[0], 0.0);
        assert_eq!(w[0].u_hat[0], [0.0, 0.0]);
    }

    #[test]
    fn patch_wind_ignores_station_order() {
        let mut f = synthetic_frame(100, 3);
        for row in 0..100 {
            for k in 0..3 {
                f.values[[row, k, 2]] = 40.0 * k as f64 + row as f64;
            }
        }
        let cfg = WindowConfig::new(24, 12);
        let a = patch_wind(&f, &specs(), 40, &cfg).unwrap();
        let b = patch_wind(&f.permuted(&[2, 0, 1]), &specs(), 40, &cfg).unwrap();
        for (x, y) in a[0].u_hat.iter().zip(&b[0].u_hat) {
            assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
        }
    }
}
