//! Station-graph discretization of advection, diffusion, first-order decay
//! and emissions, used as ground truth for recovery experiments.
//!
//! Each hour, mass moves from every upwind station `s0` to a downwind
//! station `s` with a weight proportional to the positive wind alignment
//! times `exp(-D / reach)`, where the reach grows linearly with wind
//! speed. Diffusion relaxes every station toward the network mean and
//! decay removes a fixed fraction. Both transfer terms conserve mass.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{format_hour, parse_hour, wind_to_vector, FeatureRole, FeatureSpec, Frame, WindComponent};
use crate::error::{Error, Result};
use crate::geometry::{unproject_coords, wind_alignment, StationNetwork};

pub const PRESETS: [&str; 3] = ["line3", "grid9", "rotating_wind9"];

/// Alignments at or below this are treated as crosswind.
pub const ALIGNMENT_TOLERANCE: f64 = 1e-9;

/// A constant wind from `start` (hour index) until the next segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindSegment {
    pub start: usize,
    /// Meteorological direction (degrees the wind comes from).
    pub direction_deg: f64,
    /// m/s
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub name: String,
    pub network: StationNetwork,
    /// Sorted by start, first segment starting at hour 0.
    pub wind_program: Vec<WindSegment>,
    /// Inter-station diffusion rate per hour.
    pub kappa: f64,
    /// First-order loss fraction per hour.
    pub decay: f64,
    /// `(hours, S)` mass added at each station and hour.
    pub emissions: Array2<f64>,
    pub initial: Vec<f64>,
    pub noise_std: f64,
    /// Advection reach in km per m/s of wind speed.
    pub transport_speed_scale: f64,
    /// Scale of the advection kernel before inflow normalization.
    pub advection_rate: f64,
    pub seed: u64,
    pub start_hour: i64,
}

/// Noiseless trajectory and the transfer matrices used at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub scenario: String,
    pub seed: u64,
    pub start: String,
    pub station_ids: Vec<String>,
    /// `[hour][station]`
    pub noiseless: Vec<Vec<f64>>,
    /// `[hour][target][source]`
    pub transfers: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    /// Observed `pm10`, `wind_speed`, `wind_dir` columns.
    pub frame: Frame,
    pub truth: Truth,
}

impl SyntheticScenario {
    pub fn span(&self) -> usize {
        self.emissions.nrows()
    }

    pub fn wind_at(&self, t: usize) -> WindSegment {
        let i = self.wind_program.partition_point(|seg| seg.start <= t);
        self.wind_program[i.saturating_sub(1)]
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config(format!("decay {} outside [0, 1)", self.decay)));
        }
        if self.kappa < 0.0 || self.noise_std < 0.0 || self.transport_speed_scale < 0.0 || self.advection_rate < 0.0 {
            return Err(Error::Config("kappa, noise_std, transport scale and advection rate must be non-negative".into()));
        }
        if self.wind_program.first().map(|s| s.start) != Some(0) {
            return Err(Error::Config("wind program must start at hour 0".into()));
        }
        if self.emissions.ncols() != self.network.len() || self.initial.len() != self.network.len() {
            return Err(Error::Shape("emission schedule does not match the network".into()));
        }
        Ok(())
    }
}

/// Feature list matching the simulator's emitted columns.
pub fn scenario_features(horizon: usize, wind_as_input: bool) -> Vec<FeatureSpec> {
    let speed = FeatureSpec::new("wind_speed", horizon, FeatureRole::MeteorologyForecast).wind(WindComponent::Speed);
    let dir = FeatureSpec::new("wind_dir", horizon, FeatureRole::MeteorologyForecast)
        .wind(WindComponent::Direction)
        .not_input();
    vec![
        FeatureSpec::target("pm10"),
        if wind_as_input { speed } else { speed.not_input() },
        dir,
    ]
}

/// Exact advection weights applied at hour `t`; row `s` holds the
/// fractions of each source's mass moved into `s`.
pub fn oracle_upwind(scenario: &SyntheticScenario, t: usize) -> Result<Array2<f64>> {
    if t >= scenario.span() {
        return Err(Error::Index {
            index: t,
            len: scenario.span(),
        });
    }
    Ok(transfer_weights(scenario, scenario.wind_at(t)))
}

fn transfer_weights(scenario: &SyntheticScenario, wind: WindSegment) -> Array2<f64> {
    let net = &scenario.network;
    let s = net.len();
    let reach = scenario.transport_speed_scale * wind.speed;
    if wind.speed <= 0.0 || reach <= 0.0 {
        return Array2::zeros((s, s));
    }
    let v = wind_to_vector(1.0, wind.direction_deg);
    let align = wind_alignment(v, &net.bearings);
    let mut w = Array2::zeros((s, s));
    for i in 0..s {
        for j in 0..s {
            // Perpendicular pairs can carry rounding-level alignments.
            if i != j && align[[i, j]] > ALIGNMENT_TOLERANCE {
                w[[i, j]] = scenario.advection_rate * align[[i, j]] * (-net.distances[[i, j]] / reach).exp();
            }
        }
        let inflow: f64 = w.row(i).sum();
        if inflow > 1.0 {
            w.row_mut(i).mapv_inplace(|x| x / inflow);
        }
    }
    w
}

/// Runs the scenario for `hours` steps.
pub fn simulate(scenario: &SyntheticScenario, hours: usize) -> Result<SimulationOutput> {
    scenario.validate()?;
    if hours == 0 || hours > scenario.span() {
        return Err(Error::Config(format!(
            "requested {hours} hours, scenario spans {}",
            scenario.span()
        )));
    }
    let s = scenario.network.len();
    let mut c = scenario.initial.clone();
    let mut noiseless = Vec::with_capacity(hours);
    let mut transfers = Vec::with_capacity(hours);
    for t in 0..hours {
        noiseless.push(c.clone());
        let w = transfer_weights(scenario, scenario.wind_at(t));
        let outflow = w.sum_axis(Axis(0));
        for k in 0..s {
            let total = outflow[k] + scenario.kappa + scenario.decay;
            if total > 1.0 + 1e-12 {
                return Err(Error::Stability {
                    step: t,
                    station: k,
                    outflow: total,
                });
            }
        }
        let mean_others = |k: usize| {
            if s < 2 {
                0.0
            } else {
                (0..s).filter(|&j| j != k).map(|j| c[j] - c[k]).sum::<f64>() / (s - 1) as f64
            }
        };
        let next: Vec<f64> = (0..s)
            .map(|k| {
                let inflow: f64 = (0..s).map(|j| w[[k, j]] * c[j]).sum();
                let adv = inflow - outflow[k] * c[k];
                let diff = scenario.kappa * mean_others(k);
                (c[k] + adv + diff - scenario.decay * c[k] + scenario.emissions[[t, k]]).max(0.0)
            })
            .collect();
        transfers.push(w.outer_iter().map(|r| r.to_vec()).collect());
        c = next;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x006e_6f69_7365);
    let noise = Normal::new(0.0, scenario.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut pm = Array2::zeros((hours, s));
    let mut ws = Array2::zeros((hours, s));
    let mut wd = Array2::zeros((hours, s));
    for t in 0..hours {
        let wind = scenario.wind_at(t);
        for k in 0..s {
            let eps = if scenario.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pm[[t, k]] = (noiseless[t][k] + eps).max(0.0);
            ws[[t, k]] = wind.speed;
            wd[[t, k]] = wind.direction_deg;
        }
    }
    let mut cols = HashMap::new();
    cols.insert("pm10".to_string(), pm);
    cols.insert("wind_speed".to_string(), ws);
    cols.insert("wind_dir".to_string(), wd);
    let frame = Frame::from_columns(
        scenario.start_hour,
        scenario.network.station_ids.clone(),
        &scenario_features(0, true),
        &cols,
        hours,
    )?;
    let truth = Truth {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        start: format_hour(scenario.start_hour),
        station_ids: scenario.network.station_ids.clone(),
        noiseless,
        transfers,
    };
    Ok(SimulationOutput { frame, truth })
}

impl Truth {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

const CENTER: (f64, f64) = (59.334, 18.063);

fn network_from_planar(planar: &[[f64; 2]], prefix: &str) -> Result<StationNetwork> {
    let latlon = unproject_coords(planar, CENTER);
    let n = planar.len();
    StationNetwork::new(
        (0..n).map(|k| format!("{prefix}{k}")).collect(),
        (0..n).map(|k| format!("Station {k}")).collect(),
        latlon,
    )
}

/// 3x3 grid rotated by 45 degrees so that its axes run SW-NE and SE-NW.
fn diamond_grid(spacing: f64) -> Vec<[f64; 2]> {
    let h = std::f64::consts::FRAC_1_SQRT_2 * spacing;
    let mut pts = Vec::with_capacity(9);
    for row in -1i32..=1 {
        for col in -1i32..=1 {
            // col runs along the SW-NE axis, row along the SE-NW axis.
            let (a, b) = (col as f64, row as f64);
            pts.push([h * (a - b), h * (a + b)]);
        }
    }
    pts
}

fn diurnal(hour: i64) -> f64 {
    1.0 + 0.3 * (std::f64::consts::TAU * ((hour.rem_euclid(24)) as f64 - 8.0) / 24.0).sin()
}

/// Background emissions with a diurnal cycle plus random multi-hour
/// episodes.
fn episodic_emissions(rng: &mut ChaCha8Rng, hours: usize, start_hour: i64, base: (f64, f64), episode_rate: &[f64], amplitude: (f64, f64)) -> Array2<f64> {
    let s = episode_rate.len();
    let mut e = Array2::zeros((hours, s));
    for k in 0..s {
        let b = rng.random_range(base.0..base.1);
        // Independent slow modulation so background levels carry no
        // information about other stations.
        let mut m = 0.0;
        for t in 0..hours {
            m = 0.95 * m + 0.15 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            e[[t, k]] += b * diurnal(start_hour + t as i64) * (1.0 + m).max(0.0);
        }
        let mut t = 0;
        while t < hours {
            if rng.random::<f64>() < episode_rate[k] {
                let len = rng.random_range(4..=12);
                let amp = rng.random_range(amplitude.0..amplitude.1);
                for u in t..(t + len).min(hours) {
                    e[[u, k]] += amp;
                }
                t += len;
            } else {
                t += 1;
            }
        }
    }
    e
}

/// Deterministic named scenarios of `hours` length.
pub fn preset(name: &str, seed: u64, hours: usize) -> Result<SyntheticScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start_hour = parse_hour("2024-01-01T00:00:00Z")?;
    match name {
        "line3" => {
            let network = network_from_planar(&[[-5.0, 0.0], [0.0, 0.0], [5.0, 0.0]], "L")?;
            let mut emissions = Array2::zeros((hours, 3));
            for t in 0..hours {
                let h = start_hour + t as i64;
                emissions[[t, 0]] = 2.0 * diurnal(h) + 0.8 * (std::f64::consts::TAU * t as f64 / 61.0).sin().max(0.0);
                emissions[[t, 1]] = 0.4 * diurnal(h);
                emissions[[t, 2]] = 0.4 * diurnal(h);
            }
            Ok(SyntheticScenario {
                name: name.into(),
                network,
                wind_program: vec![WindSegment {
                    start: 0,
                    direction_deg: 270.0,
                    speed: 4.0,
                }],
                kappa: 0.02,
                decay: 0.06,
                emissions,
                initial: vec![20.0, 15.0, 12.0],
                noise_std: 0.05,
                transport_speed_scale: 1.0,
                advection_rate: 1.0,
                seed,
                start_hour,
            })
        }
        "grid9" | "rotating_wind9" => {
            let network = network_from_planar(&diamond_grid(4.0), "G")?;
            let mut wind_program = Vec::new();
            if name == "grid9" {
                // Alternating south-easterly and south-westerly regimes.
                let mut t = 0;
                let mut south_east = rng.random::<bool>();
                while t < hours {
                    wind_program.push(WindSegment {
                        start: t,
                        direction_deg: if south_east { 135.0 } else { 225.0 },
                        speed: rng.random_range(3.0..8.0),
                    });
                    t += rng.random_range(12..=36);
                    south_east = !south_east;
                }
            } else {
                for t in 0..hours {
                    wind_program.push(WindSegment {
                        start: t,
                        direction_deg: (t as f64 * 360.0 / 96.0) % 360.0,
                        speed: 4.0 + 1.5 * (t as f64 * std::f64::consts::TAU / 37.0).sin(),
                    });
                }
            }
            // Episodes concentrate at the south-east (1) and south-west (3)
            // corners, each upwind of the interior under one grid9 regime.
            let rates: Vec<f64> = if name == "grid9" {
                (0..9).map(|k| if k == 1 || k == 3 { 0.06 } else { 0.005 }).collect()
            } else {
                vec![0.03; 9]
            };
            let emissions = episodic_emissions(&mut rng, hours, start_hour, (0.3, 0.8), &rates, (3.0, 8.0));
            let initial = (0..9).map(|_| rng.random_range(5.0..15.0)).collect();
            Ok(SyntheticScenario {
                name: name.into(),
                network,
                wind_program,
                kappa: 0.01,
                decay: 0.08,
                emissions,
                initial,
                noise_std: 0.3,
                transport_speed_scale: 0.6,
                advection_rate: 0.5,
                seed,
                start_hour,
            })
        }
        other => Err(Error::Config(format!("unknown preset `{other}` (expected one of {PRESETS:?})"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_station(decay: f64, kappa: f64, wind: Option<(f64, f64)>, scale: f64, hours: usize) -> SyntheticScenario {
        let network = network_from_planar(&[[-5.0, 0.0], [5.0, 0.0]], "T").unwrap();
        let (dir, speed) = wind.unwrap_or((0.0, 0.0));
        SyntheticScenario {
            name: "test".into(),
            network,
            wind_program: vec![WindSegment {
                start: 0,
                direction_deg: dir,
                speed,
            }],
            kappa,
            decay,
            emissions: Array2::zeros((hours, 2)),
            initial: vec![0.0, 0.0],
            noise_std: 0.0,
            transport_speed_scale: scale,
            advection_rate: 1.0,
            seed: 1,
            start_hour: 0,
        }
    }

    #[test]
    fn decoupled_integrator() {
        let mut sc = two_station(0.0, 0.0, None, 1.0, 20);
        sc.initial = vec![3.0, 7.0];
        sc.emissions.column_mut(0).fill(0.5);
        let out = simulate(&sc, 20).unwrap();
        for t in 0..20 {
            assert!((out.truth.noiseless[t][0] - (3.0 + 0.5 * t as f64)).abs() < 1e-12);
            assert_eq!(out.truth.noiseless[t][1], 7.0);
        }
    }

    #[test]
    fn geometric_decay() {
        let mut sc = two_station(0.1, 0.0, None, 1.0, 15);
        sc.initial = vec![10.0, 4.0];
        let out = simulate(&sc, 15).unwrap();
        for t in 0..15 {
            assert!((out.truth.noiseless[t][0] - 10.0 * 0.9f64.powi(t as i32)).abs() < 1e-10);
        }
    }

    #[test]
    fn pulse_moves_downwind_only() {
        // Wind from the west, reach 500 km: west station 0 feeds east station 1.
        let mut sc = two_station(0.0, 0.0, Some((270.0, 5.0)), 100.0, 6);
        sc.emissions[[0, 0]] = 1.0;
        let out = simulate(&sc, 6).unwrap();

        // Hand trace of the update rule.
        let d = sc.network.distances[[1, 0]];
        let w = (-d / 500.0).exp();
        let mut c = [0.0f64, 0.0];
        for t in 0..6 {
            assert!((out.truth.noiseless[t][0] - c[0]).abs() < 1e-12);
            assert!((out.truth.noiseless[t][1] - c[1]).abs() < 1e-12);
            assert!((out.truth.transfers[t][1][0] - w).abs() < 1e-12);
            assert_eq!(out.truth.transfers[t][0][1], 0.0);
            let e = if t == 0 { 1.0 } else { 0.0 };
            c = [c[0] - w * c[0] + e, c[1] + w * c[0]];
        }
        assert!(out.truth.noiseless[3][1] > 0.9);

        // Reversed wind keeps the pulse out of the east station.
        let mut rev = two_station(0.0, 0.0, Some((90.0, 5.0)), 100.0, 6);
        rev.emissions[[0, 0]] = 1.0;
        let out = simulate(&rev, 6).unwrap();
        assert!(out.truth.noiseless.iter().all(|c| c[1] == 0.0));
    }

    #[test]
    fn oracle_matches_logged_weights() {
        let sc = preset("grid9", 3, 300).unwrap();
        let out = simulate(&sc, 300).unwrap();
        for t in [0, 17, 150, 299] {
            let w = oracle_upwind(&sc, t).unwrap();
            for i in 0..9 {
                for j in 0..9 {
                    assert_eq!(w[[i, j]], out.truth.transfers[t][i][j]);
                    if w[[i, j]] > 0.0 {
                        assert_eq!(w[[j, i]], 0.0);
                    }
                }
                assert!(w.row(i).sum() <= 1.0 + 1e-12);
            }
        }
        assert!(matches!(oracle_upwind(&sc, 300), Err(Error::Index { .. })));
    }

    #[test]
    fn calm_hour_has_no_transfer() {
        let sc = two_station(0.0, 0.0, Some((90.0, 0.0)), 1.0, 3);
        assert!(oracle_upwind(&sc, 1).unwrap().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn mass_is_conserved_without_decay() {
        let mut sc = preset("rotating_wind9", 11, 400).unwrap();
        sc.decay = 0.0;
        sc.noise_std = 0.0;
        let out = simulate(&sc, 400).unwrap();
        let mut expected: f64 = sc.initial.iter().sum();
        for t in 0..400 {
            let total: f64 = out.truth.noiseless[t].iter().sum();
            assert!((total - expected).abs() < 1e-8 * expected.max(1.0), "hour {t}");
            expected += sc.emissions.row(t).sum();
        }
        assert!(out.truth.noiseless.iter().flatten().all(|&c| c >= 0.0));
    }

    #[test]
    fn unstable_configuration_is_reported() {
        let mut sc = two_station(0.5, 0.6, None, 1.0, 4);
        sc.initial = vec![1.0, 1.0];
        assert!(matches!(simulate(&sc, 4), Err(Error::Stability { step: 0, .. })));
    }

    #[test]
    fn presets() {
        assert_eq!(preset("grid9", 7, 100).unwrap().network.len(), 9);
        assert_eq!(preset("line3", 7, 100).unwrap().network.len(), 3);
        assert!(matches!(preset("nope", 7, 100), Err(Error::Config(_))));

        let a = simulate(&preset("grid9", 7, 500).unwrap(), 500).unwrap();
        let b = simulate(&preset("grid9", 7, 500).unwrap(), 500).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.truth, b.truth);

        let line = preset("line3", 7, 200).unwrap();
        let w0 = oracle_upwind(&line, 0).unwrap();
        assert!((0..200).all(|t| oracle_upwind(&line, t).unwrap() == w0));
        assert!(w0[[1, 0]] > 0.0 && w0[[2, 1]] > 0.0 && w0[[0, 1]] == 0.0);
    }

    #[test]
    fn grid9_regimes_alternate() {
        let sc = preset("grid9", 7, 2000).unwrap();
        let dirs: Vec<f64> = sc.wind_program.iter().map(|s| s.direction_deg).collect();
        assert!(dirs.windows(2).all(|w| w[0] != w[1]));
        assert!(dirs.iter().all(|&d| d == 135.0 || d == 225.0));
    }
}
