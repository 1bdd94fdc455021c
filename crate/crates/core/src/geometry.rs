//! Station geography: planar projection, distances, bearings and wind
//! alignment scores.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used by the equirectangular projection.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A monitoring network with its derived geometry.
///
/// Station order defines the station index used by every tensor in the
/// crate.
#[derive(Debug, Clone, PartialEq)]
pub struct StationNetwork {
    pub station_ids: Vec<String>,
    pub names: Vec<String>,
    /// (latitude, longitude) in degrees.
    pub latlon: Vec<(f64, f64)>,
    /// (x east, y north) in km, centroid at the origin.
    pub planar: Vec<[f64; 2]>,
    /// Pairwise distances in km, `S x S`.
    pub distances: Array2<f64>,
    /// `bearings[[s, s0, ..]]` is the unit vector pointing from `s0` to `s`.
    pub bearings: Array3<f64>,
}

impl StationNetwork {
    pub fn new(station_ids: Vec<String>, names: Vec<String>, latlon: Vec<(f64, f64)>) -> Result<Self> {
        if station_ids.len() != latlon.len() || names.len() != latlon.len() {
            return Err(Error::Shape("station ids, names and coordinates differ in length".into()));
        }
        if latlon.len() < 2 {
            return Err(Error::NetworkTooSmall(latlon.len()));
        }
        let planar = project_coords(&latlon)?;
        let distances = pairwise_distance(&planar)?;
        let bearings = unit_bearings(&planar, &distances);
        Ok(Self {
            station_ids,
            names,
            latlon,
            planar,
            distances,
            bearings,
        })
    }

    pub fn len(&self) -> usize {
        self.station_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.station_ids.iter().position(|s| s == id)
    }

    /// Median of the off-diagonal distances.
    pub fn median_distance(&self) -> f64 {
        let s = self.len();
        let mut d: Vec<f64> = (0..s)
            .flat_map(|i| (0..s).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.distances[[i, j]])
            .collect();
        d.sort_by(|a, b| a.total_cmp(b));
        let n = d.len();
        if n % 2 == 1 {
            d[n / 2]
        } else {
            0.5 * (d[n / 2 - 1] + d[n / 2])
        }
    }

    /// Reorders stations so that new index `k` holds old station `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let pick = |k: usize| perm[k];
        Self::new(
            (0..perm.len()).map(|k| self.station_ids[pick(k)].clone()).collect(),
            (0..perm.len()).map(|k| self.names[pick(k)].clone()).collect(),
            (0..perm.len()).map(|k| self.latlon[pick(k)]).collect(),
        )
    }
}

/// Per-patch wind: unit direction (east, north) the air moves toward,
/// and speed in m/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindSummary {
    pub u_hat: Vec<[f64; 2]>,
    pub speed: Vec<f64>,
}

impl WindSummary {
    /// Builds a summary from mean wind vectors; vectors shorter than
    /// `calm_threshold` are calm and get a zero direction.
    pub fn from_vectors(vectors: &[[f64; 2]], calm_threshold: f64) -> Self {
        let mut u_hat = Vec::with_capacity(vectors.len());
        let mut speed = Vec::with_capacity(vectors.len());
        for v in vectors {
            let norm = v[0].hypot(v[1]);
            if norm < calm_threshold {
                u_hat.push([0.0, 0.0]);
                speed.push(0.0);
            } else {
                u_hat.push([v[0] / norm, v[1] / norm]);
                speed.push(norm);
            }
        }
        Self { u_hat, speed }
    }

    pub fn patches(&self) -> usize {
        self.speed.len()
    }
}

/// Equirectangular projection about the network centroid.
pub fn project_coords(latlon: &[(f64, f64)]) -> Result<Vec<[f64; 2]>> {
    if latlon.len() < 2 {
        return Err(Error::NetworkTooSmall(latlon.len()));
    }
    for &(lat, lon) in latlon {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() >= 90.0 {
            return Err(Error::InvalidCoordinate(format!("({lat}, {lon})")));
        }
    }
    for i in 0..latlon.len() {
        for j in 0..i {
            if latlon[i] == latlon[j] {
                return Err(Error::DegenerateGeometry(format!(
                    "stations {j} and {i} share coordinates {:?}",
                    latlon[i]
                )));
            }
        }
    }
    let n = latlon.len() as f64;
    let lat0 = latlon.iter().map(|p| p.0).sum::<f64>() / n;
    let lon0 = latlon.iter().map(|p| p.1).sum::<f64>() / n;
    let cos0 = lat0.to_radians().cos();
    Ok(latlon
        .iter()
        .map(|&(lat, lon)| {
            [
                EARTH_RADIUS_KM * (lon - lon0).to_radians() * cos0,
                EARTH_RADIUS_KM * (lat - lat0).to_radians(),
            ]
        })
        .collect())
}

/// Inverse of [`project_coords`] for a given centroid; used to lay out
/// synthetic networks in km.
pub fn unproject_coords(planar: &[[f64; 2]], centroid: (f64, f64)) -> Vec<(f64, f64)> {
    let cos0 = centroid.0.to_radians().cos();
    planar
        .iter()
        .map(|p| {
            (
                centroid.0 + (p[1] / EARTH_RADIUS_KM).to_degrees(),
                centroid.1 + (p[0] / (EARTH_RADIUS_KM * cos0)).to_degrees(),
            )
        })
        .collect()
}

pub fn pairwise_distance(planar: &[[f64; 2]]) -> Result<Array2<f64>> {
    let s = planar.len();
    let mut d = Array2::zeros((s, s));
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            let (a, b) = (planar[i], planar[j]);
            if !(a[0].is_finite() && a[1].is_finite()) {
                return Err(Error::InvalidCoordinate(format!("planar {a:?}")));
            }
            let dist = (a[0] - b[0]).hypot(a[1] - b[1]);
            if dist == 0.0 {
                return Err(Error::DegenerateGeometry(format!("stations {i} and {j} coincide")));
            }
            d[[i, j]] = dist;
        }
    }
    Ok(d)
}

/// Unit vectors from each source `s0` toward each target `s`; the diagonal
/// is zero.
pub fn unit_bearings(planar: &[[f64; 2]], distances: &Array2<f64>) -> Array3<f64> {
    let s = planar.len();
    let mut r = Array3::zeros((s, s, 2));
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            let dist = distances[[i, j]];
            r[[i, j, 0]] = (planar[i][0] - planar[j][0]) / dist;
            r[[i, j, 1]] = (planar[i][1] - planar[j][1]) / dist;
        }
    }
    r
}

/// Alignment of the wind direction with every source-to-target bearing.
///
/// Positive entries mean the target (row) is downwind of the source
/// (column). A zero wind vector yields the all-zero matrix.
pub fn wind_alignment(u_hat: [f64; 2], bearings: &Array3<f64>) -> Array2<f64> {
    let s = bearings.shape()[0];
    let mut a = Array2::zeros((s, s));
    for i in 0..s {
        for j in 0..s {
            if i != j {
                a[[i, j]] = u_hat[0] * bearings[[i, j, 0]] + u_hat[1] * bearings[[i, j, 1]];
            }
        }
    }
    a
}
