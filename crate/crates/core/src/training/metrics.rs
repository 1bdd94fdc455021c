//! Forecast error metrics in physical units and the horizon report.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{Normalizer, WindowSample};
use crate::error::{Error, Result};
use crate::model::Model;

/// Horizons reported by default.
pub const REPORT_HORIZONS: [usize; 3] = [24, 48, 72];

/// Running MAE and MSE over residuals. Means are updated incrementally, so
/// a constant residual `b` yields exactly `|b|` and `b * b`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorAccumulator {
    pub count: usize,
    mae: f64,
    mse: f64,
}

impl ErrorAccumulator {
    pub fn push(&mut self, residual: f64) {
        self.count += 1;
        let k = self.count as f64;
        self.mae += (residual.abs() - self.mae) / k;
        self.mse += (residual * residual - self.mse) / k;
    }

    /// Adds every pair whose target is known.
    pub fn push_arrays(&mut self, yhat: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
        if yhat.dim() != y.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?}", yhat.dim(), y.dim())));
        }
        for (p, t) in yhat.iter().zip(y) {
            if !t.is_nan() {
                self.push(p - t);
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::Config("no known targets to evaluate".into()));
        }
        Ok((self.mae, self.mse))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub horizon: String,
    pub mae: f64,
    pub mse: f64,
    pub count: usize,
}

/// MAE and MSE of `model` over `windows` in physical target units.
pub fn evaluate(model: &Model, windows: &[WindowSample], normalizer: &Normalizer, target: &str) -> Result<MetricsRow> {
    let fi = normalizer
        .index(target)
        .ok_or_else(|| Error::Config(format!("target `{target}` has no normalization statistics")))?;
    let mut acc = ErrorAccumulator::default();
    for w in windows {
        if w.y.ncols() != model.spec.horizon {
            return Err(Error::Config(format!(
                "window horizon {} does not match model horizon {}",
                w.y.ncols(),
                model.spec.horizon
            )));
        }
        let yhat = model.forward(w)?.yhat.mapv(|z| normalizer.invert(fi, z));
        let y = w.y.mapv(|z| normalizer.invert(fi, z));
        acc.push_arrays(&yhat, &y)?;
    }
    let (mae, mse) = acc.finish()?;
    Ok(MetricsRow {
        horizon: model.spec.horizon.to_string(),
        mae,
        mse,
        count: acc.count,
    })
}

/// Per-horizon rows followed by an `AVG` row (unweighted mean over horizons).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn new(mut rows: Vec<MetricsRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("metrics report needs at least one horizon".into()));
        }
        rows.retain(|r| r.horizon != "AVG");
        let n = rows.len() as f64;
        let avg = MetricsRow {
            horizon: "AVG".into(),
            mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
            mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            count: rows.iter().map(|r| r.count).sum(),
        };
        rows.push(avg);
        Ok(Self { rows })
    }

    pub fn row(&self, horizon: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>12}{:>12}", "Horizon", "MAE", "MSE")?;
        for r in &self.rows {
            writeln!(f, "{:<8}{:>12.4}{:>12.4}", r.horizon, r.mae, r.mse)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = Array2::from_shape_fn((3, 24), |(s, h)| (s + h) as f64 * 1.7);
        let mut acc = ErrorAccumulator::default();
        acc.push_arrays(&y, &y).unwrap();
        assert_eq!(acc.finish().unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_bias_closed_form() {
        for b in [0.3, -2.5, 7.0, 1e-3] {
            let mut acc = ErrorAccumulator::default();
            for _ in 0..1000 {
                acc.push(b);
            }
            assert_eq!(acc.finish().unwrap(), (b.abs(), b * b));
        }
    }

    #[test]
    fn unknown_targets_skipped() {
        let y = Array2::from_shape_vec((1, 3), vec![1.0, f64::NAN, 3.0]).unwrap();
        let p = Array2::from_shape_vec((1, 3), vec![2.0, 100.0, 1.0]).unwrap();
        let mut acc = ErrorAccumulator::default();
        acc.push_arrays(&p, &y).unwrap();
        assert_eq!(acc.count, 2);
        assert_eq!(acc.finish().unwrap(), (1.5, 2.5));
        assert!(ErrorAccumulator::default().finish().is_err());
    }

    #[test]
    fn report_layout() {
        let rows = REPORT_HORIZONS
            .iter()
            .enumerate()
            .map(|(i, h)| MetricsRow {
                horizon: h.to_string(),
                mae: i as f64 + 1.0,
                mse: (i as f64 + 1.0) * 10.0,
                count: 5,
            })
            .collect();
        let report = MetricsReport::new(rows).unwrap();
        let labels: Vec<&str> = report.rows.iter().map(|r| r.horizon.as_str()).collect();
        assert_eq!(labels, ["24", "48", "72", "AVG"]);
        assert_eq!(report.row("AVG").unwrap().mae, 2.0);
        assert_eq!(report.row("AVG").unwrap().mse, 20.0);
        let back: MetricsReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let table = report.to_string();
        assert!(table.lines().nth(4).unwrap().starts_with("AVG"));
    }
}
