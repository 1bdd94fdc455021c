//! Attribution records built from a forward pass: attention over
//! time-feature tokens, per-patch upwind source shares, the fusion gate and
//! the wind that conditioned the transport. Exported as JSON and SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::{format_hour, WindowSample};
use crate::error::{Error, Result};
use crate::model::embedding::TokenMeta;
use crate::model::{ForecastBundle, Model, ModelSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// One input token: feature, patch index within its block and the offset
/// in hours of the patch's first hour relative to the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLabel {
    pub feature: String,
    pub patch: usize,
    pub start_offset: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShare {
    pub feature: String,
    /// Summed attention per forecast patch.
    pub shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttribution {
    pub tokens: Vec<TokenLabel>,
    /// `[forecast patch][token]`
    pub weights: Vec<Vec<f64>>,
    pub features: Vec<FeatureShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceShare {
    pub station_id: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSources {
    pub patch: usize,
    /// Empty when every source is masked.
    pub sources: Vec<SourceShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateAttribution {
    /// One value, or one per channel.
    pub gamma: Vec<f64>,
    /// `|gamma * C_nb| / (|G| + |gamma * C_nb|)` per forecast patch.
    pub transport_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchWind {
    pub u_hat: [f64; 2],
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub station_id: String,
    pub anchor: String,
    pub temporal: TemporalAttribution,
    pub spatial: Vec<PatchSources>,
    pub gate: Option<GateAttribution>,
    pub wind: Vec<PatchWind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub spec: ModelSpec,
    pub station_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub version: u32,
    pub model_meta: ModelMeta,
    pub records: Vec<AttributionRecord>,
}

/// Token labels for a model spec.
pub fn token_labels(spec: &ModelSpec, meta: &[TokenMeta]) -> Vec<TokenLabel> {
    meta.iter()
        .map(|t| TokenLabel {
            feature: spec.input_features[t.feature].clone(),
            patch: t.patch,
            start_offset: (t.patch * spec.patch) as i64 - spec.lookback as i64 + 1,
        })
        .collect()
}

/// Regroups one station's `(M, N)` attention by token and sums it per
/// feature.
pub fn temporal_attribution(attention: ArrayView2<f64>, tokens: &[TokenLabel], features: &[String]) -> TemporalAttribution {
    let weights: Vec<Vec<f64>> = attention.outer_iter().map(|r| r.to_vec()).collect();
    let features = features
        .iter()
        .map(|f| FeatureShare {
            feature: f.clone(),
            shares: weights
                .iter()
                .map(|row| row.iter().zip(tokens).filter(|(_, t)| &t.feature == f).map(|(w, _)| w).sum())
                .collect(),
        })
        .collect();
    TemporalAttribution {
        tokens: tokens.to_vec(),
        weights,
        features,
    }
}

/// Row `s` of every patch's spatial weight matrix as source shares.
pub fn spatial_attribution(spatial: &[ndarray::Array2<f64>], s: usize, station_ids: &[String]) -> Vec<PatchSources> {
    spatial
        .iter()
        .enumerate()
        .map(|(m, w)| PatchSources {
            patch: m,
            sources: w
                .row(s)
                .iter()
                .enumerate()
                .filter(|(_, &x)| x > 0.0)
                .map(|(j, &x)| SourceShare {
                    station_id: station_ids[j].clone(),
                    share: x,
                })
                .collect(),
        })
        .collect()
}

/// Gate values for station `s` and the transport fraction per patch.
pub fn gate_attribution(bundle: &ForecastBundle, s: usize) -> Option<GateAttribution> {
    let cnb = bundle.cnb.as_ref()?;
    let gamma = bundle.gamma.row(s).to_vec();
    let m_len = bundle.g.shape()[1];
    let transport_fraction = (0..m_len)
        .map(|m| {
            let g = bundle.g.slice(s![s, m, ..]);
            let c = cnb.slice(s![s, m, ..]);
            let mut local = 0.0;
            let mut moved = 0.0;
            for (k, (&gv, &cv)) in g.iter().zip(c.iter()).enumerate() {
                let gk = if gamma.len() == 1 { gamma[0] } else { gamma[k] };
                local += gv * gv;
                moved += (gk * cv) * (gk * cv);
            }
            let (local, moved) = (local.sqrt(), moved.sqrt());
            if local + moved > 0.0 {
                moved / (local + moved)
            } else {
                0.0
            }
        })
        .collect();
    Some(GateAttribution {
        gamma,
        transport_fraction,
    })
}

/// One record per station for a single forecast.
pub fn records(model: &Model, bundle: &ForecastBundle, sample: &WindowSample, station_ids: &[String]) -> Result<Vec<AttributionRecord>> {
    let spec = &model.spec;
    if station_ids.len() != spec.stations {
        return Err(Error::Shape(format!("{} station ids for {} stations", station_ids.len(), spec.stations)));
    }
    let tokens = token_labels(spec, &spec.token_meta()?);
    let anchor = format_hour(sample.t0);
    Ok((0..spec.stations)
        .map(|s| {
            let wind = &sample.wind[if sample.wind.len() > 1 { s } else { 0 }];
            AttributionRecord {
                station_id: station_ids[s].clone(),
                anchor: anchor.clone(),
                temporal: temporal_attribution(bundle.attention.slice(s![s, .., ..]), &tokens, &spec.input_features),
                spatial: spatial_attribution(&bundle.spatial, s, station_ids),
                gate: gate_attribution(bundle, s),
                wind: wind
                    .u_hat
                    .iter()
                    .zip(&wind.speed)
                    .map(|(&u_hat, &speed)| PatchWind { u_hat, speed })
                    .collect(),
            }
        })
        .collect())
}

impl AttributionReport {
    pub fn new(spec: &ModelSpec, station_ids: &[String], records: Vec<AttributionRecord>) -> Self {
        Self {
            version: SCHEMA_VERSION,
            model_meta: ModelMeta {
                spec: spec.clone(),
                station_ids: station_ids.to_vec(),
            },
            records,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `attribution.json` and three figures per record. File names are
/// `<station>_<channel>.svg`, with the anchor inserted when a station has
/// several records. Returns the written paths.
pub fn export_report(report: &AttributionReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let json = out_dir.join("attribution.json");
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    written.push(json);
    for rec in &report.records {
        let repeated = report.records.iter().filter(|r| r.station_id == rec.station_id).count() > 1;
        let stem = if repeated {
            format!("{}_{}", file_safe(&rec.station_id), file_safe(&rec.anchor))
        } else {
            file_safe(&rec.station_id)
        };
        for (channel, svg) in [
            ("spatial", spatial_svg(rec)),
            ("temporal", temporal_svg(rec)),
            ("wind", wind_svg(rec)),
        ] {
            let path = out_dir.join(format!("{stem}_{channel}.svg"));
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
];

fn svg_open(out: &mut String, w: usize, h: usize, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#, w / 2, esc(title));
}

/// Stacked bars of source shares, one bar per forecast patch.
pub fn spatial_svg(rec: &AttributionRecord) -> String {
    let mut sources: Vec<&str> = Vec::new();
    for p in &rec.spatial {
        for s in &p.sources {
            if !sources.contains(&s.station_id.as_str()) {
                sources.push(&s.station_id);
            }
        }
    }
    let bars = rec.spatial.len().max(1);
    let (left, top, bar_w, gap, plot_h) = (40.0, 30.0, 36.0, 14.0, 200.0);
    let width = (left + bars as f64 * (bar_w + gap) + 140.0) as usize;
    let height = (top + plot_h + 40.0) as usize;
    let mut out = String::new();
    svg_open(&mut out, width, height, &format!("Upwind source shares, {} at {}", rec.station_id, rec.anchor));
    let _ = writeln!(out, r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="#333"/>"##, top + plot_h);
    for (tick, label) in [(0.0, "0%"), (0.5, "50%"), (1.0, "100%")] {
        let y = top + plot_h * (1.0 - tick);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#, left - 4.0, y + 4.0);
    }
    for p in &rec.spatial {
        let x = left + gap / 2.0 + p.patch as f64 * (bar_w + gap);
        let mut y = top + plot_h;
        for s in &p.sources {
            let k = sources.iter().position(|&id| id == s.station_id).unwrap_or(0);
            let h = s.share * plot_h;
            y -= h;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.2}" width="{bar_w}" height="{h:.2}" fill="{}"><title>{}: {:.1}%</title></rect>"#,
                PALETTE[k % PALETTE.len()],
                esc(&s.station_id),
                100.0 * s.share
            );
            if s.share >= 0.12 {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="white">{:.0}%</text>"#,
                    x + bar_w / 2.0,
                    y + h / 2.0 + 4.0,
                    100.0 * s.share
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">P{}</text>"#,
            x + bar_w / 2.0,
            top + plot_h + 14.0,
            p.patch + 1
        );
    }
    let lx = left + bars as f64 * (bar_w + gap) + 12.0;
    for (k, id) in sources.iter().enumerate() {
        let y = top + 14.0 * k as f64;
        let _ = writeln!(out, r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/>"#, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 14.0, y + 9.0, esc(id));
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap of attention, forecast patches by input tokens.
pub fn temporal_svg(rec: &AttributionRecord) -> String {
    let t = &rec.temporal;
    let (left, top, cell) = (50.0, 30.0, 14.0);
    let n = t.tokens.len().max(1);
    let m = t.weights.len().max(1);
    let width = (left + n as f64 * cell + 20.0) as usize;
    let height = (top + m as f64 * cell + 60.0) as usize;
    let max = t.weights.iter().flatten().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut out = String::new();
    svg_open(&mut out, width, height, &format!("Attention, {} at {}", rec.station_id, rec.anchor));
    for (i, row) in t.weights.iter().enumerate() {
        let y = top + i as f64 * cell;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">P{}</text>"#, left - 4.0, y + cell - 3.0, i + 1);
        for (j, &w) in row.iter().enumerate() {
            let shade = 255.0 - 215.0 * (w / max);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="rgb({:.0},{:.0},255)"><title>{} patch {}: {:.4}</title></rect>"#,
                left + j as f64 * cell,
                shade,
                shade,
                esc(&t.tokens[j].feature),
                t.tokens[j].patch,
                w
            );
        }
    }
    let mut j = 0;
    while j < t.tokens.len() {
        let f = &t.tokens[j].feature;
        let len = t.tokens[j..].iter().take_while(|tk| &tk.feature == f).count();
        let x = left + j as f64 * cell;
        let y = top + m as f64 * cell + 14.0;
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/>"##,
            top,
            y
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 2.0, esc(f));
        j += len;
    }
    out.push_str("</svg>\n");
    out
}

/// Arrows of the forecast wind per patch, pointing downwind.
pub fn wind_svg(rec: &AttributionRecord) -> String {
    let (size, r) = (260.0, 100.0);
    let c = size / 2.0;
    let vmax = rec.wind.iter().map(|w| w.speed).fold(0.0, f64::max).max(1e-9);
    let mut out = String::new();
    svg_open(&mut out, size as usize, size as usize + 10, &format!("Forecast wind, {}", rec.station_id));
    let _ = writeln!(out, r##"<circle cx="{c}" cy="{c}" r="{r}" fill="none" stroke="#999"/>"##);
    for (label, dx, dy) in [("N", 0.0, -1.0), ("E", 1.0, 0.0), ("S", 0.0, 1.0), ("W", -1.0, 0.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            c + dx * (r + 10.0),
            c + dy * (r + 10.0) + 4.0
        );
    }
    for (m, w) in rec.wind.iter().enumerate() {
        let len = r * w.speed / vmax;
        let (x2, y2) = (c + w.u_hat[0] * len, c - w.u_hat[1] * len);
        let color = PALETTE[m % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{c}" y1="{c}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}" stroke-width="2"><title>P{}: {:.2} m/s</title></line>"#,
            m + 1,
            w.speed
        );
        let _ = writeln!(out, r#"<circle cx="{x2:.2}" cy="{y2:.2}" r="3" fill="{color}"/>"#);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">P{}</text>"#, x2 + 4.0, y2 - 4.0, m + 1);
    }
    out.push_str("</svg>\n");
    out
}
