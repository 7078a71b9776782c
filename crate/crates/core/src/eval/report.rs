use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "axis",
    "bpp",
    "psnr_db",
    "feature_distance",
    "proxy_fid",
    "steps",
    "preset",
    "model_id",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub bpp: f64,
    pub psnr_db: f64,
    pub feature_distance: f64,
    pub proxy_fid: f64,
    pub steps: usize,
    pub preset: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    axis: f64,
    bpp: f64,
    psnr_db: f64,
    feature_distance: f64,
    proxy_fid: f64,
    steps: usize,
    preset: String,
    model_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: String,
    pub points: Vec<(f64, MetricRecord)>,
}

impl SweepResult {
    pub fn new(axis: &str, points: Vec<(f64, MetricRecord)>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Config(format!(
                "{axis} values must be strictly increasing"
            )));
        }
        if points
            .iter()
            .any(|(_, r)| !(r.bpp > 0.0) || r.psnr_db < 0.0)
        {
            return Err(Error::Range(
                "metric records need bpp > 0 and psnr >= 0".into(),
            ));
        }
        Ok(Self {
            axis: axis.to_string(),
            points,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (x, r) in &self.points {
            w.serialize(CsvRow {
                axis: *x,
                bpp: r.bpp,
                psnr_db: r.psnr_db,
                feature_distance: r.feature_distance,
                proxy_fid: r.proxy_fid,
                steps: r.steps,
                preset: r.preset.clone(),
                model_id: r.model_id.clone(),
            })?;
        }
        if self.points.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_csv(axis: &str, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::Format(format!("unexpected CSV header {header:?}")));
        }
        let mut points = Vec::new();
        for row in r.deserialize() {
            let row: CsvRow = row?;
            points.push((
                row.axis,
                MetricRecord {
                    bpp: row.bpp,
                    psnr_db: row.psnr_db,
                    feature_distance: row.feature_distance,
                    proxy_fid: row.proxy_fid,
                    steps: row.steps,
                    preset: row.preset,
                    model_id: row.model_id,
                },
            ));
        }
        Ok(Self {
            axis: axis.to_string(),
            points,
        })
    }

    /// Line plot of PSNR and feature distance against the axis.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const M: f64 = 48.0;
        let xs: Vec<f64> = self.points.iter().map(|p| p.0).collect();
        let series = [
            (
                "psnr_db",
                "#1f77b4",
                self.points.iter().map(|p| p.1.psnr_db).collect::<Vec<_>>(),
            ),
            (
                "feature_distance",
                "#d62728",
                self.points.iter().map(|p| p.1.feature_distance).collect(),
            ),
        ];
        let range = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = range(&xs);
        let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{M}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
            y = H - M,
            x2 = W - M
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{y}" stroke="black"/>"#,
            y = H - M
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">{}</text>"#,
            self.axis,
            x = W / 2.0,
            y = H - 12.0
        );
        for (x, _) in &self.points {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                sx(*x),
                H - M + 14.0,
                x
            );
        }
        for (k, (name, color, ys)) in series.iter().enumerate() {
            let (y0, y1) = range(ys);
            let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
            let pts: Vec<String> = xs
                .iter()
                .zip(ys)
                .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (cx, cy) = p.split_once(',').expect("formatted pair");
                let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
            let _ = writeln!(
                svg,
                r#"<text x="{x}" y="{y}" font-size="11" fill="{color}">{name} [{y0:.3}, {y1:.3}]</text>"#,
                x = M + 4.0,
                y = 16.0 + 14.0 * k as f64
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Writes `<axis>.csv` and `<axis>.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.axis));
        let svg = dir.join(format!("{}.svg", self.axis));
        crate::checkpoint::write_atomic(&csv, self.to_csv()?.as_bytes())?;
        crate::checkpoint::write_atomic(&svg, self.to_svg().as_bytes())?;
        Ok((csv, svg))
    }
}

/// First 12 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..12].to_string()
}

/// `<root>/<timestamp>-<config hash>`; the timestamp is supplied by the caller
/// so that runs can be made reproducible.
pub fn run_dir(root: &Path, timestamp: &str, config_bytes: &[u8]) -> PathBuf {
    root.join(format!("{timestamp}-{}", short_hash(config_bytes)))
}
