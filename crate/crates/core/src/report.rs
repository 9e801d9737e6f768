//! Report emission: CSV table, Markdown table and side-by-side image grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::bench::{GainSummary, LatencyStats};
use crate::error::{Error, Result};
use crate::image::{write_rgb8, ImageTensor};
use crate::metrics::MetricId;

pub const CSV_COLUMNS: [&str; 11] = [
    "attack",
    "iters",
    "metric",
    "n_images",
    "n_undefined",
    "mean_rel_gain_pct",
    "mean_abs_gain",
    "median_latency_ms",
    "epsilon",
    "seed",
    "config_digest",
];

/// Gray separator between grid panels, in pixels.
pub const GRID_GUTTER: usize = 4;
const GUTTER_VALUE: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub attack: AttackKind,
    pub iters: usize,
    pub metric: MetricId,
    pub gain: GainSummary,
    /// `None` when timing was skipped.
    pub latency: Option<LatencyStats>,
    pub epsilon: f32,
    pub seed: u64,
    pub config_digest: String,
}

impl BenchRow {
    /// `ifgsm@10` for iterative attacks, the bare kind otherwise.
    pub fn attack_label(&self) -> String {
        if self.attack.is_iterative() {
            format!("{}@{}", self.attack, self.iters)
        } else {
            self.attack.to_string()
        }
    }

    pub fn to_csv(&self) -> CsvRow {
        CsvRow {
            attack: self.attack.to_string(),
            iters: self.iters,
            metric: self.metric.to_string(),
            n_images: self.gain.n_images,
            n_undefined: self.gain.n_undefined,
            mean_rel_gain_pct: self.gain.mean_rel_gain_pct,
            mean_abs_gain: self.gain.mean_abs_gain,
            median_latency_ms: self.latency.map(|l| l.median_ms),
            epsilon: self.epsilon,
            seed: self.seed,
            config_digest: self.config_digest.clone(),
        }
    }
}

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub attack: String,
    pub iters: usize,
    pub metric: String,
    pub n_images: usize,
    pub n_undefined: usize,
    pub mean_rel_gain_pct: Option<f64>,
    pub mean_abs_gain: f64,
    pub median_latency_ms: Option<f64>,
    pub epsilon: f32,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRow>,
    pub config_digest: String,
}

/// Original/adversarial pairs shown for one (attack, metric) row.
#[derive(Clone, Debug)]
pub struct Grid {
    pub attack_label: String,
    pub metric: MetricId,
    pub pairs: Vec<(ImageTensor, ImageTensor)>,
}

impl Grid {
    pub fn file_name(&self) -> String {
        format!("grid_{}_{}.png", file_token(&self.attack_label), file_token(&self.metric.to_string()))
    }
}

/// Replaces characters that are awkward in file names.
pub fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '-' })
        .collect()
}

pub fn csv_string(report: &BenchmarkReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for row in &report.rows {
        w.serialize(row.to_csv())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Invalid(format!("unexpected report columns: {:?}", headers)));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    parse_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn fmt_gain(g: Option<f64>) -> String {
    g.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.2}%"))
}

pub fn markdown_string(report: &BenchmarkReport) -> String {
    let mut metrics: Vec<&MetricId> = Vec::new();
    let mut attacks: Vec<(String, AttackKind, usize)> = Vec::new();
    for row in &report.rows {
        if !metrics.contains(&&row.metric) {
            metrics.push(&row.metric);
        }
        let key = (row.attack_label(), row.attack, row.iters);
        if !attacks.contains(&key) {
            attacks.push(key);
        }
    }
    let cell: BTreeMap<(String, String), &BenchRow> = report
        .rows
        .iter()
        .map(|r| ((r.attack_label(), r.metric.to_string()), r))
        .collect();
    let best: Vec<Option<f64>> = metrics
        .iter()
        .map(|m| {
            report
                .rows
                .iter()
                .filter(|r| &r.metric == *m)
                .filter_map(|r| r.gain.mean_rel_gain_pct)
                .max_by(f64::total_cmp)
        })
        .collect();

    let mut out = String::from("# Attack benchmark\n\n| Attack |");
    for m in &metrics {
        let _ = write!(out, " {m} Gain ↑ | {m} Speed ↓ (ms) |");
    }
    out.push_str("\n|---|");
    for _ in &metrics {
        out.push_str("---:|---:|");
    }
    out.push('\n');
    for (label, _, _) in &attacks {
        let _ = write!(out, "| {label} |");
        for (m, best) in metrics.iter().zip(&best) {
            match cell.get(&(label.clone(), m.to_string())) {
                Some(row) => {
                    let g = fmt_gain(row.gain.mean_rel_gain_pct);
                    let g = if row.gain.mean_rel_gain_pct.is_some() && row.gain.mean_rel_gain_pct == *best {
                        format!("**{g}**")
                    } else {
                        g
                    };
                    let speed = row.latency.map_or_else(|| "n/a".to_string(), |l| format!("{:.2}", l.median_ms));
                    let _ = write!(out, " {g} | {speed} |");
                }
                None => out.push_str(" | |"),
            }
        }
        out.push('\n');
    }
    let _ = write!(
        out,
        "\nGain is the mean relative increase of the metric score over images with |score| ≥ 1e-6; \
         speed is the median single-image latency.\n\nconfig digest: `{}`\n",
        report.config_digest
    );
    out
}

/// Pairs stacked vertically; each row is original | gutter | adversarial.
pub fn grid_rgb8(pairs: &[(ImageTensor, ImageTensor)]) -> Result<(usize, usize, Vec<u8>)> {
    let (first, _) = pairs.first().ok_or_else(|| Error::Invalid("empty grid".into()))?;
    let (h, w) = (first.height(), first.width());
    for (a, b) in pairs {
        for img in [a, b] {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::shape("grid", format!("mixed image sizes {h}×{w} and {}×{}", img.height(), img.width())));
            }
        }
    }
    let width = 2 * w + GRID_GUTTER;
    let height = pairs.len() * h + (pairs.len() - 1) * GRID_GUTTER;
    let mut buf = vec![GUTTER_VALUE; width * height * 3];
    for (k, (a, b)) in pairs.iter().enumerate() {
        let top = k * (h + GRID_GUTTER);
        for (img, left) in [(a, 0), (b, w + GRID_GUTTER)] {
            let rgb = img.to_rgb8();
            for y in 0..h {
                let dst = ((top + y) * width + left) * 3;
                buf[dst..dst + w * 3].copy_from_slice(&rgb[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    Ok((width, height, buf))
}

/// Writes `report.csv`, `report.md` and one PNG per grid into `out_dir`,
/// creating it if needed. Returns the written paths.
pub fn emit_report(report: &BenchmarkReport, grids: &[Grid], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let csv_path = out_dir.join("report.csv");
    let csv_text = csv_string(report)?;
    std::fs::write(&csv_path, &csv_text).map_err(|e| Error::io(&csv_path, e))?;
    let reparsed = parse_csv(&csv_text)?;
    let expected: Vec<CsvRow> = report.rows.iter().map(BenchRow::to_csv).collect();
    if reparsed != expected {
        return Err(Error::Invalid("report.csv does not round-trip".into()));
    }
    written.push(csv_path);

    let md_path = out_dir.join("report.md");
    std::fs::write(&md_path, markdown_string(report)).map_err(|e| Error::io(&md_path, e))?;
    written.push(md_path);

    for grid in grids.iter().filter(|g| !g.pairs.is_empty()) {
        let path = out_dir.join(grid.file_name());
        let (w, h, rgb) = grid_rgb8(&grid.pairs)?;
        write_rgb8(&path, w, h, &rgb, &[("config_digest", &report.config_digest)])?;
        written.push(path);
    }
    Ok(written)
}
