//! Run artefacts: metric logs, summaries, PGM dumps and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Append-only `run_id,step,metric,value` log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, run_id: &str, step: u64, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            run_id: run_id.into(),
            step,
            metric: metric.into(),
            value,
        });
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    /// `(step, value)` pairs of one metric in log order.
    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.series(metric).last().map(|&(_, v)| v)
    }

    pub fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let rows = r.deserialize().collect::<Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows })
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Binary greyscale PGM, values min-max scaled to 0..=255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> anyhow::Result<()> {
    anyhow::ensure!(values.len() == width * height, "{} values for {width}x{height}", values.len());
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8));
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Line plot of one metric per run as a standalone SVG.
pub fn plot_svg(log: &MetricsLog, metric: &str) -> anyhow::Result<String> {
    let mut runs: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in log.rows.iter().filter(|r| r.metric == metric && r.value.is_finite()) {
        runs.entry(&r.run_id).or_default().push((r.step as f64, r.value));
    }
    anyhow::ensure!(!runs.is_empty(), "no finite values for metric `{metric}`");
    let pts = runs.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = h - m,
        r = w - m
    )?;
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{metric}</text>"#, w / 2.0)?;
    writeln!(s, r#"<text x="{m}" y="{}" text-anchor="middle">{x0}</text>"#, h - m + 16.0)?;
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1}</text>"#, w - m, h - m + 16.0)?;
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, m - 4.0, h - m)?;
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#, m - 4.0, m + 4.0)?;
    for (i, (run, pts)) in runs.iter().enumerate() {
        let c = colors[i % colors.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}"/>"#, d.join(" "))?;
        writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{run}</text>"#, w - m + 4.0 - 120.0, m + 14.0 * i as f64)?;
    }
    s.push_str("</svg>\n");
    Ok(s)
}
