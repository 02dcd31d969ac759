//! Comparison tables and the radar figure built from evaluation summaries.
//!
//! Values are shown in percent with one decimal. A dataset row's delta is
//! taken between the unrounded dataset means. An average row's delta is the
//! difference of the displayed (rounded) averages, so the printed columns of
//! an average row always subtract exactly.

use std::fmt::Write as _;

use serde::Serialize;

use crate::inference::{SplitKind, Summary};
use crate::{Error, Result};

/// Rounds half away from zero to one decimal.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn show(x: f64) -> String {
    format!("{:.1}", round1(x))
}

fn show_delta(d: f64) -> String {
    let d = round1(d);
    let d = if d == 0.0 { 0.0 } else { d };
    format!("{d:+.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    /// Dataset name, or `None` for a split-kind average.
    pub dataset: Option<String>,
    pub kind: SplitKind,
    /// One value per run, percent, unrounded.
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    /// Second run minus first, when two runs are compared.
    pub dice_delta: Option<f64>,
    pub iou_delta: Option<f64>,
}

impl ComparisonRow {
    pub fn label(&self) -> String {
        match &self.dataset {
            Some(d) => d.clone(),
            None => format!("Avg. ({})", self.kind.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

/// Lines up one or two runs. With two runs, datasets present in only one
/// of them produce a warning and are left out, and averages are taken over
/// the shared datasets.
pub fn compare(runs: &[(String, Summary)]) -> Result<Comparison> {
    if runs.is_empty() || runs.len() > 2 {
        return Err(Error::Validation(format!("report takes one or two runs, got {}", runs.len())));
    }
    let first = &runs[0].1;
    let mut warnings = Vec::new();
    for (name, summary) in runs {
        for d in &summary.datasets {
            if runs.iter().any(|(_, s)| s.dataset(&d.dataset).is_none()) {
                warnings.push(format!("dataset {:?} only appears in run {name:?}; left out", d.dataset));
            }
        }
    }
    let shared: Vec<_> = first
        .datasets
        .iter()
        .filter(|d| runs.iter().all(|(_, s)| s.dataset(&d.dataset).is_some()))
        .collect();

    let mut rows = Vec::new();
    for kind in [SplitKind::Internal, SplitKind::External] {
        let in_kind: Vec<_> = shared.iter().filter(|d| d.kind == kind).collect();
        if in_kind.is_empty() {
            continue;
        }
        let mut dice_sum = vec![0.0; runs.len()];
        let mut iou_sum = vec![0.0; runs.len()];
        for d in &in_kind {
            let scores: Vec<_> = runs
                .iter()
                .map(|(_, s)| s.dataset(&d.dataset).expect("shared dataset"))
                .collect();
            let dice: Vec<f64> = scores.iter().map(|s| s.dice).collect();
            let iou: Vec<f64> = scores.iter().map(|s| s.iou).collect();
            for i in 0..runs.len() {
                dice_sum[i] += dice[i];
                iou_sum[i] += iou[i];
            }
            let delta = |v: &[f64]| (v.len() == 2).then(|| v[1] - v[0]);
            rows.push(ComparisonRow {
                dataset: Some(d.dataset.clone()),
                kind,
                dice_delta: delta(&dice),
                iou_delta: delta(&iou),
                dice,
                iou,
            });
        }
        let n = in_kind.len() as f64;
        let dice: Vec<f64> = dice_sum.iter().map(|s| s / n).collect();
        let iou: Vec<f64> = iou_sum.iter().map(|s| s / n).collect();
        let delta = |v: &[f64]| (v.len() == 2).then(|| round1(v[1]) - round1(v[0]));
        rows.push(ComparisonRow {
            dataset: None,
            kind,
            dice_delta: delta(&dice),
            iou_delta: delta(&iou),
            dice,
            iou,
        });
    }
    if rows.is_empty() {
        return Err(Error::Validation("the runs share no datasets".into()));
    }
    Ok(Comparison {
        runs: runs.iter().map(|(n, _)| n.clone()).collect(),
        rows,
        warnings,
    })
}

impl Comparison {
    /// Displayed cells of each row: label, kind, then per metric the run
    /// values followed by the delta (if any).
    pub fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.label(), r.kind.name().to_string()];
                for (vals, delta) in [(&r.dice, r.dice_delta), (&r.iou, r.iou_delta)] {
                    cells.extend(vals.iter().map(|&v| show(v)));
                    cells.extend(delta.map(show_delta));
                }
                cells
            })
            .collect()
    }

    /// Plain-text table.
    pub fn render_table(&self) -> String {
        let mut header = vec!["Dataset".to_string(), "Kind".to_string()];
        for metric in ["Dice", "IoU"] {
            for run in &self.runs {
                header.push(format!("{metric} {run}"));
            }
            if self.runs.len() == 2 {
                header.push(format!("{metric} delta"));
            }
        }
        let cells = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|row| row[i].chars().count())
                    .chain([header[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: &[String]| -> String {
            let mut s = String::new();
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                if i < 2 {
                    let _ = write!(s, "{cell:<w$}", w = widths[i]);
                } else {
                    let _ = write!(s, "{cell:>w$}", w = widths[i]);
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for (row, r) in cells.iter().zip(&self.rows) {
            if r.dataset.is_none() {
                out.push_str(&"-".repeat(rule));
                out.push('\n');
            }
            out.push_str(&line(row));
        }
        out
    }

    /// Radar chart of per-dataset Dice, one polygon per run.
    pub fn radar_svg(&self) -> String {
        const SIZE: f64 = 480.0;
        const RADIUS: f64 = 170.0;
        const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];
        let center = SIZE / 2.0;
        let axes: Vec<&ComparisonRow> = self.rows.iter().filter(|r| r.dataset.is_some()).collect();
        let n = axes.len().max(1) as f64;
        let point = |i: usize, value: f64| {
            let angle = -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * i as f64 / n;
            let r = RADIUS * (value / 100.0).clamp(0.0, 1.0);
            (center + r * angle.cos(), center + r * angle.sin())
        };

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">"#
        );
        for ring in [25.0, 50.0, 75.0, 100.0] {
            let pts: Vec<String> = (0..axes.len())
                .map(|i| {
                    let (x, y) = point(i, ring);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let _ = writeln!(svg, r##"<polygon points="{}" fill="none" stroke="#cccccc"/>"##, pts.join(" "));
        }
        for (i, row) in axes.iter().enumerate() {
            let (x, y) = point(i, 100.0);
            let (lx, ly) = point(i, 112.0);
            let _ = writeln!(svg, r##"<line x1="{center:.1}" y1="{center:.1}" x2="{x:.1}" y2="{y:.1}" stroke="#cccccc"/>"##);
            let _ = writeln!(
                svg,
                r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle">{}</text>"#,
                escape(&row.label())
            );
        }
        for (k, run) in self.runs.iter().enumerate() {
            let pts: Vec<String> = axes
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let (x, y) = point(i, r.dice[k]);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let color = COLORS[k % COLORS.len()];
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="12" y="{:.1}" fill="{color}">{} (Dice %)</text>"#,
                20.0 + 16.0 * k as f64,
                escape(run)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
