//! Metric and complexity tables, and the accuracy/FLOPs bubble chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::complexity::ComplexityReport;
use crate::metrics::{Stat, Summary, METRICS, METRIC_TITLES};
use crate::{Error, Result};

/// Metrics rendered as percentages in text tables.
const PERCENT_METRICS: [&str; 5] = ["accuracy", "sensitivity", "specificity", "precision", "npv"];

/// One table row: a configuration's per-metric aggregate over its folds.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub folds: usize,
    pub expected_folds: usize,
    /// Indexed like [`METRICS`]; `None` when undefined in every fold.
    pub cells: Vec<Option<Stat>>,
}

impl TableRow {
    pub fn complete(&self) -> bool {
        self.folds == self.expected_folds
    }

    pub fn from_summary(summary: &Summary, folds: &BTreeMap<String, usize>, expected: usize) -> Vec<TableRow> {
        summary
            .iter()
            .map(|(model, agg)| TableRow {
                model: model.clone(),
                folds: folds.get(model).copied().unwrap_or(expected),
                expected_folds: expected,
                cells: METRICS.iter().map(|m| agg.0.get(*m).copied()).collect(),
            })
            .collect()
    }
}

/// Lower is better only for the negative likelihood ratio.
fn higher_is_better(metric: &str) -> bool {
    metric != "lr_neg"
}

/// `flags[row][metric]`: the row holds the best mean for that metric among
/// complete rows (ties all flagged).
pub fn best_flags(rows: &[TableRow]) -> Vec<Vec<bool>> {
    let mut flags = vec![vec![false; METRICS.len()]; rows.len()];
    for (j, m) in METRICS.iter().enumerate() {
        let means = rows.iter().map(|r| r.cells[j].filter(|_| r.complete()).map(|s| s.mean));
        let best = means.clone().flatten().fold(None, |acc: Option<f64>, v| {
            Some(match acc {
                None => v,
                Some(a) if higher_is_better(m) => a.max(v),
                Some(a) => a.min(v),
            })
        });
        if let Some(best) = best {
            for (i, v) in means.enumerate() {
                flags[i][j] = v == Some(best);
            }
        }
    }
    flags
}

fn status(r: &TableRow) -> String {
    if r.complete() {
        "complete".into()
    } else {
        format!("incomplete {}/{}", r.folds, r.expected_folds)
    }
}

/// CSV with one `mean ± std` cell per metric at full precision; best cells
/// end in ` *`, undefined cells read `n/a`.
pub fn metrics_csv(rows: &[TableRow]) -> Result<String> {
    let flags = best_flags(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model", "folds", "status"];
    header.extend(METRIC_TITLES);
    w.write_record(&header)?;
    for (r, f) in rows.iter().zip(&flags) {
        let mut rec = vec![r.model.clone(), format!("{}/{}", r.folds, r.expected_folds), status(r)];
        for (cell, &best) in r.cells.iter().zip(f) {
            rec.push(match cell {
                Some(s) => format!("{} ± {}{}", s.mean, s.std, if best { " *" } else { "" }),
                None => "n/a".into(),
            });
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

fn parse_cell(cell: &str) -> Result<Option<Stat>> {
    let cell = cell.trim().trim_end_matches('*').trim();
    if cell == "n/a" {
        return Ok(None);
    }
    let (m, s) = cell
        .split_once('±')
        .ok_or_else(|| Error::invalid(format!("bad table cell {cell:?}")))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| Error::invalid(format!("bad table cell {cell:?}: {e}")));
    Ok(Some(Stat {
        mean: num(m)?,
        std: num(s)?,
    }))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 + METRICS.len() {
            return Err(Error::invalid(format!("table row has {} columns", rec.len())));
        }
        let (done, expected) = rec[1]
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("bad folds column {:?}", &rec[1])))?;
        let count = |t: &str| t.parse::<usize>().map_err(|e| Error::invalid(format!("bad folds column: {e}")));
        rows.push(TableRow {
            model: rec[0].to_string(),
            folds: count(done)?,
            expected_folds: count(expected)?,
            cells: (3..rec.len()).map(|i| parse_cell(&rec[i])).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn fixed_width(header: &[String], body: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|j| body.iter().map(|r| r[j].chars().count()).chain([header[j].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (j, c) in cells.iter().enumerate() {
            if j > 0 {
                s.push_str("  ");
            }
            let pad = widths[j] - c.chars().count();
            if j == 0 {
                s.push_str(c);
                s.extend(std::iter::repeat_n(' ', pad));
            } else {
                s.extend(std::iter::repeat_n(' ', pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in body {
        out.push_str(&line(r));
    }
    out
}

/// Fixed-width text: first five metrics in percent with two decimals, the
/// rest with four; best cells marked `*`, incomplete rows marked `!`.
pub fn metrics_text(rows: &[TableRow]) -> String {
    let flags = best_flags(rows);
    let mut header = vec!["Model".to_string()];
    header.extend(METRIC_TITLES.iter().map(|t| t.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .zip(&flags)
        .map(|(r, f)| {
            let name = if r.complete() {
                r.model.clone()
            } else {
                format!("{} ! {}/{} folds", r.model, r.folds, r.expected_folds)
            };
            let mut cells = vec![name];
            for ((m, cell), &best) in METRICS.iter().zip(&r.cells).zip(f) {
                let star = if best { "*" } else { " " };
                cells.push(match cell {
                    Some(s) if PERCENT_METRICS.contains(m) => format!("{:.2} ± {:.2}{star}", 100.0 * s.mean, 100.0 * s.std),
                    Some(s) => format!("{:.4} ± {:.4}{star}", s.mean, s.std),
                    None => "n/a ".into(),
                });
            }
            cells
        })
        .collect();
    fixed_width(&header, &body)
}

pub fn complexity_text(rows: &[ComplexityReport]) -> String {
    let header: Vec<String> = [
        "Model",
        "Params (M)",
        "FLOPs (G)",
        "Train (s/epoch)",
        "Disk (MB)",
        "Memory (MB)",
        "Inference (s)",
        "Input shape",
    ]
    .map(String::from)
    .to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                format!("{:.2}", r.params_millions),
                format!("{:.2}", r.flops_giga),
                format!("{:.2}", r.train_sec_per_epoch),
                format!("{:.2}", r.disk_mb),
                format!("{:.2}", r.accel_mem_mb),
                format!("{:.4}", r.inference_sec),
                r.input_shape.clone(),
            ]
        })
        .collect();
    fixed_width(&header, &body)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BubblePoint {
    pub model: String,
    pub flops_giga: f64,
    pub accuracy: f64,
    pub params_millions: f64,
}

/// Joins summary accuracies with complexity rows. A configuration matches a
/// complexity row by its full name, else by its backbone (the name up to
/// the first `-`). Unmatched configurations are returned as warnings.
pub fn bubble_points(summary: &Summary, complexity: &[ComplexityReport]) -> (Vec<BubblePoint>, Vec<String>) {
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for (model, agg) in summary {
        let backbone = model.split('-').next().unwrap_or(model);
        let row = complexity
            .iter()
            .find(|r| r.model == *model)
            .or_else(|| complexity.iter().find(|r| r.model == backbone));
        match (row, agg.0.get("accuracy")) {
            (Some(r), Some(acc)) => points.push(BubblePoint {
                model: model.clone(),
                flops_giga: r.flops_giga,
                accuracy: acc.mean,
                params_millions: r.params_millions,
            }),
            (None, _) => warnings.push(format!("{model}: no complexity entry, omitted from bubble chart")),
            (_, None) => warnings.push(format!("{model}: no accuracy, omitted from bubble chart")),
        }
    }
    (points, warnings)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bubble radius in pixels; area is proportional to parameters.
pub fn bubble_radius(params_millions: f64, max_params: f64) -> f64 {
    if max_params <= 0.0 {
        return 0.0;
    }
    40.0 * (params_millions / max_params).sqrt()
}

/// Accuracy against log-scale FLOPs, bubble area proportional to
/// parameters, each bubble labelled `FLOPs / accuracy / params`.
pub fn render_bubble_chart(points: &[BubblePoint]) -> String {
    let (w, h) = (760.0, 520.0);
    let (left, right, top, bottom) = (80.0, 40.0, 40.0, 70.0);
    let logs: Vec<f64> = points.iter().map(|p| p.flops_giga.max(1e-6).log10()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (x_lo, x_hi) = if points.is_empty() {
        (-1.0, 1.0)
    } else {
        ((lo - 0.1).floor(), (hi + 0.1).ceil())
    };
    let accs: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let a_lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let a_hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if points.is_empty() { 1.0 } else { a_hi - a_lo + 0.04 };
    // at most ten y ticks
    let step = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 10.0, 100.0]
        .into_iter()
        .find(|st| span / st <= 10.0)
        .unwrap_or(1000.0);
    let (y_lo, y_hi) = if points.is_empty() {
        (0.0, 1.0)
    } else {
        (((a_lo - 0.02) / step).floor() * step, ((a_hi + 0.02) / step).ceil() * step)
    };
    let sx = |l: f64| left + (l - x_lo) / (x_hi - x_lo) * (w - left - right);
    let sy = |a: f64| h - bottom - (a - y_lo) / (y_hi - y_lo) * (h - top - bottom);
    let max_params = points.iter().map(|p| p.params_millions).fold(0.0, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let data = serde_json::to_string(points).unwrap_or_default();
    let _ = writeln!(s, "<metadata>{}</metadata>", esc(&data));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (y0, x0) = (h - bottom, left);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{:.1}" y2="{y0}" stroke="black"/>"#, w - right);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{top}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    let mut d = x_lo;
    while d <= x_hi + 1e-9 {
        let x = sx(d);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y0 + 18.0,
            fmt_flops(10f64.powf(d))
        );
        d += 1.0;
    }
    let steps = ((y_hi - y_lo) / step).round() as usize;
    for i in 0..=steps {
        let a = y_lo + i as f64 * step;
        let y = sy(a);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}%</text>"#, x0 - 8.0, y + 4.0, a * 100.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">FLOPs (G, log scale)</text>"#,
        (left + w - right) / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">Accuracy</text>"#,
        (top + y0) / 2.0,
        (top + y0) / 2.0
    );
    for (p, l) in points.iter().zip(&logs) {
        let (cx, cy) = (sx(*l), sy(p.accuracy));
        let r = bubble_radius(p.params_millions, max_params);
        let _ = writeln!(
            s,
            r##"<circle cx="{cx:.1}" cy="{cy:.1}" r="{r:.2}" fill="#4c72b0" fill-opacity="0.45" stroke="#2a4a80"><title>{}</title></circle>"##,
            esc(&p.model)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            cy - r - 14.0,
            esc(&p.model)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.2}G / {:.2}% / {:.2}M</text>"#,
            cy - r - 3.0,
            p.flops_giga,
            p.accuracy * 100.0,
            p.params_millions
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_flops(g: f64) -> String {
    if g >= 1.0 {
        format!("{g:.0}")
    } else {
        format!("{g}")
    }
}
