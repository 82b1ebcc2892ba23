//! wasm-bindgen surface for `www/index.html`.
//!
//! Each panel has a plain Rust function (tested natively) and a thin
//! `#[wasm_bindgen]` wrapper that maps errors to `JsError`.

use std::fmt::Write as _;

use image::RgbImage;
use serde_json::json;
use tlbench::augment::{self, AugmentationSpec};
use tlbench::metrics::{self, MetricReport, PredictionSet, RocPoint};
use tlbench::stats::{self, AccuracyMatrix};
use tlbench::{Error, Result};
use wasm_bindgen::prelude::*;

pub const MAX_REPLICAS: usize = 64;

#[derive(Clone, Debug)]
pub struct Replica {
    pub image: RgbImage,
    pub ops: String,
}

/// Augmented copies of an RGBA canvas buffer, same stream as `tlbench augment`.
pub fn augment_preview(rgba: &[u8], width: u32, height: u32, seed: u64, count: usize, probability: f32) -> Result<Vec<Replica>> {
    if rgba.len() != (width * height * 4) as usize || width < 2 || height < 2 {
        return Err(Error::invalid(format!("expected {width}x{height} RGBA pixels, got {} bytes", rgba.len())));
    }
    if !(1..=MAX_REPLICAS).contains(&count) {
        return Err(Error::invalid(format!("replica count must be in 1..={MAX_REPLICAS}")));
    }
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    let img = RgbImage::from_raw(width, height, rgb).expect("length checked");
    let spec = AugmentationSpec {
        expansion_factor: count,
        ..AugmentationSpec::standard().with_probability(probability)
    };
    spec.validate()?;
    Ok(augment::replicas(&img, "preview", &spec, seed)
        .into_iter()
        .map(|(image, draws)| Replica { image, ops: augment::format_draws(&draws) })
        .collect())
}

/// `label,score` lines, optional header, blank lines ignored.
pub fn parse_scores(text: &str) -> Result<(Vec<u8>, Vec<f64>)> {
    let (mut labels, mut scores) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let bad = || Error::invalid(format!("line {}: expected `label,score`, got {line:?}", i + 1));
        let (l, s) = line.split_once([',', '\t', ' ']).ok_or_else(bad)?;
        labels.push(l.trim().parse().map_err(|_| bad())?);
        scores.push(s.trim().parse().map_err(|_| bad())?);
    }
    Ok((labels, scores))
}

pub fn metric_report(text: &str, threshold: f64) -> Result<MetricReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid("threshold must be in [0,1]"));
    }
    let (labels, scores) = parse_scores(text)?;
    if labels.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    let mut set = PredictionSet::from_scores(&labels, &scores)?;
    set.threshold = threshold;
    metrics::evaluate(&set)
}

pub fn render_roc(points: &[RocPoint], auc: Option<f64>) -> String {
    let (size, pad) = (320.0, 40.0);
    let plot = size - 2.0 * pad;
    let xy = |p: &RocPoint| (pad + p.fpr * plot, size - pad - p.tpr * plot);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect x=\"{pad}\" y=\"{pad}\" width=\"{plot}\" height=\"{plot}\" fill=\"none\" stroke=\"#999\"/>");
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{pad}\" stroke=\"#ccc\" stroke-dasharray=\"4 3\"/>",
        size - pad,
        size - pad
    );
    let path: Vec<String> = points.iter().map(xy).map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    if !path.is_empty() {
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>", path.join(" "));
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">false positive rate</text>", size / 2.0, size - 12.0);
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 12 {})\">true positive rate</text>",
        size / 2.0,
        size / 2.0
    );
    if let Some(auc) = auc {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">AUC {auc:.4}</text>", size - pad - 6.0, size - pad - 8.0);
    }
    s.push_str("</svg>\n");
    s
}

pub fn cd_diagram(csv: &str, alpha: f64) -> Result<(stats::Comparison, String)> {
    stats::compare(&AccuracyMatrix::parse_csv(csv)?, alpha)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Preview {
    items: Vec<Replica>,
}

#[wasm_bindgen]
impl Preview {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn width(&self, i: usize) -> u32 {
        self.items[i].image.width()
    }

    pub fn height(&self, i: usize) -> u32 {
        self.items[i].image.height()
    }

    /// RGBA bytes ready for `ImageData`.
    pub fn rgba(&self, i: usize) -> Vec<u8> {
        self.items[i].image.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    pub fn ops(&self, i: usize) -> String {
        self.items[i].ops.clone()
    }
}

#[wasm_bindgen(js_name = augmentPreview)]
pub fn augment_preview_js(rgba: &[u8], width: u32, height: u32, seed: u64, count: usize, probability: f32) -> std::result::Result<Preview, JsError> {
    augment_preview(rgba, width, height, seed, count, probability).map(|items| Preview { items }).map_err(js)
}

/// JSON `{report, svg}`; the report omits the ROC points, the svg draws them.
#[wasm_bindgen(js_name = metricReport)]
pub fn metric_report_js(text: &str, threshold: f64) -> std::result::Result<String, JsError> {
    let mut r = metric_report(text, threshold).map_err(js)?;
    let svg = render_roc(&r.roc, r.auc);
    r.roc.clear();
    Ok(json!({ "report": r, "svg": svg }).to_string())
}

/// JSON `{comparison, svg}` for `model,fold,accuracy` CSV text.
#[wasm_bindgen(js_name = cdDiagram)]
pub fn cd_diagram_js(csv: &str, alpha: f64) -> std::result::Result<String, JsError> {
    let (c, svg) = cd_diagram(csv, alpha).map_err(js)?;
    Ok(json!({ "comparison": c, "svg": svg }).to_string())
}
