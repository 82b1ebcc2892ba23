//! Ranking, Friedman omnibus test, Nemenyi critical difference and
//! critical-difference diagrams.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::{Error, Result};

/// `values[model][fold]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub models: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct AccuracyRow {
    model: String,
    fold: usize,
    accuracy: f64,
}

impl AccuracyMatrix {
    pub fn new(models: Vec<String>, values: Vec<Vec<f64>>) -> Result<AccuracyMatrix> {
        let a = AccuracyMatrix { models, values };
        a.validate()?;
        Ok(a)
    }

    pub fn folds(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.len() < 2 || self.folds() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 models and 2 folds, got {} x {}",
                self.models.len(),
                self.folds()
            )));
        }
        if self.values.len() != self.models.len() {
            return Err(Error::invalid("one accuracy row per model required"));
        }
        for (m, row) in self.models.iter().zip(&self.values) {
            if row.len() != self.folds() {
                return Err(Error::invalid(format!("model {m} has {} folds, expected {}", row.len(), self.folds())));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("model {m}: accuracy {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Reads `model,fold,accuracy` rows; models keep first-seen order.
    pub fn read_csv(path: &Path) -> Result<AccuracyMatrix> {
        AccuracyMatrix::from_csv(csv::Reader::from_path(path)?)
    }

    pub fn parse_csv(text: &str) -> Result<AccuracyMatrix> {
        AccuracyMatrix::from_csv(csv::Reader::from_reader(text.as_bytes()))
    }

    fn from_csv<R: std::io::Read>(mut r: csv::Reader<R>) -> Result<AccuracyMatrix> {
        let mut models: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut max_fold = 0;
        for row in r.deserialize::<AccuracyRow>() {
            let row = row?;
            let i = match models.iter().position(|m| *m == row.model) {
                Some(i) => i,
                None => {
                    models.push(row.model.clone());
                    models.len() - 1
                }
            };
            max_fold = max_fold.max(row.fold + 1);
            cells.insert((i, row.fold), row.accuracy);
        }
        let mut values = vec![vec![0.0; max_fold]; models.len()];
        for i in 0..models.len() {
            for f in 0..max_fold {
                values[i][f] = *cells
                    .get(&(i, f))
                    .ok_or_else(|| Error::invalid(format!("missing accuracy for {} fold {f}", models[i])))?;
            }
        }
        AccuracyMatrix::new(models, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (m, row) in self.models.iter().zip(&self.values) {
            for (fold, &accuracy) in row.iter().enumerate() {
                w.serialize(AccuracyRow { model: m.clone(), fold, accuracy })?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `ranks[model][fold]`, 1 = best, ties share the mean rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub models: Vec<String>,
    pub ranks: Vec<Vec<f64>>,
    pub avg_rank: Vec<f64>,
}

impl RankMatrix {
    pub fn m(&self) -> usize {
        self.models.len()
    }

    pub fn n(&self) -> usize {
        self.ranks.first().map_or(0, Vec::len)
    }
}

/// Mean ranks of `xs`, highest value first.
pub fn rank_desc(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_models(a: &AccuracyMatrix) -> Result<RankMatrix> {
    a.validate()?;
    let (m, n) = (a.models.len(), a.folds());
    let mut ranks = vec![vec![0.0; n]; m];
    for f in 0..n {
        let col: Vec<f64> = (0..m).map(|i| a.values[i][f]).collect();
        for (i, r) in rank_desc(&col).into_iter().enumerate() {
            ranks[i][f] = r;
        }
    }
    let avg_rank = ranks.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    Ok(RankMatrix { models: a.models.clone(), ranks, avg_rank })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    /// Exact distribution of the statistic under within-fold exchangeability.
    ExactPermutation,
    ChiSquare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Friedman {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub method: PMethod,
    /// Large-sample chi-square p, always reported.
    pub p_chi2: f64,
}

/// Tie-corrected statistic from per-fold rank sums (scaled by `scale`).
fn statistic_from_sums(sums: &[f64], m: usize, n: usize, denom: f64) -> f64 {
    let centre = n as f64 * (m as f64 + 1.0) / 2.0;
    let ss: f64 = sums.iter().map(|r| (r - centre).powi(2)).sum();
    (m as f64 - 1.0) * ss / denom
}

fn friedman_denominator(r: &RankMatrix) -> f64 {
    let (m, n) = (r.m() as f64, r.n() as f64);
    let sq: f64 = r.ranks.iter().flatten().map(|x| x * x).sum();
    sq - n * m * (m + 1.0).powi(2) / 4.0
}

fn distinct_permutations(row: &[i64]) -> Vec<Vec<i64>> {
    let mut v = row.to_vec();
    v.sort_unstable();
    let mut out = vec![v.clone()];
    // next lexicographic permutation, which skips duplicates
    loop {
        let Some(i) = (0..v.len().saturating_sub(1)).rev().find(|&i| v[i] < v[i + 1]) else {
            return out;
        };
        let j = (i + 1..v.len()).rev().find(|&j| v[j] > v[i]).unwrap();
        v.swap(i, j);
        v[i + 1..].reverse();
        out.push(v.clone());
    }
}

const EXACT_WORK_LIMIT: usize = 30_000_000;

/// Exact P(S >= s) over independent uniform within-fold permutations of the
/// observed rank rows, or `None` when the state space is too large.
fn exact_p(r: &RankMatrix, observed: f64, denom: f64) -> Option<f64> {
    let (m, n) = (r.m(), r.n());
    if m > 8 {
        return None;
    }
    // ordered maps keep the float accumulation order fixed across processes
    let mut dist: BTreeMap<Vec<i64>, f64> = BTreeMap::from([(vec![0; m], 1.0)]);
    for f in 0..n {
        // doubled ranks are integral even with mean-rank ties
        let row: Vec<i64> = (0..m).map(|i| (2.0 * r.ranks[i][f]).round() as i64).collect();
        let perms = distinct_permutations(&row);
        if dist.len().saturating_mul(perms.len()) > EXACT_WORK_LIMIT {
            return None;
        }
        let w = 1.0 / perms.len() as f64;
        let mut next: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
        for (sums, p) in &dist {
            for perm in &perms {
                let key: Vec<i64> = sums.iter().zip(perm).map(|(a, b)| a + b).collect();
                *next.entry(key).or_insert(0.0) += p * w;
            }
        }
        dist = next;
    }
    let tol = 1e-9 * observed.abs().max(1.0);
    let p: f64 = dist
        .iter()
        .filter(|(sums, _)| {
            let s: Vec<f64> = sums.iter().map(|&x| x as f64 / 2.0).collect();
            statistic_from_sums(&s, m, n, denom) >= observed - tol
        })
        .map(|(_, p)| p)
        .sum();
    Some(p.min(1.0))
}

/// Tie-corrected Friedman statistic with an exact permutation p-value for
/// small tables and the chi-square (m-1 df) approximation otherwise.
pub fn friedman_test(r: &RankMatrix) -> Result<Friedman> {
    let (m, n) = (r.m(), r.n());
    if m < 2 || n < 2 {
        return Err(Error::invalid("Friedman test needs at least 2 models and 2 folds"));
    }
    let df = m - 1;
    let denom = friedman_denominator(r);
    if denom <= 1e-12 {
        return Ok(Friedman { statistic: 0.0, df, p_value: 1.0, method: PMethod::ExactPermutation, p_chi2: 1.0 });
    }
    let sums: Vec<f64> = r.ranks.iter().map(|row| row.iter().sum()).collect();
    let statistic = statistic_from_sums(&sums, m, n, denom);
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let p_chi2 = (1.0 - chi.cdf(statistic)).clamp(0.0, 1.0);
    let (p_value, method) = match exact_p(r, statistic, denom) {
        Some(p) => (p, PMethod::ExactPermutation),
        None => (p_chi2, PMethod::ChiSquare),
    };
    Ok(Friedman { statistic, df, p_value, method, p_chi2 })
}

/// Nemenyi critical values q_alpha (studentized range at infinite degrees
/// of freedom divided by sqrt(2)) for m = 2..=30 models.
///
/// Source: m = 2..10 transcribed from J. Demsar, "Statistical Comparisons of
/// Classifiers over Multiple Data Sets", JMLR 7 (2006) 1-30, Table 5(a).
/// m = 11..30 are the same quantity evaluated with the studentized range
/// distribution (scipy.stats.studentized_range, df = 1e7), rounded to 3
/// decimals; that evaluation reproduces the m <= 10 entries within 0.001.
pub const Q_005: [f64; 29] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458,
    3.489, 3.517, 3.544, 3.569, 3.593, 3.616, 3.637, 3.658, 3.678, 3.696, 3.714, 3.732, 3.749,
];
pub const Q_010: [f64; 29] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230,
    3.261, 3.291, 3.319, 3.346, 3.371, 3.394, 3.417, 3.439, 3.459, 3.479, 3.498, 3.516, 3.533,
];

pub fn q_alpha(alpha: f64, m: usize) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_005
    } else if (alpha - 0.1).abs() < 1e-12 {
        &Q_010
    } else {
        return Err(Error::UnsupportedAlpha { alpha });
    };
    if !(2..=30).contains(&m) {
        return Err(Error::invalid(format!("q table covers 2..=30 models, got {m}")));
    }
    Ok(table[m - 2])
}

pub fn critical_difference(alpha: f64, m: usize, n: usize) -> Result<f64> {
    Ok(q_alpha(alpha, m)? * (m as f64 * (m as f64 + 1.0) / (6.0 * n as f64)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdResult {
    pub friedman_statistic: f64,
    pub friedman_p: f64,
    pub alpha: f64,
    pub critical_difference: f64,
    /// Index pairs `(i, j)`, `i < j`, whose average ranks differ by less than CD.
    pub pairwise_not_different: Vec<(usize, usize)>,
    /// Maximal groups of mutually not-different models, as model indices
    /// sorted by average rank.
    pub cliques: Vec<Vec<usize>>,
}

pub fn nemenyi_cd(r: &RankMatrix, friedman: &Friedman, alpha: f64) -> Result<CdResult> {
    let m = r.m();
    let cd = critical_difference(alpha, m, r.n())?;
    let mut pairs = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if (r.avg_rank[i] - r.avg_rank[j]).abs() < cd {
                pairs.push((i, j));
            }
        }
    }
    Ok(CdResult {
        friedman_statistic: friedman.statistic,
        friedman_p: friedman.p_value,
        alpha,
        critical_difference: cd,
        pairwise_not_different: pairs,
        cliques: cliques(&r.avg_rank, cd),
    })
}

/// `cd_result.json`: the Friedman test, the Nemenyi critical difference and
/// the rank table it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub models: Vec<String>,
    pub avg_rank: Vec<f64>,
    pub friedman: Friedman,
    pub cd: CdResult,
}

/// Ranks, tests and renders the CD diagram for an accuracy matrix.
pub fn compare(a: &AccuracyMatrix, alpha: f64) -> Result<(Comparison, String)> {
    let r = rank_models(a)?;
    let friedman = friedman_test(&r)?;
    let cd = nemenyi_cd(&r, &friedman, alpha)?;
    let svg = render_cd_diagram(&r, &cd);
    Ok((
        Comparison {
            models: r.models.clone(),
            avg_rank: r.avg_rank.clone(),
            friedman,
            cd,
        },
        svg,
    ))
}

/// Model indices sorted by average rank (best first), ties by index.
pub fn rank_order(avg: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..avg.len()).collect();
    order.sort_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(a.cmp(&b)));
    order
}

/// Maximal runs along the rank axis whose span is below `cd`. On a line,
/// every set of mutually close points is such a run, so these are exactly
/// the maximal cliques with two or more members.
pub fn cliques(avg: &[f64], cd: f64) -> Vec<Vec<usize>> {
    let order = rank_order(avg);
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut last_end = 0;
    for start in 0..order.len() {
        let mut end = start;
        while end + 1 < order.len() && avg[order[end + 1]] - avg[order[start]] < cd {
            end += 1;
        }
        if end > start && end > last_end {
            out.push(order[start..=end].to_vec());
            last_end = end;
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Critical-difference diagram as SVG. Models sit on a rank axis (best on
/// the left), the CD interval is drawn above the axis and every clique gets
/// a thick bar. The rank table is embedded as JSON in `<metadata>`.
pub fn render_cd_diagram(r: &RankMatrix, cd: &CdResult) -> String {
    let m = r.m();
    let order = rank_order(&r.avg_rank);
    let left_n = m.div_ceil(2);
    let width = 720.0;
    let (x0, x1) = (170.0, width - 170.0);
    let axis_y = 70.0;
    let scale = if m > 1 { (x1 - x0) / (m as f64 - 1.0) } else { 0.0 };
    let xr = |rank: f64| x0 + (rank - 1.0) * scale;
    let bar_step = 8.0;
    let bars_top = axis_y + 14.0;
    let labels_top = bars_top + bar_step * cd.cliques.len() as f64 + 16.0;
    let row_h = 20.0;
    let height = labels_top + row_h * left_n.max(m - left_n) as f64 + 10.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="DejaVu Sans, sans-serif" font-size="12">"#
    );
    let meta = serde_json::json!({
        "models": r.models,
        "avg_rank": r.avg_rank,
        "critical_difference": cd.critical_difference,
        "alpha": cd.alpha,
        "friedman_statistic": cd.friedman_statistic,
        "friedman_p": cd.friedman_p,
        "cliques": cd.cliques,
    });
    let _ = writeln!(s, "<metadata>{}</metadata>", xml_escape(&meta.to_string()));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    // CD interval
    let cd_w = cd.critical_difference * scale;
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="22.00" x2="{:.2}" y2="22.00" stroke="black" stroke-width="1.5"/>"#,
        x0 + cd_w
    );
    for x in [x0, x0 + cd_w] {
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="17.00" x2="{x:.2}" y2="27.00" stroke="black"/>"#);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="14.00" text-anchor="middle">CD = {:.3}</text>"#,
        x0 + cd_w / 2.0,
        cd.critical_difference
    );

    // rank axis
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{axis_y:.2}" x2="{x1:.2}" y2="{axis_y:.2}" stroke="black"/>"#);
    for k in 1..=m {
        let x = xr(k as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{axis_y:.2}" stroke="black"/>"#,
            axis_y - 6.0
        );
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{k}</text>"#, axis_y - 10.0);
    }

    // cliques
    for (b, clique) in cd.cliques.iter().enumerate() {
        let lo = clique.iter().map(|&i| r.avg_rank[i]).fold(f64::INFINITY, f64::min);
        let hi = clique.iter().map(|&i| r.avg_rank[i]).fold(f64::NEG_INFINITY, f64::max);
        let y = bars_top + bar_step * b as f64;
        let _ = writeln!(
            s,
            r#"<line class="clique" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="4" stroke-linecap="round"/>"#,
            xr(lo) - 3.0,
            xr(hi) + 3.0
        );
    }

    // model labels
    for (pos, &i) in order.iter().enumerate() {
        let x = xr(r.avg_rank[i]);
        let (row, on_left) = if pos < left_n { (pos, true) } else { (m - 1 - pos, false) };
        let y = labels_top + row_h * row as f64;
        let (tx, anchor) = if on_left { (x0 - 20.0, "end") } else { (x1 + 20.0, "start") };
        let _ = writeln!(
            s,
            r#"<polyline points="{x:.2},{axis_y:.2} {x:.2},{y:.2} {tx:.2},{y:.2}" fill="none" stroke="black"/>"#
        );
        let label = format!("{} ({:.2})", xml_escape(&r.models[i]), r.avg_rank[i]);
        let tx = if on_left { tx - 4.0 } else { tx + 4.0 };
        let _ = writeln!(s, r#"<text x="{tx:.2}" y="{:.2}" text-anchor="{anchor}">{label}</text>"#, y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let models = (0..rows.len()).map(|i| format!("M{i}")).collect();
        AccuracyMatrix::new(models, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn strict_and_tied_ranks() {
        assert_eq!(rank_desc(&[0.9, 0.8, 0.7]), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_desc(&[0.9, 0.9, 0.7]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn identical_models_give_zero_statistic() {
        let a = matrix(&[&[0.8, 0.7, 0.9], &[0.8, 0.7, 0.9], &[0.8, 0.7, 0.9]]);
        let r = rank_models(&a).unwrap();
        let f = friedman_test(&r).unwrap();
        assert_eq!((f.statistic, f.p_value), (0.0, 1.0));
        let cd = nemenyi_cd(&r, &f, 0.1).unwrap();
        assert_eq!(cd.pairwise_not_different.len(), 3);
        assert_eq!(cd.cliques, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn degenerate_shapes_rejected() {
        assert!(AccuracyMatrix::new(vec!["a".into()], vec![vec![0.5, 0.6]]).is_err());
        assert!(AccuracyMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.5], vec![0.6]]).is_err());
    }

    #[test]
    fn unsupported_alpha_lists_choices() {
        let e = q_alpha(0.01, 5).unwrap_err();
        assert!(e.to_string().contains("0.05, 0.1"));
    }

    #[test]
    fn cd_for_two_models_ten_folds() {
        let cd = critical_difference(0.05, 2, 10).unwrap();
        assert!((cd - 1.960 * 0.1f64.sqrt()).abs() < 1e-12);
        assert!((0.1f64.sqrt() - 0.3162).abs() < 1e-4);
    }

    #[test]
    fn far_apart_pair_has_no_bar() {
        let a = matrix(&[&[0.9; 10], &[0.1; 10]]);
        let r = rank_models(&a).unwrap();
        let f = friedman_test(&r).unwrap();
        let cd = nemenyi_cd(&r, &f, 0.1).unwrap();
        assert!(cd.pairwise_not_different.is_empty());
        assert!(cd.cliques.is_empty());
        assert!(!render_cd_diagram(&r, &cd).contains("class=\"clique\""));
    }

    #[test]
    fn exact_p_for_two_models_two_folds() {
        // model 0 wins both folds: S = 2, and P(S >= 2) = 1/2 under exchange
        let a = matrix(&[&[0.9, 0.9], &[0.1, 0.1]]);
        let r = rank_models(&a).unwrap();
        let f = friedman_test(&r).unwrap();
        assert!((f.statistic - 2.0).abs() < 1e-12);
        assert_eq!(f.method, PMethod::ExactPermutation);
        assert!((f.p_value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn large_tables_fall_back_to_chi_square() {
        let rows: Vec<Vec<f64>> = (0..23).map(|i| (0..5).map(|f| ((i * 7 + f * 3) % 23) as f64 / 23.0).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let r = rank_models(&matrix(&refs)).unwrap();
        let f = friedman_test(&r).unwrap();
        assert_eq!(f.method, PMethod::ChiSquare);
        assert_eq!(f.p_value, f.p_chi2);
    }
}
