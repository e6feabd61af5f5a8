//! Balance tables, weight summaries and estimand profiles.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::CosDataset;
use crate::error::Result;

pub const DEFAULT_LARGE_WEIGHT: f64 = 10.0;
const SUMMARY_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn kish_ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq == 0.0 {
        0.0
    } else {
        s * s / sq
    }
}

/// Raw covariate columns evaluated per unit: cluster covariates first.
fn raw_columns(ds: &CosDataset) -> Vec<(String, Vec<f64>)> {
    let mut cols = Vec::new();
    for (j, name) in ds.cluster_covariates().iter().enumerate() {
        let v = (0..ds.n())
            .map(|i| ds.clusters()[ds.unit_cluster(i)].w[j])
            .collect();
        cols.push((name.clone(), v));
    }
    for (j, name) in ds.unit_covariates().iter().enumerate() {
        cols.push((name.clone(), ds.units().iter().map(|u| u.x[j]).collect()));
    }
    cols
}

/// Equal weights give the plain mean exactly.
fn weighted_mean(values: &[f64], weights: &[f64], idx: &[usize]) -> f64 {
    if let Some(&first) = idx.first() {
        let w0 = weights[first];
        if w0 != 0.0 && idx.iter().all(|&i| weights[i] == w0) {
            return idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64;
        }
    }
    let (num, den) = idx
        .iter()
        .fold((0.0, 0.0), |(a, b), &i| (a + weights[i] * values[i], b + weights[i]));
    if den == 0.0 {
        f64::NAN
    } else {
        num / den
    }
}

fn sample_variance(values: &[f64], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    if idx.len() < 2 {
        return 0.0;
    }
    let mean = idx.iter().map(|&i| values[i]).sum::<f64>() / n;
    idx.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StdDiffRow {
    pub covariate: String,
    pub std_diff: f64,
    /// Set when the pooled sd is zero and `std_diff` was reported as 0.
    pub zero_sd: bool,
}

/// `(treated mean − control mean) / √((s²_t + s²_c)/2)` per raw covariate.
/// `weights` are full-length unit weights in dataset order; the pooled sd
/// always comes from the unweighted data.
pub fn standardized_differences(ds: &CosDataset, weights: Option<&[f64]>) -> Vec<StdDiffRow> {
    let ones = vec![1.0; ds.n()];
    let w = weights.unwrap_or(&ones);
    let treated = ds.treated_units();
    let control = ds.control_units();
    raw_columns(ds)
        .into_iter()
        .map(|(covariate, v)| {
            let pooled = ((sample_variance(&v, &treated) + sample_variance(&v, &control)) / 2.0).sqrt();
            let diff = weighted_mean(&v, w, &treated) - weighted_mean(&v, w, &control);
            let zero_sd = pooled.is_nan() || pooled <= 0.0;
            StdDiffRow {
                covariate,
                std_diff: if zero_sd { 0.0 } else { diff / pooled },
                zero_sd,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub threshold: f64,
    pub count_above: usize,
    /// `(probability, quantile)` pairs, linear interpolation between order
    /// statistics.
    pub quantiles: Vec<(f64, f64)>,
    pub ess: f64,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn weight_summary(weights: &[f64], threshold: f64) -> WeightSummary {
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return WeightSummary {
            n,
            min: f64::NAN,
            max: f64::NAN,
            mean: f64::NAN,
            threshold,
            count_above: 0,
            quantiles: Vec::new(),
            ess: 0.0,
        };
    }
    WeightSummary {
        n,
        min: sorted[0],
        max: sorted[n - 1],
        mean: sorted.iter().sum::<f64>() / n as f64,
        threshold,
        count_above: sorted.iter().filter(|&&w| w > threshold).count(),
        quantiles: SUMMARY_QUANTILES
            .iter()
            .map(|&p| (p, quantile_sorted(&sorted, p)))
            .collect(),
        ess: kish_ess(weights),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub covariate: String,
    pub treated_raw: f64,
    pub treated_weighted: f64,
    pub control_raw: f64,
    pub control_weighted: f64,
}

/// Raw and weighted covariate means per arm.
pub fn estimand_profile(ds: &CosDataset, weights: &[f64]) -> Vec<ProfileRow> {
    let ones = vec![1.0; ds.n()];
    let treated = ds.treated_units();
    let control = ds.control_units();
    raw_columns(ds)
        .into_iter()
        .map(|(covariate, v)| ProfileRow {
            covariate,
            treated_raw: weighted_mean(&v, &ones, &treated),
            treated_weighted: weighted_mean(&v, weights, &treated),
            control_raw: weighted_mean(&v, &ones, &control),
            control_weighted: weighted_mean(&v, weights, &control),
        })
        .collect()
}

/// Plain table rendered as CSV or aligned text.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(&self.headers)?;
        for r in &self.rows {
            out.write_record(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|j| {
                self.rows
                    .iter()
                    .map(|r| r[j].len())
                    .chain([self.headers[j].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            for (j, c) in cells.iter().enumerate() {
                if j == 0 {
                    let _ = write!(s, "{:<w$}", c, w = widths[j]);
                } else {
                    let _ = write!(s, "  {:>w$}", c, w = widths[j]);
                }
            }
            s.push('\n');
        };
        line(&mut s, &self.headers);
        for r in &self.rows {
            line(&mut s, r);
        }
        s
    }
}

/// Balance table before and after weighting.
pub fn balance_table(before: &[StdDiffRow], after: &[StdDiffRow]) -> Table {
    let mut t = Table::new(&["covariate", "std_diff_unweighted", "std_diff_weighted"]);
    for (b, a) in before.iter().zip(after) {
        t.push(vec![b.covariate.clone(), b.std_diff.to_string(), a.std_diff.to_string()]);
    }
    t
}

pub fn profile_table(rows: &[ProfileRow]) -> Table {
    let mut t = Table::new(&[
        "covariate",
        "treated_raw",
        "treated_weighted",
        "control_raw",
        "control_weighted",
    ]);
    for r in rows {
        t.push(vec![
            r.covariate.clone(),
            r.treated_raw.to_string(),
            r.treated_weighted.to_string(),
            r.control_raw.to_string(),
            r.control_weighted.to_string(),
        ]);
    }
    t
}

pub fn summary_table(label: &str, s: &WeightSummary) -> Table {
    let mut t = Table::new(&["side", "statistic", "value"]);
    let mut add = |k: String, v: String| t.push(vec![label.to_string(), k, v]);
    add("n".into(), s.n.to_string());
    add("min".into(), s.min.to_string());
    add("max".into(), s.max.to_string());
    add("mean".into(), s.mean.to_string());
    add(format!("count_above_{}", s.threshold), s.count_above.to_string());
    for (p, q) in &s.quantiles {
        add(format!("q{p}"), q.to_string());
    }
    add("ess".into(), s.ess.to_string());
    t
}

/// Rounds numeric cells for display.
pub fn rounded(t: &Table, digits: usize) -> Table {
    let rows = t
        .rows
        .iter()
        .map(|r| {
            r.iter()
                .map(|c| match c.parse::<f64>() {
                    Ok(v) if c.contains('.') || c.contains('e') => format!("{v:.digits$}"),
                    _ => c.clone(),
                })
                .collect()
        })
        .collect();
    Table {
        headers: t.headers.clone(),
        rows,
    }
}
