//! Heuristic penalty hyperparameters from a random-intercept working model.
//!
//! The outcome is regressed on the balance features by least squares and
//! the residuals are split into between- and within-cluster variance by the
//! ANOVA method of moments. The ICC and the noise-to-signal ratio
//! `(σ²_cluster + σ²_unit) / C²` then set the penalty.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CosDataset;
use crate::error::{Error, Result};
use crate::transform::DesignMatrices;

const REGRESSION_RIDGE: f64 = 1e-8;
const ZERO_SIGNAL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSide {
    #[default]
    ControlOnly,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperSource {
    Estimated,
    UserSupplied,
}

/// How the coefficient vector is turned into the signal bound `C²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalNorm {
    /// `‖β‖²`
    #[default]
    SquaredNorm,
    /// `(Σβ)²`
    SquaredSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub icc: f64,
    pub noise_to_signal: f64,
    pub source: HyperSource,
}

impl HyperParams {
    pub fn manual(icc: f64, noise_to_signal: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&icc) {
            return Err(Error::Config(format!("icc must lie in [0, 1], got {icc}")));
        }
        if !(noise_to_signal >= 0.0 && noise_to_signal.is_finite()) {
            return Err(Error::Config(format!(
                "noise_to_signal must be finite and nonnegative, got {noise_to_signal}"
            )));
        }
        Ok(Self {
            icc,
            noise_to_signal,
            source: HyperSource::UserSupplied,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicOptions {
    pub side: FitSide,
    pub signal_norm: SignalNorm,
    /// Ratio used when the fitted coefficients are (numerically) zero.
    pub ratio_cap: f64,
    /// Fit on a random subset of this fraction of the clusters.
    pub holdout_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for HeuristicOptions {
    fn default() -> Self {
        Self {
            side: FitSide::ControlOnly,
            signal_norm: SignalNorm::SquaredNorm,
            ratio_cap: 1e6,
            holdout_fraction: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomInterceptFit {
    pub intercept: f64,
    /// Coefficients on the feature columns.
    pub beta: DVector<f64>,
    pub var_cluster: f64,
    pub var_unit: f64,
    pub clusters: usize,
    pub units: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub msb: f64,
    pub msw: f64,
    pub n_tilde: f64,
    pub var_cluster: f64,
    pub var_unit: f64,
}

/// ANOVA moment estimates from residuals grouped into clusters.
pub fn variance_components(groups: &[&[f64]]) -> Result<VarianceComponents> {
    let m = groups.len();
    if m < 2 {
        return Err(Error::TooFewClusters { needed: 2, have: m });
    }
    let n: usize = groups.iter().map(|g| g.len()).sum();
    if n <= m {
        return Err(Error::DegenerateResiduals(
            "every cluster has a single unit, so within-cluster variance is not identified".into(),
        ));
    }
    let nf = n as f64;
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / nf;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    let mut sum_sq_sizes = 0.0;
    for g in groups {
        let size = g.len() as f64;
        let mean = g.iter().sum::<f64>() / size;
        ssb += size * (mean - grand).powi(2);
        ssw += g.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
        sum_sq_sizes += size * size;
    }
    let msb = ssb / (m - 1) as f64;
    let msw = ssw / (n - m) as f64;
    let n_tilde = (nf - sum_sq_sizes / nf) / (m - 1) as f64;
    Ok(VarianceComponents {
        msb,
        msw,
        n_tilde,
        var_cluster: ((msb - msw) / n_tilde).max(0.0),
        var_unit: msw,
    })
}

/// Ridge-stabilized least squares of `y` on `[1, x]` (intercept unpenalized).
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let (n, d) = x.shape();
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let mut gram = design.tr_mul(&design);
    for j in 1..=d {
        gram[(j, j)] += REGRESSION_RIDGE;
    }
    let rhs = design.tr_mul(y);
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("random-intercept regression".into()))?
        .solve(&rhs);
    Ok((coef[0], coef.rows(1, d).into_owned()))
}

fn fit_on_clusters(
    ds: &CosDataset,
    features: &DesignMatrices,
    clusters: &[usize],
) -> Result<RandomInterceptFit> {
    if clusters.len() < 2 {
        return Err(Error::TooFewClusters {
            needed: 2,
            have: clusters.len(),
        });
    }
    let rows: Vec<usize> = clusters
        .iter()
        .flat_map(|&k| ds.cluster_ranges()[k].clone())
        .collect();
    let x = features.features.select_rows(&rows);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| ds.units()[i].y));
    let (intercept, beta) = least_squares(&x, &y)?;
    let resid = &y - &x * &beta - DVector::repeat(rows.len(), intercept);

    let lo = resid.min();
    let hi = resid.max();
    if lo == hi {
        return Err(Error::DegenerateResiduals(
            "all residuals are identical".into(),
        ));
    }
    let mut groups = Vec::with_capacity(clusters.len());
    let mut start = 0;
    for &k in clusters {
        let len = ds.cluster_ranges()[k].len();
        groups.push(&resid.as_slice()[start..start + len]);
        start += len;
    }
    let vc = variance_components(&groups)?;
    Ok(RandomInterceptFit {
        intercept,
        beta,
        var_cluster: vc.var_cluster,
        var_unit: vc.var_unit,
        clusters: clusters.len(),
        units: rows.len(),
    })
}

fn side_clusters(ds: &CosDataset, side: FitSide) -> Vec<usize> {
    match side {
        FitSide::ControlOnly => ds.control_clusters().collect(),
        FitSide::Pooled => (0..ds.m()).collect(),
    }
}

pub fn fit_random_intercept(
    ds: &CosDataset,
    features: &DesignMatrices,
    side: FitSide,
) -> Result<RandomInterceptFit> {
    fit_on_clusters(ds, features, &side_clusters(ds, side))
}

/// Turns fitted components into hyperparameters.
pub fn hyperparams_from_fit(
    fit: &RandomInterceptFit,
    signal_norm: SignalNorm,
    ratio_cap: f64,
) -> HyperParams {
    let total = fit.var_cluster + fit.var_unit;
    let icc = if total > 0.0 && total.is_finite() {
        (fit.var_cluster / total).clamp(0.0, 1.0)
    } else {
        log::warn!("residual variance is zero; icc is undefined and set to 0");
        0.0
    };
    let signal = match signal_norm {
        SignalNorm::SquaredNorm => fit.beta.norm_squared(),
        SignalNorm::SquaredSum => fit.beta.sum().powi(2),
    };
    let noise_to_signal = if signal < ZERO_SIGNAL {
        log::warn!("estimated coefficients are zero; noise_to_signal set to cap {ratio_cap}");
        ratio_cap
    } else {
        (total / signal).min(ratio_cap)
    };
    HyperParams {
        icc,
        noise_to_signal,
        source: HyperSource::Estimated,
    }
}

pub fn heuristic_hyperparams(
    ds: &CosDataset,
    features: &DesignMatrices,
    opts: &HeuristicOptions,
) -> Result<HyperParams> {
    let mut clusters = side_clusters(ds, opts.side);
    if let Some(frac) = opts.holdout_fraction {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in (0, 1], got {frac}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        clusters.shuffle(&mut rng);
        let keep = ((clusters.len() as f64 * frac).round() as usize).max(2);
        clusters.truncate(keep);
        clusters.sort_unstable();
    }
    let fit = fit_on_clusters(ds, features, &clusters)?;
    let hp = hyperparams_from_fit(&fit, opts.signal_norm, opts.ratio_cap);
    log::info!(
        "hyperparameters: icc {:.4}, noise_to_signal {:.4} ({} clusters, {} units)",
        hp.icc,
        hp.noise_to_signal,
        fit.clusters,
        fit.units
    );
    Ok(hp)
}
