//! Effect estimates, bias correction, plug-in and sandwich variances,
//! normal confidence intervals and the design effect.
//!
//! Unit weights are full-length vectors in dataset order; cluster weights
//! are indexed by dataset cluster position.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::balancer::{BalanceMode, WeightSolution};
use crate::data::CosDataset;
use crate::error::{Error, Result};
use crate::hyperparams::HyperParams;
use crate::transform::DesignMatrices;

const DEFAULT_RIDGE_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    AttUnit,
    AttCluster,
    AtoSubset,
}

impl Estimand {
    pub fn for_mode(mode: BalanceMode) -> Self {
        match mode {
            BalanceMode::Unit => Self::AttUnit,
            BalanceMode::ClusterOnly => Self::AttCluster,
            BalanceMode::Subset => Self::AtoSubset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Controls,
    Treated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeModel {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub ridge_lambda: f64,
    pub fitted_on: Side,
}

impl OutcomeModel {
    pub fn predict(&self, psi: &[f64]) -> f64 {
        self.intercept + psi.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Predictions for every unit in dataset order.
    pub fn predict_all(&self, features: &DMatrix<f64>) -> Vec<f64> {
        let b = DVector::from_column_slice(&self.beta);
        (features * b).iter().map(|v| v + self.intercept).collect()
    }

    /// `Y − m̂` for every unit in dataset order.
    pub fn residuals(&self, ds: &CosDataset, features: &DMatrix<f64>) -> Vec<f64> {
        ds.units()
            .iter()
            .zip(self.predict_all(features))
            .map(|(u, m)| u.y - m)
            .collect()
    }
}

fn side_units(ds: &CosDataset, side: Side) -> Vec<usize> {
    match side {
        Side::Controls => ds.control_units(),
        Side::Treated => ds.treated_units(),
    }
}

fn side_clusters(ds: &CosDataset, side: Side) -> Vec<usize> {
    match side {
        Side::Controls => ds.control_clusters().collect(),
        Side::Treated => ds.treated_clusters().collect(),
    }
}

/// `(1/n1) Σ_ctrl γᵢ Yᵢ`
pub fn weighted_mu0(ds: &CosDataset, weights: &[f64]) -> f64 {
    let s: f64 = ds
        .control_units()
        .into_iter()
        .map(|i| weights[i] * ds.units()[i].y)
        .sum();
    s / ds.n1() as f64
}

fn treated_mean(ds: &CosDataset) -> f64 {
    let t = ds.treated_units();
    t.iter().map(|&i| ds.units()[i].y).sum::<f64>() / t.len() as f64
}

pub fn att_estimate(ds: &CosDataset, weights: &[f64]) -> f64 {
    treated_mean(ds) - weighted_mu0(ds, weights)
}

/// `(1/n1) Σ_trt γᵢ Yᵢ − (1/n0) Σ_ctrl γᵢ Yᵢ`
pub fn ato_estimate(ds: &CosDataset, weights: &[f64]) -> f64 {
    let sum = |idx: Vec<usize>| -> f64 { idx.into_iter().map(|i| weights[i] * ds.units()[i].y).sum() };
    sum(ds.treated_units()) / ds.n1() as f64 - sum(ds.control_units()) / ds.n0() as f64
}

/// Default ridge penalty `1e-3 · trace(ΨᵀΨ) / d` over the fitting rows.
pub fn default_ridge(psi: &DMatrix<f64>) -> f64 {
    let d = psi.ncols();
    if d == 0 {
        return 0.0;
    }
    DEFAULT_RIDGE_FACTOR * psi.norm_squared() / d as f64
}

/// Weighted ridge regression of `Y` on the features over one arm,
/// intercept unpenalized. `weights` default to 1; `ridge_lambda` defaults
/// to [`default_ridge`].
pub fn fit_outcome_model(
    ds: &CosDataset,
    features: &DesignMatrices,
    side: Side,
    weights: Option<&[f64]>,
    ridge_lambda: Option<f64>,
) -> Result<OutcomeModel> {
    let sys = NormalEquations::build(ds, features, side, weights)?;
    let psi = features.features.select_rows(&sys.rows);
    let d = psi.ncols();
    let mut lambda = ridge_lambda.unwrap_or_else(|| default_ridge(&psi));
    if lambda < 0.0 {
        return Err(Error::Config(format!("ridge_lambda must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 && d >= sys.rows.len() {
        lambda = default_ridge(&psi).max(1e-8);
        log::warn!("more features than fitting units; ridge_lambda raised to {lambda:.3e}");
    }
    for attempt in 0..8 {
        if let Some(coef) = solve_ridge(&sys.gram, &sys.rhs, lambda) {
            return Ok(OutcomeModel {
                intercept: coef[0],
                beta: coef.iter().skip(1).copied().collect(),
                ridge_lambda: lambda,
                fitted_on: side,
            });
        }
        let next = if lambda > 0.0 { lambda * 10.0 } else { default_ridge(&psi).max(1e-8) };
        log::warn!("outcome model system is singular (attempt {attempt}); ridge_lambda raised to {next:.3e}");
        lambda = next;
    }
    Err(Error::SingularSystem("outcome model normal equations".into()))
}

/// Weighted normal equations `[1 Ψ]ᵀ W [1 Ψ]`, `[1 Ψ]ᵀ W Y` over one arm.
struct NormalEquations {
    rows: Vec<usize>,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl NormalEquations {
    fn build(
        ds: &CosDataset,
        features: &DesignMatrices,
        side: Side,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let rows = side_units(ds, side);
        let w: Vec<f64> = rows.iter().map(|&i| weights.map_or(1.0, |w| w[i])).collect();
        if w.iter().filter(|&&x| x > 0.0).count() < 2 {
            return Err(Error::SingularSystem(
                "outcome model needs at least two units with positive weight".into(),
            ));
        }
        if w.iter().any(|&x| x < 0.0) {
            log::warn!("negative weights in the outcome model fit");
        }
        let (x, xw, y) = design(ds, features, &rows, &w);
        Ok(Self {
            gram: xw.tr_mul(&x),
            rhs: xw.tr_mul(&y),
            rows,
        })
    }
}

fn design(
    ds: &CosDataset,
    features: &DesignMatrices,
    rows: &[usize],
    w: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let psi = &features.features;
    let d = psi.ncols();
    let x = DMatrix::from_fn(rows.len(), d + 1, |r, j| if j == 0 { 1.0 } else { psi[(rows[r], j - 1)] });
    let mut xw = x.clone();
    for (r, &wi) in w.iter().enumerate() {
        xw.row_mut(r).scale_mut(wi);
    }
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| ds.units()[i].y));
    (x, xw, y)
}

fn solve_ridge(gram: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = gram.clone();
    for j in 1..a.nrows() {
        a[(j, j)] += lambda;
    }
    let coef = a.cholesky()?.solve(rhs);
    coef.iter().all(|c| c.is_finite()).then_some(coef)
}

/// Residuals of one arm where each cluster's units are predicted by the
/// model refitted without that cluster (same weights and ridge). Entries
/// outside the arm are zero. A cluster whose removal leaves a singular
/// system keeps its full-model residuals.
pub fn leave_cluster_out_residuals(
    ds: &CosDataset,
    features: &DesignMatrices,
    side: Side,
    weights: Option<&[f64]>,
    model: &OutcomeModel,
) -> Result<Vec<f64>> {
    let sys = NormalEquations::build(ds, features, side, weights)?;
    let full = model.residuals(ds, &features.features);
    let mut out = vec![0.0; ds.n()];
    for k in side_clusters(ds, side) {
        let rows: Vec<usize> = ds.cluster_ranges()[k].clone().collect();
        let w: Vec<f64> = rows.iter().map(|&i| weights.map_or(1.0, |w| w[i])).collect();
        let (x, xw, y) = design(ds, features, &rows, &w);
        let coef = solve_ridge(&(&sys.gram - xw.tr_mul(&x)), &(&sys.rhs - xw.tr_mul(&y)), model.ridge_lambda);
        match coef {
            Some(c) => {
                let pred = &x * c;
                for (r, &i) in rows.iter().enumerate() {
                    out[i] = y[r] - pred[r];
                }
            }
            None => {
                for &i in &rows {
                    out[i] = full[i];
                }
            }
        }
    }
    Ok(out)
}

fn plugin_residuals(
    ds: &CosDataset,
    features: &DesignMatrices,
    side: Side,
    weights: Option<&[f64]>,
    model: &OutcomeModel,
    kind: ResidualKind,
) -> Result<Vec<f64>> {
    match kind {
        ResidualKind::Fitted => Ok(model.residuals(ds, &features.features)),
        ResidualKind::LeaveClusterOut => {
            leave_cluster_out_residuals(ds, features, side, weights, model)
        }
    }
}

/// `μ̂₀ + (1/n1) Σ_trt m̂ − (1/n1) Σ_ctrl γᵢ m̂`
pub fn bias_corrected_mu0(
    ds: &CosDataset,
    features: &DesignMatrices,
    weights: &[f64],
    model: &OutcomeModel,
) -> f64 {
    let pred = model.predict_all(&features.features);
    let n1 = ds.n1() as f64;
    let treated: f64 = ds.treated_units().into_iter().map(|i| pred[i]).sum();
    let control: f64 = ds
        .control_units()
        .into_iter()
        .map(|i| weights[i] * pred[i])
        .sum();
    weighted_mu0(ds, weights) + treated / n1 - control / n1
}

/// `(1/denom²) Σ_{ℓ∈clusters} (Σ_{i∈ℓ} wᵢ eᵢ)²`
pub fn cluster_sum_variance(
    ds: &CosDataset,
    clusters: &[usize],
    weights: &[f64],
    resid: &[f64],
    denom: f64,
) -> f64 {
    let total: f64 = clusters
        .iter()
        .map(|&k| {
            let s: f64 = ds.cluster_ranges()[k]
                .clone()
                .map(|i| weights[i] * resid[i])
                .sum();
            s * s
        })
        .sum();
    total / (denom * denom)
}

fn warn_single_cluster(ds: &CosDataset) {
    if ds.control_clusters().count() == 1 {
        log::warn!("only one control cluster: the variance estimate is unstable");
    }
}

/// `(1/n1²) Σ_ctrl clusters (Σ γᵢ ε̂ᵢ)²` with `ε̂ = Y − m̂`.
pub fn var_plugin_unit(
    ds: &CosDataset,
    features: &DesignMatrices,
    weights: &[f64],
    model: &OutcomeModel,
) -> f64 {
    warn_single_cluster(ds);
    let resid = model.residuals(ds, &features.features);
    let controls: Vec<usize> = ds.control_clusters().collect();
    cluster_sum_variance(ds, &controls, weights, &resid, ds.n1() as f64)
}

/// γ-weighted mean of `Y` over one arm.
fn weighted_side_mean(ds: &CosDataset, weights: &[f64], side: Side) -> f64 {
    let (num, den) = side_units(ds, side)
        .into_iter()
        .fold((0.0, 0.0), |(a, b), i| (a + weights[i] * ds.units()[i].y, b + weights[i]));
    num / den
}

/// Cluster-robust variance of the weighted control mean: the plug-in
/// variance with the intercept-only model `m̂ ≡ weighted control mean`.
pub fn var_sandwich(ds: &CosDataset, weights: &[f64]) -> f64 {
    warn_single_cluster(ds);
    let mean = weighted_side_mean(ds, weights, Side::Controls);
    let resid: Vec<f64> = ds.units().iter().map(|u| u.y - mean).collect();
    let controls: Vec<usize> = ds.control_clusters().collect();
    cluster_sum_variance(ds, &controls, weights, &resid, ds.n1() as f64)
}

/// `(1/n1²) Σ_ctrl γ̄_ℓ² (Σ_{i∈ℓ} êᵢ)²`
pub fn var_plugin_cluster(
    ds: &CosDataset,
    features: &DesignMatrices,
    cluster_weights: &[f64],
    model: &OutcomeModel,
) -> f64 {
    warn_single_cluster(ds);
    cluster_weight_variance(ds, cluster_weights, &model.residuals(ds, &features.features))
}

fn cluster_weight_variance(ds: &CosDataset, cluster_weights: &[f64], resid: &[f64]) -> f64 {
    let total: f64 = ds
        .control_clusters()
        .map(|k| {
            let s: f64 = resid[ds.cluster_ranges()[k].clone()].iter().sum();
            cluster_weights[k].powi(2) * s * s
        })
        .sum();
    total / (ds.n1() as f64).powi(2)
}

/// Ratio of the unit-weight and cluster-weight variance mixtures over the
/// control clusters.
pub fn design_effect(
    ds: &CosDataset,
    unit_weights: &[f64],
    cluster_weights: &[f64],
    rho: f64,
) -> Result<f64> {
    let mut num = (0.0, 0.0);
    let mut den = (0.0, 0.0);
    for k in ds.control_clusters() {
        let r = ds.cluster_ranges()[k].clone();
        let g = &unit_weights[r.clone()];
        num.0 += g.iter().map(|x| x * x).sum::<f64>();
        num.1 += g.iter().sum::<f64>().powi(2);
        let nl = r.len() as f64;
        let gb = cluster_weights[k];
        den.0 += nl * gb * gb;
        den.1 += (nl * gb).powi(2);
    }
    let numerator = (1.0 - rho) * num.0 + rho * num.1;
    let denominator = (1.0 - rho) * den.0 + rho * den.1;
    if denominator == 0.0 {
        return Err(Error::DivisionByZero("design effect denominator".into()));
    }
    Ok(numerator / denominator)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `point ± z_{1−α/2} √var`
pub fn confidence_interval(point: f64, var: f64, alpha: f64) -> (f64, f64) {
    let half = normal_quantile(1.0 - alpha / 2.0) * var.max(0.0).sqrt();
    (point - half, point + half)
}

/// Residuals entering the plug-in variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// `Y − m̂(X)` from the model fitted on the whole arm.
    #[default]
    Fitted,
    /// Each cluster's residuals come from the model refitted without it.
    LeaveClusterOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateOptions {
    pub alpha: f64,
    pub bias_correct: bool,
    /// Add the treated clusters' residual term to the ATT variances.
    pub include_treated_variance: bool,
    pub ridge_lambda: Option<f64>,
    pub residuals: ResidualKind,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            bias_correct: true,
            include_treated_variance: false,
            ridge_lambda: None,
            residuals: ResidualKind::Fitted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub point: f64,
    pub point_bias_corrected: Option<f64>,
    pub var_plugin: f64,
    pub var_sandwich: f64,
    pub se_plugin: f64,
    pub se_sandwich: f64,
    pub ci_plugin: (f64, f64),
    pub ci_sandwich: (f64, f64),
    pub alpha: f64,
    pub includes_treated_variance: bool,
    /// Euclidean norm of the achieved feature imbalance.
    pub imbalance_norm: f64,
    pub ess_control: f64,
    pub ess_treated: Option<f64>,
    pub hyper: HyperParams,
}

/// Plug-in variance term of one arm with a side-specific model fitted
/// using the weights.
fn side_terms(
    ds: &CosDataset,
    features: &DesignMatrices,
    weights: &[f64],
    side: Side,
    denom: f64,
    opts: &EstimateOptions,
) -> Result<(f64, f64)> {
    let clusters = side_clusters(ds, side);
    let model = fit_outcome_model(ds, features, side, Some(weights), opts.ridge_lambda)?;
    let resid = plugin_residuals(ds, features, side, Some(weights), &model, opts.residuals)?;
    let plugin = cluster_sum_variance(ds, &clusters, weights, &resid, denom);
    let mean = weighted_side_mean(ds, weights, side);
    let centered: Vec<f64> = ds.units().iter().map(|u| u.y - mean).collect();
    let sandwich = cluster_sum_variance(ds, &clusters, weights, &centered, denom);
    Ok((plugin, sandwich))
}

pub fn estimate_effect(
    ds: &CosDataset,
    features: &DesignMatrices,
    solution: &WeightSolution,
    opts: &EstimateOptions,
) -> Result<EffectEstimate> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    let estimand = Estimand::for_mode(solution.mode);
    let w = solution.unit_weights(ds.n());
    let n1 = ds.n1() as f64;
    let n0 = ds.n0() as f64;
    warn_single_cluster(ds);

    let (point, corrected, mut var_plugin, mut var_sand, imbalance_norm) = match estimand {
        Estimand::AttUnit | Estimand::AttCluster => {
            let model = fit_outcome_model(ds, features, Side::Controls, Some(&w), opts.ridge_lambda)?;
            let mu0 = weighted_mu0(ds, &w);
            let point = treated_mean(ds) - mu0;
            let corrected = opts
                .bias_correct
                .then(|| treated_mean(ds) - bias_corrected_mu0(ds, features, &w, &model));
            let resid = plugin_residuals(ds, features, Side::Controls, Some(&w), &model, opts.residuals)?;
            let vp = if estimand == Estimand::AttCluster {
                cluster_weight_variance(ds, &solution.cluster_weights, &resid)
            } else {
                let controls: Vec<usize> = ds.control_clusters().collect();
                cluster_sum_variance(ds, &controls, &w, &resid, n1)
            };
            let cw = solution.control_weights(ds);
            let imb = features.imbalance(&cw)?.norm();
            (point, corrected, vp, var_sandwich(ds, &w), imb)
        }
        Estimand::AtoSubset => {
            let (pt, st) = side_terms(ds, features, &w, Side::Treated, n1, opts)?;
            let (pc, sc) = side_terms(ds, features, &w, Side::Controls, n0, opts)?;
            let wt: Vec<f64> = ds.treated_units().into_iter().map(|i| w[i]).collect();
            let wc = solution.control_weights(ds);
            let gap = features.b1.tr_mul(&DVector::from_vec(wt)) / n1
                - features.b0.tr_mul(&DVector::from_vec(wc)) / n0;
            (ato_estimate(ds, &w), None, pt + pc, st + sc, gap.norm())
        }
    };

    let with_treated = opts.include_treated_variance && estimand != Estimand::AtoSubset;
    if with_treated {
        let ones = vec![1.0; ds.n()];
        let (pt, st) = side_terms(ds, features, &ones, Side::Treated, n1, opts)?;
        var_plugin += pt;
        var_sand += st;
    }

    Ok(EffectEstimate {
        estimand,
        point,
        point_bias_corrected: corrected,
        var_plugin,
        var_sandwich: var_sand,
        se_plugin: var_plugin.sqrt(),
        se_sandwich: var_sand.sqrt(),
        ci_plugin: confidence_interval(point, var_plugin, opts.alpha),
        ci_sandwich: confidence_interval(point, var_sand, opts.alpha),
        alpha: opts.alpha,
        includes_treated_variance: with_treated,
        imbalance_norm,
        ess_control: solution.ess_control,
        ess_treated: solution.ess_treated,
        hyper: solution.hyper,
    })
}
