//! Monte Carlo harness on a synthetic school-like population.
//!
//! Each cluster has a latent quality `q ~ N(0, 1)` that shifts its
//! students' reading and math scores and its staffing/attendance
//! covariates. Treatment follows `Z* = ê(w)/c + U(−½, ½)`, `Z = 1(Z* > ¼)`
//! with `ê` a logistic fit on four cluster covariates, so small `c` means
//! strong selection on school quality and poor overlap. Control outcomes
//! are `y₀ = β₀ + 2.5R + 2.5M + 1.9P + u_j + e_ij` with noise sd 12 split
//! between a cluster effect and unit noise.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancer::{fit_with_features, BalanceMode, BalanceSpec};
use crate::data::{ClusterRecord, CosDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::estimator::{
    att_estimate, confidence_interval, estimate_effect, var_sandwich, EstimateOptions,
    ResidualKind,
};
use crate::hyperparams::{heuristic_hyperparams, HeuristicOptions};
use crate::qp::SolverOptions;
use crate::transform::{build_features, FeatureSpec};

pub const UNIT_COVARIATES: [&str; 5] = ["read", "math", "minority", "hispanic", "female"];
pub const CLUSTER_COVARIATES: [&str; 9] = [
    "read_mean",
    "math_mean",
    "minority_prop",
    "female_prop",
    "proficiency",
    "frl",
    "ell",
    "novice",
    "attendance",
];

/// Share of score variance that lies between clusters.
const SCORE_BETWEEN: f64 = 0.2;
const SCORE_CORRELATION: f64 = 0.6;
const MIN_CLUSTER_SIZE: u64 = 5;
const ASSIGNMENT_ATTEMPTS: usize = 100;
const OUTCOME_READ: f64 = 2.5;
const OUTCOME_MATH: f64 = 2.5;
const OUTCOME_PROFICIENCY: f64 = 1.9;
/// Base population size used by the resampling mode.
pub const BASE_CLUSTERS: usize = 44;

/// Loadings of the propensity covariates on cluster quality:
/// `(intercept, quality, noise sd)` on the logit scale.
const FRL: (f64, f64, f64) = (0.0, -0.32, 0.6);
const ELL: (f64, f64, f64) = (-1.6, -0.21, 0.6);
const NOVICE: (f64, f64, f64) = (-1.7, -0.18, 0.5);
const ATTENDANCE: (f64, f64, f64) = (2.5, 0.18, 0.3);
/// Synthetic "true assignment" model on the logit scale, over
/// `(1, frl, ell, novice, attendance)`.
const TRUE_ASSIGNMENT: [f64; 5] = [-8.0, -3.0, -2.0, -2.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Fresh population every replication.
    #[default]
    Direct,
    /// Resample clusters with replacement from one fixed base population.
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEstimator {
    Naive,
    Balancing,
    SubsetWeights,
}

impl SimEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Balancing => "balancing",
            Self::SubsetWeights => "subset_weights",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub overlap_c: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub n_clusters: usize,
    pub mean_cluster_size: usize,
    pub tau_sd_multiplier: f64,
    pub noise_sd: f64,
    /// Share of the noise variance that is a cluster effect.
    pub noise_cluster_share: f64,
    pub intercept: f64,
    pub estimators: Vec<SimEstimator>,
    pub mode: SimMode,
    pub alpha: f64,
    /// Include the treated clusters' residual term in the ATT variances.
    pub include_treated_variance: bool,
    /// Residuals used by the plug-in variances.
    pub residuals: ResidualKind,
    pub solver: SolverOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            overlap_c: 10.0,
            n_reps: 200,
            seed: 20_240_601,
            n_clusters: BASE_CLUSTERS,
            mean_cluster_size: 78,
            tau_sd_multiplier: 0.3,
            noise_sd: 12.0,
            noise_cluster_share: 0.40,
            intercept: 50.0,
            estimators: vec![
                SimEstimator::Naive,
                SimEstimator::Balancing,
                SimEstimator::SubsetWeights,
            ],
            mode: SimMode::Direct,
            alpha: 0.05,
            include_treated_variance: true,
            residuals: ResidualKind::LeaveClusterOut,
            solver: SolverOptions::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps == 0 {
            return Err(Error::Config("n_reps must be at least 1".into()));
        }
        if !(self.overlap_c > 0.0 && self.overlap_c.is_finite()) {
            return Err(Error::Config(format!("overlap_c must be positive, got {}", self.overlap_c)));
        }
        if self.n_clusters < 4 || self.mean_cluster_size == 0 {
            return Err(Error::Config("need at least 4 clusters with positive mean size".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_cluster_share) {
            return Err(Error::Config("noise_cluster_share must lie in [0, 1]".into()));
        }
        if self.noise_sd < 0.0 || self.tau_sd_multiplier < 0.0 {
            return Err(Error::Config("noise_sd and tau_sd_multiplier must be nonnegative".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCluster {
    pub id: String,
    pub quality: f64,
    pub w: [f64; 9],
    /// Fitted base propensity `ê(w)`.
    pub propensity: f64,
    pub units: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimUnit {
    pub id: String,
    pub x: [f64; 5],
}

/// Covariates only; treatment and outcomes are drawn separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub clusters: Vec<SimCluster>,
    pub units: Vec<SimUnit>,
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Logistic regression by Newton–Raphson with a small ridge on the slopes.
fn logistic_fit(x: &DMatrix<f64>, t: &[f64]) -> DVector<f64> {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let r = t[i] - mu[i];
            let v = (mu[i] * (1.0 - mu[i])).max(1e-10);
            let row = x.row(i);
            grad += row.transpose() * r;
            hess += row.transpose() * row * v;
        }
        for j in 1..p {
            grad[j] -= 1e-3 * beta[j];
            hess[(j, j)] += 1e-3;
        }
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else {
            break;
        };
        beta += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    beta
}

fn fit_propensity(clusters: &mut [SimCluster], rng: &mut ChaCha8Rng) {
    let x = DMatrix::from_fn(clusters.len(), 5, |i, j| {
        if j == 0 {
            1.0
        } else {
            clusters[i].w[4 + j]
        }
    });
    let truth: Vec<f64> = (0..clusters.len())
        .map(|i| {
            let eta: f64 = (0..5).map(|j| TRUE_ASSIGNMENT[j] * x[(i, j)]).sum();
            if rng.random::<f64>() < logistic(eta) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let beta = logistic_fit(&x, &truth);
    for (i, c) in clusters.iter_mut().enumerate() {
        c.propensity = logistic((x.row(i) * &beta)[0]);
    }
}

/// Draws a population from `rng`.
pub fn draw_population(
    rng: &mut ChaCha8Rng,
    n_clusters: usize,
    mean_cluster_size: usize,
) -> Result<Population> {
    let poisson = Poisson::new(mean_cluster_size as f64)
        .map_err(|e| Error::Config(format!("cluster size distribution: {e}")))?;
    let a = SCORE_BETWEEN.sqrt();
    let within = (1.0 - SCORE_BETWEEN).sqrt();
    let rho_w = (SCORE_CORRELATION - SCORE_BETWEEN) / (1.0 - SCORE_BETWEEN);
    let rho_c = (1.0 - rho_w * rho_w).sqrt();
    let covariate = |rng: &mut ChaCha8Rng, (b0, bq, sd): (f64, f64, f64), q: f64| {
        logistic(b0 + bq * q + sd * normal(rng))
    };

    let mut clusters = Vec::with_capacity(n_clusters);
    let mut units = Vec::new();
    for k in 0..n_clusters {
        let q = normal(rng);
        let size = (poisson.sample(rng) as u64).max(MIN_CLUSTER_SIZE) as usize;
        let start = units.len();
        for j in 0..size {
            let z1 = normal(rng);
            let z2 = rho_w * z1 + rho_c * normal(rng);
            let read = a * q + within * z1;
            let math = a * q + within * z2;
            let minority = f64::from(rng.random::<f64>() < logistic(-0.3 - 0.8 * q));
            let hispanic = f64::from(rng.random::<f64>() < logistic(-1.2 - 0.5 * q));
            let female = f64::from(rng.random::<f64>() < 0.5);
            units.push(SimUnit {
                id: format!("s{k}_{j}"),
                x: [read, math, minority, hispanic, female],
            });
        }
        let members = &units[start..];
        let col = |j: usize| mean(members.iter().map(|u| u.x[j]));
        let proficiency =
            100.0 * mean(members.iter().map(|u| f64::from((u.x[0] + u.x[1]) / 2.0 > 0.0)));
        let w = [
            col(0),
            col(1),
            col(2),
            col(4),
            proficiency,
            covariate(rng, FRL, q),
            covariate(rng, ELL, q),
            covariate(rng, NOVICE, q),
            covariate(rng, ATTENDANCE, q),
        ];
        clusters.push(SimCluster {
            id: format!("school{k}"),
            quality: q,
            w,
            propensity: 0.0,
            units: start..units.len(),
        });
    }
    fit_propensity(&mut clusters, rng);
    Ok(Population { clusters, units })
}

/// Population for a given seed; the same seed always gives the same draw.
pub fn generate_base_population(
    seed: u64,
    n_clusters: usize,
    mean_cluster_size: usize,
) -> Result<Population> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_population(&mut rng, n_clusters, mean_cluster_size)
}

impl Population {
    /// `n_clusters` clusters drawn with replacement (ids made unique).
    pub fn resample(&self, n_clusters: usize, rng: &mut ChaCha8Rng) -> Population {
        let mut clusters = Vec::with_capacity(n_clusters);
        let mut units = Vec::new();
        for k in 0..n_clusters {
            let src = &self.clusters[rng.random_range(0..self.clusters.len())];
            let start = units.len();
            for (j, u) in self.units[src.units.clone()].iter().enumerate() {
                units.push(SimUnit {
                    id: format!("r{k}_{j}"),
                    x: u.x,
                });
            }
            clusters.push(SimCluster {
                id: format!("r{k}_{}", src.id),
                units: start..units.len(),
                ..src.clone()
            });
        }
        Population { clusters, units }
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn to_dataset(&self, treatment: &[bool], outcomes: &[f64]) -> Result<CosDataset> {
        let clusters = self
            .clusters
            .iter()
            .zip(treatment)
            .map(|(c, &t)| ClusterRecord::new(c.id.clone(), t, c.w.to_vec()))
            .collect();
        let mut units = Vec::with_capacity(self.n());
        for c in &self.clusters {
            for i in c.units.clone() {
                let u = &self.units[i];
                units.push(UnitRecord::new(u.id.clone(), c.id.clone(), u.x.to_vec(), outcomes[i]));
            }
        }
        CosDataset::new(
            UNIT_COVARIATES.iter().map(|s| s.to_string()).collect(),
            CLUSTER_COVARIATES.iter().map(|s| s.to_string()).collect(),
            clusters,
            units,
        )
    }
}

/// Cluster treatment indicators; resamples the uniform draws until both
/// arms are nonempty.
pub fn assign_treatment(pop: &Population, c: f64, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    for _ in 0..ASSIGNMENT_ATTEMPTS {
        let z: Vec<bool> = pop
            .clusters
            .iter()
            .map(|cl| cl.propensity / c + (rng.random::<f64>() - 0.5) > 0.25)
            .collect();
        if z.iter().any(|&t| t) && z.iter().any(|&t| !t) {
            return Ok(z);
        }
    }
    Err(Error::AllTreatedOrAllControl(ASSIGNMENT_ATTEMPTS))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub observed: Vec<f64>,
    pub tau: f64,
}

/// Observed outcomes and the true effect `τ = tau_mult · sd(noise-free y₀)`
/// over the control units.
pub fn generate_outcomes(
    pop: &Population,
    treatment: &[bool],
    rng: &mut ChaCha8Rng,
    cfg: &SimConfig,
) -> Outcomes {
    let mut signal = vec![0.0; pop.n()];
    for c in &pop.clusters {
        for i in c.units.clone() {
            let x = &pop.units[i].x;
            signal[i] = cfg.intercept
                + OUTCOME_READ * x[0]
                + OUTCOME_MATH * x[1]
                + OUTCOME_PROFICIENCY * c.w[4];
        }
    }
    let control: Vec<f64> = pop
        .clusters
        .iter()
        .zip(treatment)
        .filter(|(_, &t)| !t)
        .flat_map(|(c, _)| c.units.clone().map(|i| signal[i]))
        .collect();
    let m = mean(control.iter().copied());
    let sd = (control.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (control.len() as f64 - 1.0).max(1.0)).sqrt();
    let tau = cfg.tau_sd_multiplier * sd;

    let cluster_sd = cfg.noise_sd * cfg.noise_cluster_share.sqrt();
    let unit_sd = cfg.noise_sd * (1.0 - cfg.noise_cluster_share).sqrt();
    let mut observed = vec![0.0; pop.n()];
    for (c, &t) in pop.clusters.iter().zip(treatment) {
        let u = cluster_sd * normal(rng);
        for i in c.units.clone() {
            let y0 = signal[i] + u + unit_sd * normal(rng);
            observed[i] = if t { y0 + tau } else { y0 };
        }
    }
    Outcomes { observed, tau }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepEstimate {
    pub estimate: f64,
    pub se_plugin: f64,
    pub se_sandwich: f64,
    pub cover_plugin: bool,
    pub cover_sandwich: bool,
    pub ci_len_plugin: f64,
    pub ci_len_sandwich: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub tau: f64,
    pub sd_control: f64,
    pub icc: f64,
    pub n_treated_clusters: usize,
    pub n_control_clusters: usize,
    pub estimates: Vec<(SimEstimator, RepEstimate)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: SimEstimator,
    pub bias: f64,
    pub std_bias: f64,
    pub rmse: f64,
    pub std_rmse: f64,
    pub mean_se_plugin: f64,
    pub mean_se_sandwich: f64,
    pub ci_len_plugin: f64,
    pub ci_len_sandwich: f64,
    pub coverage_plugin: f64,
    pub coverage_sandwich: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub overlap_c: f64,
    pub n_clusters: usize,
    pub reps: Vec<RepRecord>,
    pub failures: Vec<(usize, String)>,
    pub summaries: Vec<EstimatorSummary>,
    pub icc_mean: f64,
    pub icc_sd: f64,
}

fn rep_rng(seed: u64, scenario: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((scenario << 32) | rep as u64);
    rng
}

fn interval_record(point: f64, tau: f64, var_p: f64, var_s: f64, alpha: f64) -> RepEstimate {
    let (lp, hp) = confidence_interval(point, var_p, alpha);
    let (ls, hs) = confidence_interval(point, var_s, alpha);
    RepEstimate {
        estimate: point,
        se_plugin: var_p.sqrt(),
        se_sandwich: var_s.sqrt(),
        cover_plugin: lp <= tau && tau <= hp,
        cover_sandwich: ls <= tau && tau <= hs,
        ci_len_plugin: hp - lp,
        ci_len_sandwich: hs - ls,
    }
}

fn run_replication(
    cfg: &SimConfig,
    base: Option<&Population>,
    scenario: u64,
    rep: usize,
) -> Result<RepRecord> {
    let mut rng = rep_rng(cfg.seed, scenario, rep);
    let pop = match base {
        Some(b) => b.resample(cfg.n_clusters, &mut rng),
        None => draw_population(&mut rng, cfg.n_clusters, cfg.mean_cluster_size)?,
    };
    let z = assign_treatment(&pop, cfg.overlap_c, &mut rng)?;
    let out = generate_outcomes(&pop, &z, &mut rng, cfg);
    let ds = pop.to_dataset(&z, &out.observed)?;
    let features = build_features(&ds, &FeatureSpec::default())?;
    let hyper = heuristic_hyperparams(&ds, &features, &HeuristicOptions::default())?;

    let ctrl_y: Vec<f64> = ds.control_units().iter().map(|&i| ds.units()[i].y).collect();
    let cm = mean(ctrl_y.iter().copied());
    let sd_control =
        (ctrl_y.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / (ctrl_y.len() as f64 - 1.0)).sqrt();

    let opts = EstimateOptions {
        alpha: cfg.alpha,
        bias_correct: false,
        include_treated_variance: cfg.include_treated_variance,
        ridge_lambda: None,
        residuals: cfg.residuals,
    };
    let mut estimates = Vec::new();
    for &est in &cfg.estimators {
        let rec = match est {
            SimEstimator::Naive => {
                let mut w = vec![1.0; ds.n()];
                let ratio = ds.n1() as f64 / ds.n0() as f64;
                for i in ds.control_units() {
                    w[i] = ratio;
                }
                let v = var_sandwich(&ds, &w);
                interval_record(att_estimate(&ds, &w), out.tau, v, v, cfg.alpha)
            }
            SimEstimator::Balancing | SimEstimator::SubsetWeights => {
                let mode = if est == SimEstimator::Balancing {
                    BalanceMode::Unit
                } else {
                    BalanceMode::Subset
                };
                let mut spec = BalanceSpec::new(mode, hyper);
                spec.solver = cfg.solver;
                let sol = fit_with_features(&ds, &features, &spec)?;
                let e = estimate_effect(&ds, &features, &sol, &opts)?;
                interval_record(e.point, out.tau, e.var_plugin, e.var_sandwich, cfg.alpha)
            }
        };
        estimates.push((est, rec));
    }
    Ok(RepRecord {
        rep,
        tau: out.tau,
        sd_control,
        icc: hyper.icc,
        n_treated_clusters: ds.treated_clusters().count(),
        n_control_clusters: ds.control_clusters().count(),
        estimates,
    })
}

fn summarize(est: SimEstimator, reps: &[RepRecord]) -> EstimatorSummary {
    let rows: Vec<(&RepRecord, &RepEstimate)> = reps
        .iter()
        .filter_map(|r| r.estimates.iter().find(|(e, _)| *e == est).map(|(_, x)| (r, x)))
        .collect();
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&RepRecord, &RepEstimate) -> f64| rows.iter().map(|(r, x)| f(r, x)).sum::<f64>() / n;
    let bias = avg(&|r, x| x.estimate - r.tau);
    let mse = avg(&|r, x| (x.estimate - r.tau).powi(2));
    let sd = avg(&|r, _| r.sd_control);
    EstimatorSummary {
        estimator: est,
        bias,
        std_bias: bias / sd,
        rmse: mse.sqrt(),
        std_rmse: mse.sqrt() / sd,
        mean_se_plugin: avg(&|_, x| x.se_plugin),
        mean_se_sandwich: avg(&|_, x| x.se_sandwich),
        ci_len_plugin: avg(&|_, x| x.ci_len_plugin),
        ci_len_sandwich: avg(&|_, x| x.ci_len_sandwich),
        coverage_plugin: avg(&|_, x| f64::from(x.cover_plugin)),
        coverage_sandwich: avg(&|_, x| f64::from(x.cover_sandwich)),
    }
}

/// Runs one scenario. `scenario` indexes the RNG substreams so that
/// scenarios in a grid draw independent replications.
pub fn run_scenario(cfg: &SimConfig, scenario: u64) -> Result<SimResult> {
    cfg.validate()?;
    let base = match cfg.mode {
        SimMode::Direct => None,
        SimMode::Resample => Some(generate_base_population(
            cfg.seed,
            BASE_CLUSTERS,
            cfg.mean_cluster_size,
        )?),
    };
    let outcomes: Vec<Result<RepRecord>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| run_replication(cfg, base.as_ref(), scenario, rep))
        .collect();
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(rec) => reps.push(rec),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failures.push((rep, e.to_string()));
            }
        }
    }
    if reps.is_empty() {
        return Err(Error::Config("every replication failed".into()));
    }
    let mut ests = cfg.estimators.clone();
    ests.sort();
    ests.dedup();
    let summaries = ests.iter().map(|&e| summarize(e, &reps)).collect();
    let icc: Vec<f64> = reps.iter().map(|r| r.icc).collect();
    let icc_mean = mean(icc.iter().copied());
    let icc_sd = if icc.len() > 1 {
        (icc.iter().map(|v| (v - icc_mean).powi(2)).sum::<f64>() / (icc.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SimResult {
        overlap_c: cfg.overlap_c,
        n_clusters: cfg.n_clusters,
        reps,
        failures,
        summaries,
        icc_mean,
        icc_sd,
    })
}

pub fn run_study(cfg: &SimConfig) -> Result<SimResult> {
    run_scenario(cfg, 0)
}

/// Runs every `(c, n_clusters)` combination in order.
pub fn run_grid(cfg: &SimConfig, cs: &[f64], cluster_counts: &[usize]) -> Result<Vec<SimResult>> {
    let mut out = Vec::new();
    let mut scenario = 0;
    for &n_clusters in cluster_counts {
        for &c in cs {
            let sc = SimConfig {
                overlap_c: c,
                n_clusters,
                ..cfg.clone()
            };
            log::info!("scenario {scenario}: c = {c}, clusters = {n_clusters}");
            out.push(run_scenario(&sc, scenario)?);
            scenario += 1;
        }
    }
    Ok(out)
}

/// One row per (scenario, estimator, metric).
pub fn write_results_csv(results: &[SimResult], path: impl AsRef<Path>) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["scenario", "c", "n_clusters", "estimator", "metric", "value"])?;
    for (k, r) in results.iter().enumerate() {
        let mut row = |est: &str, metric: &str, value: f64| {
            out.write_record([
                k.to_string(),
                r.overlap_c.to_string(),
                r.n_clusters.to_string(),
                est.to_string(),
                metric.to_string(),
                value.to_string(),
            ])
        };
        row("all", "reps_ok", r.reps.len() as f64)?;
        row("all", "reps_failed", r.failures.len() as f64)?;
        row("all", "icc_mean", r.icc_mean)?;
        row("all", "icc_sd", r.icc_sd)?;
        for s in &r.summaries {
            let name = s.estimator.as_str();
            row(name, "bias", s.bias)?;
            row(name, "std_bias", s.std_bias)?;
            row(name, "rmse", s.rmse)?;
            row(name, "std_rmse", s.std_rmse)?;
            row(name, "mean_se_plugin", s.mean_se_plugin)?;
            row(name, "mean_se_sandwich", s.mean_se_sandwich)?;
            row(name, "ci_len_plugin", s.ci_len_plugin)?;
            row(name, "ci_len_sandwich", s.ci_len_sandwich)?;
            row(name, "coverage_plugin", s.coverage_plugin)?;
            row(name, "coverage_sandwich", s.coverage_sandwich)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One row per (scenario, replication, estimator).
pub fn write_replications_csv(results: &[SimResult], path: impl AsRef<Path>) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record([
        "scenario", "rep", "estimator", "tau", "estimate", "se_plugin", "se_sandwich",
        "cover_plugin", "cover_sandwich", "icc", "sd_control",
    ])?;
    for (k, r) in results.iter().enumerate() {
        for rec in &r.reps {
            for (est, x) in &rec.estimates {
                out.write_record([
                    k.to_string(),
                    rec.rep.to_string(),
                    est.as_str().to_string(),
                    rec.tau.to_string(),
                    x.estimate.to_string(),
                    x.se_plugin.to_string(),
                    x.se_sandwich.to_string(),
                    u8::from(x.cover_plugin).to_string(),
                    u8::from(x.cover_sandwich).to_string(),
                    rec.icc.to_string(),
                    rec.sd_control.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Aligned summary table.
pub fn summary_text(results: &[SimResult]) -> String {
    let mut t = crate::diagnostics::Table::new(&[
        "c", "clusters", "estimator", "std_bias", "std_rmse", "se_plugin", "se_sandwich",
        "cov_plugin", "cov_sandwich",
    ]);
    for r in results {
        for s in &r.summaries {
            t.push(vec![
                format!("{}", r.overlap_c),
                r.n_clusters.to_string(),
                s.estimator.as_str().to_string(),
                format!("{:.4}", s.std_bias),
                format!("{:.4}", s.std_rmse),
                format!("{:.4}", s.mean_se_plugin),
                format!("{:.4}", s.mean_se_sandwich),
                format!("{:.3}", s.coverage_plugin),
                format!("{:.3}", s.coverage_sandwich),
            ]);
        }
    }
    let mut s = t.to_text();
    for r in results {
        s.push_str(&format!(
            "c = {}, clusters = {}: icc {:.3} (sd {:.3}), {} replications, {} failed\n",
            r.overlap_c,
            r.n_clusters,
            r.icc_mean,
            r.icc_sd,
            r.reps.len(),
            r.failures.len()
        ));
    }
    s
}

/// Sample correlation of two columns.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a.iter().copied());
    let mb = mean(b.iter().copied());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_scale_and_determinism() {
        let a = generate_base_population(7, 44, 78).unwrap();
        let b = generate_base_population(7, 44, 78).unwrap();
        assert_eq!(a, b);
        let n = a.n() as f64;
        assert!((n - 44.0 * 78.0).abs() < 400.0, "n = {n}");
        assert!(a.clusters.iter().all(|c| c.units.len() >= 5));
    }

    #[test]
    fn score_correlation() {
        let p = generate_base_population(3, 60, 80).unwrap();
        let r: Vec<f64> = p.units.iter().map(|u| u.x[0]).collect();
        let m: Vec<f64> = p.units.iter().map(|u| u.x[1]).collect();
        assert!((correlation(&r, &m) - 0.6).abs() < 0.05);
    }

    #[test]
    fn proportions_in_unit_interval() {
        let p = generate_base_population(5, 30, 40).unwrap();
        for c in &p.clusters {
            for j in [2, 3, 5, 6, 7, 8] {
                assert!((0.0..=1.0).contains(&c.w[j]));
            }
            assert!((0.0..=100.0).contains(&c.w[4]));
            assert!(c.propensity > 0.0 && c.propensity < 1.0);
        }
    }

    #[test]
    fn assignment_limits() {
        let p = generate_base_population(11, 400, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = assign_treatment(&p, 1e9, &mut rng).unwrap();
        let share = z.iter().filter(|&&t| t).count() as f64 / z.len() as f64;
        assert!((share - 0.25).abs() < 0.06, "{share}");
        let z = assign_treatment(&p, 0.1, &mut rng).unwrap();
        for (c, &t) in p.clusters.iter().zip(&z) {
            if c.propensity > 0.075 {
                assert!(t);
            }
        }
    }

    #[test]
    fn zero_effect_and_zero_noise() {
        let p = generate_base_population(2, 20, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = assign_treatment(&p, 2.0, &mut rng).unwrap();
        let cfg = SimConfig {
            tau_sd_multiplier: 0.0,
            noise_sd: 0.0,
            ..SimConfig::default()
        };
        let out = generate_outcomes(&p, &z, &mut rng, &cfg);
        assert_eq!(out.tau, 0.0);
        let c = &p.clusters[0];
        let i = c.units.start;
        let x = &p.units[i].x;
        let expect = 50.0 + 2.5 * x[0] + 2.5 * x[1] + 1.9 * c.w[4];
        assert!((out.observed[i] - expect).abs() < 1e-12);
    }

    #[test]
    fn study_is_deterministic() {
        let cfg = SimConfig {
            n_reps: 3,
            n_clusters: 12,
            mean_cluster_size: 15,
            ..SimConfig::default()
        };
        let a = run_study(&cfg).unwrap();
        let b = run_study(&cfg).unwrap();
        assert_eq!(a, b);
        for s in &a.summaries {
            assert!(s.rmse >= s.bias.abs());
            assert!((0.0..=1.0).contains(&s.coverage_plugin));
        }
    }

    #[test]
    fn resample_mode_runs() {
        let cfg = SimConfig {
            n_reps: 2,
            n_clusters: 20,
            mean_cluster_size: 20,
            mode: SimMode::Resample,
            ..SimConfig::default()
        };
        let r = run_study(&cfg).unwrap();
        assert_eq!(r.reps.len() + r.failures.len(), 2);
    }
}
