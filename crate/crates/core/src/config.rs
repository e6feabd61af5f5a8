//! The single TOML run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balancer::{BalanceMode, Bounds};
use crate::error::{Error, Result};
use crate::estimator::{EstimateOptions, ResidualKind};
use crate::hyperparams::{FitSide, HeuristicOptions, HyperParams, SignalNorm};
use crate::ingest::SchemaConfig;
use crate::qp::SolverOptions;
use crate::simulator::{SimConfig, SimEstimator, SimMode};
use crate::transform::FeatureSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSection {
    pub mode: BalanceMode,
    pub lower: f64,
    pub upper: f64,
}

impl Default for BalanceSection {
    fn default() -> Self {
        let b = Bounds::default();
        Self {
            mode: BalanceMode::Unit,
            lower: b.lower,
            upper: b.upper,
        }
    }
}

impl BalanceSection {
    pub fn bounds(&self) -> Bounds {
        Bounds {
            lower: self.lower,
            upper: self.upper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMode {
    #[default]
    Heuristic,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperSection {
    pub mode: HyperMode,
    pub icc: Option<f64>,
    pub noise_to_signal: Option<f64>,
    pub fit_side: FitSide,
    pub signal_norm: SignalNorm,
    pub ratio_cap: f64,
    pub holdout_fraction: Option<f64>,
}

impl Default for HyperSection {
    fn default() -> Self {
        let h = HeuristicOptions::default();
        Self {
            mode: HyperMode::Heuristic,
            icc: None,
            noise_to_signal: None,
            fit_side: h.side,
            signal_norm: h.signal_norm,
            ratio_cap: h.ratio_cap,
            holdout_fraction: h.holdout_fraction,
        }
    }
}

impl HyperSection {
    pub fn heuristic_options(&self, seed: u64) -> HeuristicOptions {
        HeuristicOptions {
            side: self.fit_side,
            signal_norm: self.signal_norm,
            ratio_cap: self.ratio_cap,
            holdout_fraction: self.holdout_fraction,
            seed,
        }
    }

    /// Both values when the section fixes them, `None` for the heuristic.
    pub fn manual(&self) -> Result<Option<HyperParams>> {
        match (self.mode, self.icc, self.noise_to_signal) {
            (HyperMode::Manual, Some(icc), Some(r)) => HyperParams::manual(icc, r).map(Some),
            (HyperMode::Manual, _, _) => Err(Error::Config(
                "hyperparams.mode = \"manual\" needs both icc and noise_to_signal".into(),
            )),
            (HyperMode::Heuristic, _, _) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub large_weight_threshold: f64,
    /// Decimal places in the plain-text tables.
    pub digits: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("cosbal-out"),
            large_weight_threshold: crate::diagnostics::DEFAULT_LARGE_WEIGHT,
            digits: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Overlap values `c`, one scenario each.
    pub c: Vec<f64>,
    /// Cluster counts, crossed with `c`.
    pub clusters: Vec<usize>,
    pub reps: usize,
    pub mean_cluster_size: usize,
    pub tau_sd_multiplier: f64,
    pub noise_sd: f64,
    pub noise_cluster_share: f64,
    pub intercept: f64,
    pub estimators: Vec<SimEstimator>,
    pub mode: SimMode,
    pub include_treated_variance: bool,
    pub residuals: ResidualKind,
    pub write_replications: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            c: vec![1.0, 2.5, 7.5, 10.0],
            clusters: vec![s.n_clusters],
            reps: s.n_reps,
            mean_cluster_size: s.mean_cluster_size,
            tau_sd_multiplier: s.tau_sd_multiplier,
            noise_sd: s.noise_sd,
            noise_cluster_share: s.noise_cluster_share,
            intercept: s.intercept,
            estimators: s.estimators,
            mode: s.mode,
            include_treated_variance: s.include_treated_variance,
            residuals: s.residuals,
            write_replications: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schema: Option<SchemaConfig>,
    pub features: FeatureSpec,
    pub balance: BalanceSection,
    pub hyperparams: HyperSection,
    pub solver: SolverOptions,
    pub estimate: EstimateOptions,
    pub output: OutputSection,
    pub simulate: SimulateSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(schema) = cfg.schema.as_mut() {
            schema.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        }
        Ok(cfg)
    }

    pub fn schema(&self) -> Result<&SchemaConfig> {
        self.schema
            .as_ref()
            .ok_or_else(|| Error::Config("the config has no [schema] section".into()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulate;
        SimConfig {
            overlap_c: s.c.first().copied().unwrap_or(10.0),
            n_reps: s.reps,
            seed: self.seed,
            n_clusters: s.clusters.first().copied().unwrap_or(crate::simulator::BASE_CLUSTERS),
            mean_cluster_size: s.mean_cluster_size,
            tau_sd_multiplier: s.tau_sd_multiplier,
            noise_sd: s.noise_sd,
            noise_cluster_share: s.noise_cluster_share,
            intercept: s.intercept,
            estimators: s.estimators.clone(),
            mode: s.mode,
            alpha: self.estimate.alpha,
            include_treated_variance: s.include_treated_variance,
            residuals: s.residuals,
            solver: self.solver,
        }
    }
}

/// `(key, meaning)` for every config key, in file order.
const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "Seed for the holdout split and the simulator."),
    ("schema.unit_file", "CSV with one row per unit (required for weights/estimate/balance)."),
    ("schema.cluster_file", "Optional CSV with one row per cluster."),
    ("schema.id_columns.unit", "Unit id column."),
    ("schema.id_columns.cluster", "Cluster id column."),
    ("schema.treatment_column", "0/1 treatment column, constant within clusters."),
    ("schema.outcome_column", "Outcome column in the unit file."),
    ("schema.unit_covariates", "Unit-level covariate columns."),
    ("schema.cluster_covariates", "Cluster-level covariate columns of the cluster file."),
    ("schema.aggregate_unit_covariates", "List of {column, aggregator = mean|proportion, name} cluster aggregates."),
    ("schema.categorical", "Covariates to one-hot expand (first sorted level is the reference)."),
    ("features.include_unit", "Use unit covariates as features. Must be false for cluster_only."),
    ("features.standardize", "Center and scale features on the treated arm."),
    ("features.interactions", "List of [cluster covariate, unit covariate] product terms."),
    ("features.polynomial_degree", "Per-feature polynomial degree (1 = linear)."),
    ("balance.mode", "unit | cluster_only | subset."),
    ("balance.lower", "Lower bound on every unit weight."),
    ("balance.upper", "Upper bound on every unit weight (inf = none)."),
    ("hyperparams.mode", "heuristic (random-intercept fit) | manual."),
    ("hyperparams.icc", "Manual intraclass correlation in [0, 1]."),
    ("hyperparams.noise_to_signal", "Manual noise-to-signal ratio, nonnegative."),
    ("hyperparams.fit_side", "Units used by the heuristic fit: control_only | pooled."),
    ("hyperparams.signal_norm", "Signal measure: squared_norm (sum of squared coefficients) | squared_sum."),
    ("hyperparams.ratio_cap", "Upper limit on the estimated noise-to-signal ratio."),
    ("hyperparams.holdout_fraction", "Fit the heuristic on this share of clusters (sample splitting)."),
    ("solver.max_iter", "Iteration cap of the QP solver."),
    ("solver.tol", "KKT residual tolerance of the QP solver."),
    ("estimate.alpha", "CI level is 1 - alpha."),
    ("estimate.bias_correct", "Report the outcome-model bias-corrected estimate."),
    ("estimate.include_treated_variance", "Add the treated-arm residual term to ATT variances."),
    ("estimate.ridge_lambda", "Ridge penalty of the outcome model (default 1e-3 * trace(Psi'Psi) / d)."),
    ("estimate.residuals", "Plug-in variance residuals: fitted | leave_cluster_out."),
    ("output.dir", "Directory for all outputs (relative to the working directory)."),
    ("output.large_weight_threshold", "Weights above this count as large in the summary."),
    ("output.digits", "Decimal places in plain-text tables."),
    ("simulate.c", "Overlap values; smaller c means stronger selection."),
    ("simulate.clusters", "Cluster counts, crossed with simulate.c."),
    ("simulate.reps", "Replications per scenario."),
    ("simulate.mean_cluster_size", "Mean of the Poisson cluster sizes (minimum 5)."),
    ("simulate.tau_sd_multiplier", "True effect in sd units of the noise-free control outcome."),
    ("simulate.noise_sd", "Total outcome noise sd."),
    ("simulate.noise_cluster_share", "Share of the noise variance that is a cluster effect."),
    ("simulate.intercept", "Outcome intercept."),
    ("simulate.estimators", "Any of naive, balancing, subset_weights."),
    ("simulate.mode", "direct (fresh population per replication) | resample (clusters drawn from one base population)."),
    ("simulate.include_treated_variance", "Treated-arm residual term in the simulated ATT variances."),
    ("simulate.residuals", "Plug-in variance residuals in the simulation."),
    ("simulate.write_replications", "Also write replications.csv."),
];

fn lookup<'a>(v: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(v, |v, k| v.get(k))
}

fn render(v: Option<&toml::Value>) -> String {
    match v {
        Some(toml::Value::Float(f)) if f.is_infinite() => "inf".into(),
        Some(v) => v.to_string(),
        None => "(unset)".into(),
    }
}

/// Reference page listing every key with its default.
pub fn describe_config() -> String {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut out = String::from(
        "cosbal run configuration (TOML)\n\nCommand-line flags override the file. Keys and defaults:\n\n",
    );
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (key, doc) in KEY_DOCS {
        let default = if key.starts_with("schema.") {
            "(required)".to_string()
        } else {
            render(lookup(&defaults, key))
        };
        out.push_str(&format!("{key:<width$}  = {default}\n{:width$}    {doc}\n", ""));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.schema().is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.balance.mode = BalanceMode::Subset;
        cfg.simulate.c = vec![1.0, 10.0];
        cfg.hyperparams.icc = Some(0.3);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[balance]\nmodee = \"unit\"\n").is_err());
        assert!(RunConfig::from_toml_str("[simulate]\nreps = 3\nfoo = 1\n").is_err());
    }

    #[test]
    fn manual_needs_both_values() {
        let cfg = RunConfig::from_toml_str("[hyperparams]\nmode = \"manual\"\nicc = 0.3\n").unwrap();
        assert!(cfg.hyperparams.manual().is_err());
        let cfg = RunConfig::from_toml_str(
            "[hyperparams]\nmode = \"manual\"\nicc = 0.3\nnoise_to_signal = 1.2\n",
        )
        .unwrap();
        let h = cfg.hyperparams.manual().unwrap().unwrap();
        assert_eq!((h.icc, h.noise_to_signal), (0.3, 1.2));
    }

    #[test]
    fn reference_covers_every_section() {
        let text = describe_config();
        for key in ["balance.mode", "simulate.reps", "estimate.alpha", "solver.tol"] {
            assert!(text.contains(key));
        }
        assert!(text.contains("balance.upper") && text.contains("inf"));
    }
}
