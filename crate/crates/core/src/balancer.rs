//! Builds and solves the three balancing problems:
//!
//! * `unit`: control-unit weights balancing unit and cluster features
//!   towards the treated means, with a random-effects penalty per cluster;
//! * `cluster_only`: one weight per control cluster, features at the
//!   cluster level only;
//! * `subset`: weights on both arms balancing the two weighted means
//!   against each other (overlap-type estimand).

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::CosDataset;
use crate::diagnostics::kish_ess;
use crate::error::{Error, Result};
use crate::hyperparams::HyperParams;
use crate::qp::{self, PenaltyBlock, PenaltyStructure, QpProblem, QpSolution, SolverOptions, SumConstraint};
use crate::transform::{build_features, DesignMatrices, FeatureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    #[default]
    Unit,
    ClusterOnly,
    Subset,
}

impl BalanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unit => "unit",
            Self::ClusterOnly => "cluster_only",
            Self::Subset => "subset",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceSpec {
    pub mode: BalanceMode,
    pub hyper: HyperParams,
    pub bounds: Bounds,
    pub solver: SolverOptions,
}

impl BalanceSpec {
    pub fn new(mode: BalanceMode, hyper: HyperParams) -> Self {
        Self {
            mode,
            hyper,
            bounds: Bounds::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSolution {
    pub mode: BalanceMode,
    /// Dataset positions of the weighted units: control units for `unit`
    /// and `cluster_only`, controls then treated for `subset`.
    pub units: Vec<usize>,
    pub gamma: Vec<f64>,
    /// Per-cluster average weight, dataset cluster order. Treated clusters
    /// carry weight 1 outside `subset` mode.
    pub cluster_weights: Vec<f64>,
    pub solution_meta: QpSolution,
    pub hyper: HyperParams,
    pub ess_control: f64,
    pub ess_treated: Option<f64>,
}

impl WeightSolution {
    /// Weights for every unit in dataset order (treated units get 1 outside
    /// `subset` mode).
    pub fn unit_weights(&self, n: usize) -> Vec<f64> {
        let mut w = vec![1.0; n];
        for (&i, &g) in self.units.iter().zip(&self.gamma) {
            w[i] = g;
        }
        w
    }

    /// Weights of the control units in dataset order.
    pub fn control_weights(&self, ds: &CosDataset) -> Vec<f64> {
        let w = self.unit_weights(ds.n());
        ds.control_units().into_iter().map(|i| w[i]).collect()
    }

    pub fn write_csv(&self, ds: &CosDataset, path: impl AsRef<Path>) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["unit_id", "cluster_id", "treated", "weight"])?;
        for (i, (u, w)) in ds.units().iter().zip(self.unit_weights(ds.n())).enumerate() {
            let treated = ds.is_treated_unit(i);
            out.write_record([
                u.unit_id.as_str(),
                u.cluster_id.as_str(),
                if treated { "1" } else { "0" },
                &w.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_report(&self, mut out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }
}

fn check_bounds(b: &Bounds) -> Result<()> {
    if b.lower.is_nan() || b.upper.is_nan() || b.lower > b.upper {
        return Err(Error::InfeasibleConstraint(format!(
            "lower bound {} exceeds upper bound {}",
            b.lower, b.upper
        )));
    }
    Ok(())
}

fn ratio_scale(hyper: &HyperParams, n1: usize) -> f64 {
    hyper.noise_to_signal / (n1 as f64).powi(2)
}

/// Control-cluster lengths in control-unit order.
fn control_blocks(ds: &CosDataset) -> Vec<usize> {
    ds.control_clusters()
        .map(|k| ds.cluster_ranges()[k].len())
        .collect()
}

fn consecutive(lengths: &[usize], offset: usize) -> Vec<std::ops::Range<usize>> {
    let mut start = offset;
    lengths
        .iter()
        .map(|&len| {
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn build_unit_problem(
    ds: &CosDataset,
    features: &DesignMatrices,
    hyper: &HyperParams,
    bounds: &Bounds,
) -> Result<QpProblem> {
    check_bounds(bounds)?;
    let n1 = ds.n1();
    let m = features.b0.transpose() / n1 as f64;
    let scale = ratio_scale(hyper, n1);
    let ranges = consecutive(&control_blocks(ds), 0);
    Ok(QpProblem {
        m,
        t: features.target.clone(),
        penalty: PenaltyStructure::mixture(ranges.into_iter().map(|r| (r, scale)), hyper.icc),
        sum_constraints: vec![SumConstraint::new(0..ds.n0(), n1 as f64)],
        lower: bounds.lower,
        upper: bounds.upper,
    })
}

pub fn build_cluster_problem(
    ds: &CosDataset,
    features: &DesignMatrices,
    hyper: &HyperParams,
    bounds: &Bounds,
) -> Result<QpProblem> {
    check_bounds(bounds)?;
    let rows = features.cluster_rows.as_ref().ok_or_else(|| {
        Error::Config("cluster_only mode needs features with include_unit = false".into())
    })?;
    let n1 = ds.n1();
    let controls: Vec<usize> = ds.control_clusters().collect();
    let sizes: Vec<f64> = controls
        .iter()
        .map(|&k| ds.clusters()[k].size as f64)
        .collect();
    let d = features.dim();
    let m = DMatrix::from_fn(d, controls.len(), |j, l| {
        sizes[l] / n1 as f64 * rows[(controls[l], j)]
    });
    let scale = ratio_scale(hyper, n1);
    let r = hyper.icc;
    let blocks = sizes
        .iter()
        .enumerate()
        .map(|(l, &nl)| PenaltyBlock {
            range: l..l + 1,
            scale_diag: scale * ((1.0 - r) * nl + r * nl * nl),
            scale_ones: 0.0,
        })
        .collect();
    Ok(QpProblem {
        m,
        t: features.target.clone(),
        penalty: PenaltyStructure { blocks },
        sum_constraints: vec![SumConstraint::weighted(0..controls.len(), n1 as f64, sizes)],
        lower: bounds.lower,
        upper: bounds.upper,
    })
}

pub fn build_subset_problem(
    ds: &CosDataset,
    features: &DesignMatrices,
    hyper: &HyperParams,
    bounds: &Bounds,
) -> Result<QpProblem> {
    check_bounds(bounds)?;
    let (n0, n1) = (ds.n0(), ds.n1());
    let d = features.dim();
    let m = DMatrix::from_fn(d, n0 + n1, |j, i| {
        if i < n0 {
            features.b0[(i, j)] / n0 as f64
        } else {
            -features.b1[(i - n0, j)] / n1 as f64
        }
    });
    let treated_lengths: Vec<usize> = ds
        .treated_clusters()
        .map(|k| ds.cluster_ranges()[k].len())
        .collect();
    let c_scale = hyper.noise_to_signal / (n0 as f64).powi(2);
    let t_scale = hyper.noise_to_signal / (n1 as f64).powi(2);
    let ranges = consecutive(&control_blocks(ds), 0)
        .into_iter()
        .map(|r| (r, c_scale))
        .chain(consecutive(&treated_lengths, n0).into_iter().map(|r| (r, t_scale)));
    Ok(QpProblem {
        m,
        t: DVector::zeros(d),
        penalty: PenaltyStructure::mixture(ranges, hyper.icc),
        sum_constraints: vec![
            SumConstraint::new(0..n0, n0 as f64),
            SumConstraint::new(n0..n0 + n1, n1 as f64),
        ],
        lower: bounds.lower,
        upper: bounds.upper,
    })
}

fn cluster_means(ds: &CosDataset, unit_weights: &[f64]) -> Vec<f64> {
    ds.cluster_ranges()
        .iter()
        .map(|r| unit_weights[r.clone()].iter().sum::<f64>() / r.len() as f64)
        .collect()
}

/// Solves the balancing problem for prebuilt features.
pub fn fit_with_features(
    ds: &CosDataset,
    features: &DesignMatrices,
    spec: &BalanceSpec,
) -> Result<WeightSolution> {
    let controls = ds.control_units();
    let problem = match spec.mode {
        BalanceMode::Unit => build_unit_problem(ds, features, &spec.hyper, &spec.bounds)?,
        BalanceMode::ClusterOnly => build_cluster_problem(ds, features, &spec.hyper, &spec.bounds)?,
        BalanceMode::Subset => build_subset_problem(ds, features, &spec.hyper, &spec.bounds)?,
    };
    let sol = qp::solve(&problem, &spec.solver)?;
    if !sol.converged {
        log::warn!(
            "solver stopped after {} iterations with KKT residual {:.3e}",
            sol.iterations,
            sol.kkt_residual
        );
    }
    let (units, gamma) = match spec.mode {
        BalanceMode::Unit => (controls, sol.gamma.clone()),
        BalanceMode::ClusterOnly => {
            let mut gamma = Vec::with_capacity(controls.len());
            for (l, k) in ds.control_clusters().enumerate() {
                gamma.extend(std::iter::repeat_n(sol.gamma[l], ds.cluster_ranges()[k].len()));
            }
            (controls, gamma)
        }
        BalanceMode::Subset => {
            let mut units = controls;
            units.extend(ds.treated_units());
            (units, sol.gamma.clone())
        }
    };
    let n0 = ds.n0();
    let ess_control = kish_ess(&gamma[..n0]);
    let ess_treated = (spec.mode == BalanceMode::Subset).then(|| kish_ess(&gamma[n0..]));
    let mut solution = WeightSolution {
        mode: spec.mode,
        units,
        gamma,
        cluster_weights: Vec::new(),
        solution_meta: sol,
        hyper: spec.hyper,
        ess_control,
        ess_treated,
    };
    solution.cluster_weights = cluster_means(ds, &solution.unit_weights(ds.n()));
    Ok(solution)
}

pub fn fit(ds: &CosDataset, feature_spec: &FeatureSpec, spec: &BalanceSpec) -> Result<WeightSolution> {
    if spec.mode == BalanceMode::ClusterOnly && feature_spec.include_unit {
        return Err(Error::Config(
            "cluster_only mode requires features.include_unit = false".into(),
        ));
    }
    let features = build_features(ds, feature_spec)?;
    fit_with_features(ds, &features, spec)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{ClusterRecord, UnitRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every treated cluster has a control twin with identical covariates.
    pub(crate) fn mirrored(seed: u64) -> CosDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clusters = Vec::new();
        let mut units = Vec::new();
        for k in 0..6 {
            let w = vec![rng.random::<f64>(), rng.random::<f64>()];
            let size = 2 + k % 3;
            let xs: Vec<f64> = (0..size).map(|_| rng.random::<f64>() * 3.0).collect();
            for (arm, tag) in [(true, "t"), (false, "c")] {
                let id = format!("{tag}{k}");
                clusters.push(ClusterRecord::new(id.clone(), arm, w.clone()));
                for (j, &x) in xs.iter().enumerate() {
                    units.push(UnitRecord::new(format!("{id}_{j}"), id.clone(), vec![x], x + w[0]));
                }
            }
        }
        CosDataset::new(vec!["x".into()], vec!["w1".into(), "w2".into()], clusters, units).unwrap()
    }

    fn hyper(icc: f64, ratio: f64) -> HyperParams {
        HyperParams::manual(icc, ratio).unwrap()
    }

    #[test]
    fn unit_penalty_limits() {
        let ds = crate::data::tests::toy(&[(true, 2), (false, 2), (false, 3)]);
        let dm = build_features(&ds, &FeatureSpec::default()).unwrap();
        let g = [0.5, 1.0, 0.25, 0.0, 1.25];
        let n1sq = 4.0;
        let p0 = build_unit_problem(&ds, &dm, &hyper(0.0, 2.0), &Bounds::default()).unwrap();
        let sq: f64 = g.iter().map(|x| x * x).sum();
        assert!((p0.penalty.value(&g) - 2.0 / n1sq * sq).abs() < 1e-12);
        let p1 = build_unit_problem(&ds, &dm, &hyper(1.0, 2.0), &Bounds::default()).unwrap();
        let cs = 1.5f64.powi(2) + 1.5f64.powi(2);
        assert!((p1.penalty.value(&g) - 2.0 / n1sq * cs).abs() < 1e-12);
    }

    #[test]
    fn cluster_penalty_examples() {
        let ds = crate::data::tests::toy(&[(true, 1), (false, 1), (false, 1)]);
        let dm = build_features(&ds, &FeatureSpec::cluster_only()).unwrap();
        let g = [0.7, 1.3];
        for r in [0.0, 0.3, 1.0] {
            let p = build_cluster_problem(&ds, &dm, &hyper(r, 1.0), &Bounds::default()).unwrap();
            assert!((p.penalty.value(&g) - (0.49 + 1.69)).abs() < 1e-12);
        }
        let ds = crate::data::tests::toy(&[(true, 2), (false, 3), (false, 4)]);
        let dm = build_features(&ds, &FeatureSpec::cluster_only()).unwrap();
        let p = build_cluster_problem(&ds, &dm, &hyper(1.0, 1.0), &Bounds::default()).unwrap();
        let expect = ((3.0 * 0.7f64).powi(2) + (4.0 * 1.3f64).powi(2)) / 4.0;
        assert!((p.penalty.value(&g) - expect).abs() < 1e-12);
    }

    #[test]
    fn mirrored_dataset_gets_uniform_quality() {
        let ds = mirrored(1);
        let dm = build_features(&ds, &FeatureSpec::default()).unwrap();
        let h = hyper(0.2, 0.5);
        let p = build_unit_problem(&ds, &dm, &h, &Bounds::default()).unwrap();
        let uniform = vec![ds.n1() as f64 / ds.n0() as f64; ds.n0()];
        assert!(dm.imbalance(&uniform).unwrap().norm() < 1e-12);
        let sol = fit_with_features(&ds, &dm, &BalanceSpec::new(BalanceMode::Unit, h)).unwrap();
        assert!(sol.solution_meta.converged);
        assert!(p.objective(&sol.gamma) <= p.objective(&uniform) + 1e-12);

        // without the cluster term the uniform weights are optimal
        let h0 = hyper(0.0, 0.5);
        let sol = fit_with_features(&ds, &dm, &BalanceSpec::new(BalanceMode::Unit, h0)).unwrap();
        assert!((sol.ess_control - ds.n0() as f64).abs() < 1e-6);
        let sub = fit_with_features(&ds, &dm, &BalanceSpec::new(BalanceMode::Subset, h0)).unwrap();
        for g in &sub.gamma {
            assert!((g - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn subset_symmetric_instance() {
        let ds = mirrored(2);
        let dm = build_features(&ds, &FeatureSpec::default()).unwrap();
        let sol = fit_with_features(&ds, &dm, &BalanceSpec::new(BalanceMode::Subset, hyper(0.3, 0.1))).unwrap();
        let w = sol.unit_weights(ds.n());
        // treated cluster k sits right before its control twin
        for pair in ds.cluster_ranges().chunks(2) {
            for (i, j) in pair[0].clone().zip(pair[1].clone()) {
                assert!((w[i] - w[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn subset_downweights_outlying_treated_cluster() {
        let mut clusters = Vec::new();
        let mut units = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = [(true, 0.0), (true, 0.5), (true, 8.0), (false, 0.2), (false, 0.4), (false, 0.1)];
        for (k, &(arm, c)) in centers.iter().enumerate() {
            let id = format!("k{k}");
            clusters.push(ClusterRecord::new(id.clone(), arm, vec![]));
            for j in 0..5 {
                let x = c + rng.random::<f64>() * 0.5;
                units.push(UnitRecord::new(format!("{id}_{j}"), id.clone(), vec![x], 0.0));
            }
        }
        let ds = CosDataset::new(vec!["x".into()], vec![], clusters, units).unwrap();
        let dm = build_features(&ds, &FeatureSpec::default()).unwrap();
        let sol = fit_with_features(&ds, &dm, &BalanceSpec::new(BalanceMode::Subset, hyper(0.2, 0.05))).unwrap();
        let cw = &sol.cluster_weights;
        assert!(cw[2] < cw[0] && cw[2] < cw[1], "{cw:?}");
    }

    #[test]
    fn cluster_only_weights_constant_within_cluster() {
        let ds = mirrored(3);
        let sol = fit(
            &ds,
            &FeatureSpec::cluster_only(),
            &BalanceSpec::new(BalanceMode::ClusterOnly, hyper(0.5, 0.2)),
        )
        .unwrap();
        let w = sol.unit_weights(ds.n());
        for r in ds.cluster_ranges() {
            assert!(w[r.clone()].iter().all(|&x| x == w[r.start]));
        }
        let total: f64 = sol.gamma.iter().sum();
        assert!((total - ds.n1() as f64).abs() < 1e-9);
        assert!(fit(
            &ds,
            &FeatureSpec::default(),
            &BalanceSpec::new(BalanceMode::ClusterOnly, hyper(0.5, 0.2))
        )
        .is_err());
    }

    #[test]
    fn ratio_knob_is_monotone() {
        let ds = crate::data::tests::toy(&[(true, 3), (true, 2), (false, 4), (false, 3), (false, 5)]);
        let dm = build_features(&ds, &FeatureSpec::default()).unwrap();
        let mut last: Option<(f64, f64)> = None;
        for ratio in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let h = hyper(0.3, ratio);
            let sol = fit_with_features(&ds, &dm, &BalanceSpec::new(BalanceMode::Unit, h)).unwrap();
            let p = build_unit_problem(&ds, &dm, &hyper(0.3, 1.0), &Bounds::default()).unwrap();
            let (bal, pen) = p.objective_parts(&sol.gamma);
            if let Some((b, q)) = last {
                assert!(bal >= b - 1e-9, "balance {bal} < {b}");
                assert!(pen <= q + 1e-9, "penalty {pen} > {q}");
            }
            last = Some((bal, pen));
        }
    }

    #[test]
    fn nonnegative_weights_and_sum() {
        let ds = mirrored(7);
        let dm = build_features(&ds, &FeatureSpec::default()).unwrap();
        for mode in [BalanceMode::Unit, BalanceMode::Subset] {
            let sol = fit_with_features(&ds, &dm, &BalanceSpec::new(mode, hyper(0.1, 0.01))).unwrap();
            assert!(sol.gamma.iter().all(|&g| g >= 0.0));
            let n0 = ds.n0();
            assert!((sol.gamma[..n0].iter().sum::<f64>() - if mode == BalanceMode::Unit { ds.n1() as f64 } else { n0 as f64 }).abs() < 1e-9);
        }
    }
}
