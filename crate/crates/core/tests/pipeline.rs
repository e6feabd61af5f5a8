use std::fs;

use cosbal::balancer::{fit, BalanceMode, BalanceSpec};
use cosbal::config::RunConfig;
use cosbal::data::{ClusterRecord, CosDataset, UnitRecord};
use cosbal::diagnostics::standardized_differences;
use cosbal::estimator::{estimate_effect, EstimateOptions};
use cosbal::hyperparams::HyperParams;
use cosbal::ingest::load_dataset;
use cosbal::simulator::{run_grid, SimConfig, SimEstimator};
use cosbal::transform::{build_features, FeatureSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(seed: u64) -> CosDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = Vec::new();
    let mut units = Vec::new();
    for k in 0..8 {
        let t = k % 2 == 0;
        let id = format!("s{k}");
        let w = rng.random::<f64>() + if t { 0.3 } else { 0.0 };
        clusters.push(ClusterRecord::new(id.clone(), t, vec![w]));
        for j in 0..rng.random_range(2..7) {
            let x: f64 = rng.random::<f64>() * 2.0;
            let y = 1.0 + x + 2.0 * w + rng.random::<f64>();
            units.push(UnitRecord::new(format!("{id}_{j}"), id.clone(), vec![x], y));
        }
    }
    CosDataset::new(vec!["x".into()], vec!["w".into()], clusters, units).unwrap()
}

#[test]
fn csv_to_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let mut units = String::from("id,school,z,x,y\n");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..10 {
        let t = u8::from(k < 4);
        for j in 0..6 {
            let x: f64 = rng.random::<f64>() + 0.2 * f64::from(t);
            let y = 3.0 * x + 1.5 * f64::from(t) + 0.1 * rng.random::<f64>();
            units.push_str(&format!("u{k}_{j},k{k},{t},{x},{y}\n"));
        }
    }
    fs::write(dir.path().join("units.csv"), units).unwrap();
    fs::write(
        dir.path().join("run.toml"),
        r#"
[schema]
unit_file = "units.csv"
treatment_column = "z"
outcome_column = "y"
unit_covariates = ["x"]
aggregate_unit_covariates = [{ column = "x", aggregator = "mean" }]
[schema.id_columns]
unit = "id"
cluster = "school"
"#,
    )
    .unwrap();
    let cfg = RunConfig::load(dir.path().join("run.toml")).unwrap();
    let ds = load_dataset(cfg.schema().unwrap()).unwrap();
    assert_eq!((ds.m(), ds.n(), ds.n1()), (10, 60, 24));
    assert_eq!(ds.cluster_covariates(), ["x_mean"]);

    let dm = build_features(&ds, &cfg.features).unwrap();
    let spec = BalanceSpec::new(BalanceMode::Unit, HyperParams::manual(0.2, 0.05).unwrap());
    let sol = fit(&ds, &cfg.features, &spec).unwrap();
    assert!(sol.solution_meta.converged);
    let e = estimate_effect(&ds, &dm, &sol, &EstimateOptions::default()).unwrap();
    assert!((e.point - 1.5).abs() < 0.2, "{}", e.point);
    assert!((e.point_bias_corrected.unwrap() - 1.5).abs() < 0.1);
    assert!(e.ci_plugin.0 < e.point && e.point < e.ci_plugin.1);
}

#[test]
fn uniform_weights_reproduce_unweighted_differences() {
    let ds = random_dataset(4);
    let mut w = vec![1.0; ds.n()];
    let r = ds.n1() as f64 / ds.n0() as f64;
    for i in ds.control_units() {
        w[i] = r;
    }
    assert_eq!(standardized_differences(&ds, None), standardized_differences(&ds, Some(&w)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn manual_weights_ignore_outcome_shift(seed in 0u64..1000, shift in -100.0f64..100.0) {
        let ds = random_dataset(seed);
        let y: Vec<f64> = ds.outcomes().iter().map(|v| v + shift).collect();
        let shifted = ds.with_outcomes(&y).unwrap();
        let hyper = HyperParams::manual(0.3, 0.5).unwrap();
        for (mode, features) in [
            (BalanceMode::Unit, FeatureSpec::default()),
            (BalanceMode::ClusterOnly, FeatureSpec::cluster_only()),
            (BalanceMode::Subset, FeatureSpec::default()),
        ] {
            let spec = BalanceSpec::new(mode, hyper);
            let a = fit(&ds, &features, &spec).unwrap();
            let b = fit(&shifted, &features, &spec).unwrap();
            prop_assert_eq!(a.gamma, b.gamma);
        }
    }

    #[test]
    fn weighted_control_mean_interpolates(seed in 0u64..1000) {
        let ds = random_dataset(seed);
        let hyper = HyperParams::manual(0.1, 0.2).unwrap();
        let sol = fit(&ds, &FeatureSpec::default(), &BalanceSpec::new(BalanceMode::Unit, hyper)).unwrap();
        let w = sol.unit_weights(ds.n());
        let ctrl = ds.control_units();
        let mean = ctrl.iter().map(|&i| w[i] * ds.units()[i].y).sum::<f64>() / ds.n1() as f64;
        let lo = ctrl.iter().map(|&i| ds.units()[i].y).fold(f64::INFINITY, f64::min);
        let hi = ctrl.iter().map(|&i| ds.units()[i].y).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-9 <= mean && mean <= hi + 1e-9);
    }
}

#[test]
fn simulation_orderings() {
    let cfg = SimConfig {
        n_reps: 30,
        estimators: vec![SimEstimator::Naive, SimEstimator::Balancing],
        ..SimConfig::default()
    };
    let results = run_grid(&cfg, &[1.0, 10.0], &[cfg.n_clusters]).unwrap();
    let naive: Vec<f64> = results
        .iter()
        .map(|r| r.summaries.iter().find(|s| s.estimator == SimEstimator::Naive).unwrap().std_bias)
        .collect();
    assert!(naive[0] > naive[1], "{naive:?}");
    for r in &results {
        for s in &r.summaries {
            assert!(s.rmse >= s.bias.abs());
            assert!((0.0..=1.0).contains(&s.coverage_plugin));
        }
        let b = r.summaries.iter().find(|s| s.estimator == SimEstimator::Balancing).unwrap();
        assert!(b.mean_se_plugin <= b.mean_se_sandwich);
    }
}
