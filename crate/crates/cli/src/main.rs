//! `cosbal`: balancing weights, effect estimates, diagnostics and
//! simulations from one TOML config.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cosbal::balancer::{fit, BalanceMode, BalanceSpec, WeightSolution};
use cosbal::config::{describe_config, RunConfig};
use cosbal::diagnostics::{
    balance_table, estimand_profile, profile_table, rounded, standardized_differences,
    summary_table, weight_summary, Table,
};
use cosbal::estimator::{design_effect, estimate_effect, EffectEstimate};
use cosbal::hyperparams::{heuristic_hyperparams, HyperParams, HyperSource};
use cosbal::ingest::load_dataset;
use cosbal::simulator::{run_grid, summary_text, write_replications_csv, write_results_csv};
use cosbal::transform::{build_features, DesignMatrices};
use cosbal::{CosDataset, Error};
use serde_json::json;
use sha2::{Digest, Sha256};

const EXIT_ERROR: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "cosbal", version, about = "Approximate balancing weights for clustered observational studies")]
struct Cli {
    /// Worker threads for simulations (default: all cores).
    #[arg(long, global = true, env = "COSBAL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit balancing weights; writes weights.csv, balance and summary tables.
    Weights(RunArgs),
    /// Fit weights and report the effect estimate with both variance estimates.
    Estimate(RunArgs),
    /// Balance diagnostics: standardized differences, weight summary, profile.
    Balance(RunArgs),
    /// Monte Carlo study over a grid of overlap values and cluster counts.
    Simulate(SimArgs),
    /// Print every config key with its default.
    DescribeConfig {
        /// Write the reference to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Unit,
    ClusterOnly,
    Subset,
}

impl From<ModeArg> for BalanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Unit => BalanceMode::Unit,
            ModeArg::ClusterOnly => BalanceMode::ClusterOnly,
            ModeArg::Subset => BalanceMode::Subset,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum EstimandArg {
    /// ATT with unit weights (mode unit).
    Att,
    /// ATT with cluster weights (mode cluster_only).
    AttCluster,
    /// Overlap-type effect on the weighted subset (mode subset).
    Ato,
}

impl EstimandArg {
    fn mode(self) -> BalanceMode {
        match self {
            Self::Att => BalanceMode::Unit,
            Self::AttCluster => BalanceMode::ClusterOnly,
            Self::Ato => BalanceMode::Subset,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Balancing mode (overrides balance.mode).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Intraclass correlation in [0, 1]; skips the heuristic estimate.
    #[arg(long)]
    icc: Option<f64>,
    /// Noise-to-signal ratio; skips the heuristic estimate.
    #[arg(long)]
    noise_to_signal: Option<f64>,
    /// CI level is 1 - alpha (default 0.05).
    #[arg(long)]
    alpha: Option<f64>,
    /// Target estimand; must agree with the balancing mode.
    #[arg(long, value_enum)]
    estimand: Option<EstimandArg>,
    /// Seed for the heuristic holdout split.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    /// TOML run config (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overlap values, comma separated (default 1,2.5,7.5,10).
    #[arg(long, value_delimiter = ',')]
    c: Option<Vec<f64>>,
    /// Replications per scenario (default 200).
    #[arg(long)]
    reps: Option<usize>,
    /// Cluster counts, comma separated (default 44).
    #[arg(long, value_delimiter = ',')]
    clusters: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    }
    let result = match cli.command {
        Command::Weights(a) => cmd_weights(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Balance(a) => cmd_balance(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::DescribeConfig { out } => cmd_describe(out.as_deref()),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("warning: the solver did not converge; outputs are flagged");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

enum Outcome {
    Done,
    NotConverged,
}

type CmdResult = Result<Outcome, Error>;

fn apply_run_overrides(cfg: &mut RunConfig, a: &RunArgs) -> Result<(), Error> {
    if let Some(out) = &a.out {
        cfg.output.dir = out.clone();
    }
    if let Some(m) = a.mode {
        cfg.balance.mode = m.into();
    }
    if let Some(e) = a.estimand {
        if cfg.balance.mode != e.mode() {
            return Err(Error::Config(format!(
                "this estimand needs {} weights, but the balancing mode is {}",
                e.mode().as_str(),
                cfg.balance.mode.as_str()
            )));
        }
    }
    if let Some(v) = a.icc {
        cfg.hyperparams.icc = Some(v);
    }
    if let Some(v) = a.noise_to_signal {
        cfg.hyperparams.noise_to_signal = Some(v);
    }
    if let Some(v) = a.alpha {
        cfg.estimate.alpha = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    Ok(())
}

struct Fitted {
    cfg: RunConfig,
    ds: CosDataset,
    features: DesignMatrices,
    solution: WeightSolution,
}

/// Manual values from the config or flags win; a single supplied value
/// replaces its half of the heuristic estimate.
fn resolve_hyper(cfg: &RunConfig, ds: &CosDataset, features: &DesignMatrices) -> Result<HyperParams, Error> {
    if let Some(h) = cfg.hyperparams.manual()? {
        return Ok(h);
    }
    let h = &cfg.hyperparams;
    match (h.icc, h.noise_to_signal) {
        (Some(icc), Some(r)) => HyperParams::manual(icc, r),
        (icc, r) => {
            let est = heuristic_hyperparams(ds, features, &h.heuristic_options(cfg.seed))?;
            if icc.is_none() && r.is_none() {
                return Ok(est);
            }
            let mut out = HyperParams::manual(icc.unwrap_or(est.icc), r.unwrap_or(est.noise_to_signal))?;
            out.source = HyperSource::UserSupplied;
            Ok(out)
        }
    }
}

fn fit_from_args(a: &RunArgs) -> Result<Fitted, Error> {
    let mut cfg = RunConfig::load(&a.config)?;
    apply_run_overrides(&mut cfg, a)?;
    let ds = load_dataset(cfg.schema()?)?;
    if cfg.balance.mode == BalanceMode::ClusterOnly && cfg.features.include_unit {
        return Err(Error::Config(
            "cluster_only mode requires features.include_unit = false".into(),
        ));
    }
    let features = build_features(&ds, &cfg.features)?;
    let hyper = resolve_hyper(&cfg, &ds, &features)?;
    let mut spec = BalanceSpec::new(cfg.balance.mode, hyper);
    spec.bounds = cfg.balance.bounds();
    spec.solver = cfg.solver;
    let solution = fit(&ds, &cfg.features, &spec)?;
    Ok(Fitted {
        cfg,
        ds,
        features,
        solution,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    fs::create_dir_all(&cfg.output.dir)?;
    Ok(cfg.output.dir.clone())
}

fn write_table(t: &Table, dir: &Path, stem: &str, digits: usize) -> Result<(), Error> {
    t.write_csv(dir.join(format!("{stem}.csv")))?;
    fs::write(dir.join(format!("{stem}.txt")), rounded(t, digits).to_text())?;
    Ok(())
}

/// The hash covers everything except the output directory.
fn write_manifest(cfg: &RunConfig, dir: &Path, command: &str, outputs: &[&str]) -> Result<(), Error> {
    let mut hashed = cfg.clone();
    hashed.output.dir = PathBuf::new();
    if let Some(schema) = hashed.schema.as_mut() {
        for p in [Some(&mut schema.unit_file), schema.cluster_file.as_mut()].into_iter().flatten() {
            *p = PathBuf::from(p.file_name().unwrap_or_default());
        }
    }
    let text = hashed.to_toml()?;
    let manifest = json!({
        "tool": "cosbal",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "config_sha256": hex::encode(Sha256::digest(text.as_bytes())),
        "outputs": outputs,
    });
    fs::write(dir.join("effective_config.toml"), text)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn status(f: &Fitted) -> Outcome {
    if f.solution.solution_meta.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    }
}

fn diagnostics_tables(f: &Fitted) -> (Table, Table, Table) {
    let w = f.solution.unit_weights(f.ds.n());
    let before = standardized_differences(&f.ds, None);
    let after = standardized_differences(&f.ds, Some(&w));
    let threshold = f.cfg.output.large_weight_threshold;
    let mut summary = summary_table("control", &weight_summary(&f.solution.control_weights(&f.ds), threshold));
    if f.solution.mode == BalanceMode::Subset {
        let treated: Vec<f64> = f.ds.treated_units().into_iter().map(|i| w[i]).collect();
        summary.rows.extend(summary_table("treated", &weight_summary(&treated, threshold)).rows);
    }
    (
        balance_table(&before, &after),
        summary,
        profile_table(&estimand_profile(&f.ds, &w)),
    )
}

fn cmd_weights(a: &RunArgs) -> CmdResult {
    let f = fit_from_args(a)?;
    let dir = out_dir(&f.cfg)?;
    f.solution.write_csv(&f.ds, dir.join("weights.csv"))?;
    f.solution.write_report(fs::File::create(dir.join("weights_report.json"))?)?;
    let (balance, summary, _) = diagnostics_tables(&f);
    let digits = f.cfg.output.digits;
    write_table(&balance, &dir, "balance", digits)?;
    write_table(&summary, &dir, "weight_summary", digits)?;
    write_manifest(&f.cfg, &dir, "weights", &["weights.csv", "weights_report.json", "balance.csv", "weight_summary.csv"])?;

    let meta = &f.solution.solution_meta;
    println!(
        "mode {}  icc {:.4}  noise_to_signal {:.4} ({:?})",
        f.solution.mode.as_str(),
        f.solution.hyper.icc,
        f.solution.hyper.noise_to_signal,
        f.solution.hyper.source
    );
    println!(
        "solver: {} iterations, kkt residual {:.2e}, converged {}",
        meta.iterations, meta.kkt_residual, meta.converged
    );
    println!("control ess {:.2}", f.solution.ess_control);
    print!("{}", rounded(&balance, digits).to_text());
    println!("outputs in {}", dir.display());
    Ok(status(&f))
}

fn fmt_ci(ci: (f64, f64)) -> String {
    format!("[{:.6}, {:.6}]", ci.0, ci.1)
}

fn report_lines(e: &EffectEstimate, deff: Option<f64>) -> Vec<(String, String)> {
    let level = format!("{}%", (1.0 - e.alpha) * 100.0);
    let mut rows = vec![
        ("estimand".to_string(), serde_json::to_value(e.estimand).unwrap().as_str().unwrap_or("").to_string()),
        ("point".into(), format!("{:.6}", e.point)),
    ];
    if let Some(c) = e.point_bias_corrected {
        rows.push(("point_bias_corrected".into(), format!("{c:.6}")));
    }
    rows.extend([
        ("se_plugin".into(), format!("{:.6}", e.se_plugin)),
        ("se_sandwich".into(), format!("{:.6}", e.se_sandwich)),
        (format!("ci_plugin_{level}"), fmt_ci(e.ci_plugin)),
        (format!("ci_sandwich_{level}"), fmt_ci(e.ci_sandwich)),
        ("imbalance_norm".into(), format!("{:.6e}", e.imbalance_norm)),
        ("ess_control".into(), format!("{:.3}", e.ess_control)),
    ]);
    if let Some(t) = e.ess_treated {
        rows.push(("ess_treated".into(), format!("{t:.3}")));
    }
    if let Some(d) = deff {
        rows.push(("design_effect".into(), format!("{d:.6}")));
    }
    rows.push(("icc".into(), format!("{:.4}", e.hyper.icc)));
    rows.push(("noise_to_signal".into(), format!("{:.4}", e.hyper.noise_to_signal)));
    rows
}

fn cmd_estimate(a: &RunArgs) -> CmdResult {
    let f = fit_from_args(a)?;
    let dir = out_dir(&f.cfg)?;
    let e = estimate_effect(&f.ds, &f.features, &f.solution, &f.cfg.estimate)?;
    let w = f.solution.unit_weights(f.ds.n());
    let deff = match f.solution.mode {
        BalanceMode::Subset => None,
        _ => match design_effect(&f.ds, &w, &f.solution.cluster_weights, f.solution.hyper.icc) {
            Ok(d) => Some(d),
            Err(err) => {
                log::warn!("design effect: {err}");
                None
            }
        },
    };
    f.solution.write_csv(&f.ds, dir.join("weights.csv"))?;
    let mut report = serde_json::to_value(&e)?;
    report["design_effect"] = json!(deff);
    report["solver_converged"] = json!(f.solution.solution_meta.converged);
    fs::write(dir.join("estimate.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let lines = report_lines(&e, deff);
    let mut csv = csv::Writer::from_path(dir.join("estimate.csv"))?;
    csv.write_record(["quantity", "value"])?;
    for (k, v) in &lines {
        csv.write_record([k, v])?;
    }
    csv.flush()?;
    write_manifest(&f.cfg, &dir, "estimate", &["weights.csv", "estimate.json", "estimate.csv"])?;

    let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut stdout = std::io::stdout().lock();
    for (k, v) in &lines {
        writeln!(stdout, "{k:<width$}  {v}")?;
    }
    Ok(status(&f))
}

fn cmd_balance(a: &RunArgs) -> CmdResult {
    let f = fit_from_args(a)?;
    let dir = out_dir(&f.cfg)?;
    let (balance, summary, profile) = diagnostics_tables(&f);
    let digits = f.cfg.output.digits;
    write_table(&balance, &dir, "balance", digits)?;
    write_table(&summary, &dir, "weight_summary", digits)?;
    write_table(&profile, &dir, "profile", digits)?;
    write_manifest(&f.cfg, &dir, "balance", &["balance.csv", "weight_summary.csv", "profile.csv"])?;
    for t in [&balance, &summary, &profile] {
        println!("{}", rounded(t, digits).to_text());
    }
    Ok(status(&f))
}

fn cmd_simulate(a: &SimArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &a.out {
        cfg.output.dir = out.clone();
    }
    if let Some(c) = &a.c {
        cfg.simulate.c = c.clone();
    }
    if let Some(r) = a.reps {
        cfg.simulate.reps = r;
    }
    if let Some(k) = &a.clusters {
        cfg.simulate.clusters = k.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.alpha {
        cfg.estimate.alpha = v;
    }
    if cfg.simulate.c.is_empty() || cfg.simulate.clusters.is_empty() {
        return Err(Error::Config("simulate.c and simulate.clusters must be nonempty".into()));
    }
    let sim = cfg.sim_config();
    let results = run_grid(&sim, &cfg.simulate.c, &cfg.simulate.clusters)?;
    let dir = out_dir(&cfg)?;
    write_results_csv(&results, dir.join("results.csv"))?;
    let mut outputs = vec!["results.csv", "summary.txt"];
    if cfg.simulate.write_replications {
        write_replications_csv(&results, dir.join("replications.csv"))?;
        outputs.push("replications.csv");
    }
    let text = summary_text(&results);
    fs::write(dir.join("summary.txt"), &text)?;
    write_manifest(&cfg, &dir, "simulate", &outputs)?;
    print!("{text}");
    let failed: usize = results.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        eprintln!("warning: {failed} replications failed (see the reps_failed rows of results.csv)");
    }
    Ok(Outcome::Done)
}

fn cmd_describe(out: Option<&Path>) -> CmdResult {
    let text = describe_config();
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(Outcome::Done)
}
