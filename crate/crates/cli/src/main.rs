//! `ncf`: runs the experiments and KKT tools of `ncf-core`.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 for bad
//! usage or a run that could not complete.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;
use serde::Serialize;

use ncf_core::harness::{
    self, Check, ExperimentConfig, ExperimentReport, KktBundle, KktOutcome, KktRecipe,
};

#[derive(Parser, Debug)]
#[command(name = "ncf", version, about = "Small-initialization flows and rank-one KKT points")]
struct Cli {
    /// Seed for single-seed runs; the first seed of sweeps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for meta.json and the other artifacts.
    #[arg(long, global = true, default_value = "ncf-out")]
    out_dir: PathBuf,
    /// Print the report as JSON instead of a summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Teacher-student gradient descent from a small initialization.
    EarlyPhase(EarlyPhaseArgs),
    /// Rank-one and non-negativity measures of ascent KKT points.
    TableSweep(SweepArgs),
    /// Gradient descent on the correlation against projected ascent.
    GdVsPga(GdVsPgaArgs),
    /// Blow-up exponent of deep scalar chains.
    BlowupRate(BlowupArgs),
    /// Rescaled training flow against the correlation flow.
    RescaleGap(RescaleGapArgs),
    /// Build and verify a rank-one KKT point on sampled data.
    ConstructKkt(ConstructArgs),
    /// Re-verify a point written by construct-kkt.
    VerifyKkt(BundleArgs),
    /// KKT residual and alignment of stored weights.
    KktReport(BundleArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config as JSON; wins over inline flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EarlyPhaseArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Use the three-layer ReLU student instead of the squared-ReLU one.
    #[arg(long)]
    three_layer: bool,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of layers.
    #[arg(long = "L", default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    p: u32,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 30)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct GdVsPgaArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 3)]
    instances: u64,
}

#[derive(Args, Debug)]
struct BlowupArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long = "L", default_value_t = 3)]
    depth: usize,
}

#[derive(Args, Debug)]
struct RescaleGapArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Horizon in rescaled time.
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args, Debug)]
struct ConstructArgs {
    /// Recipe as JSON; wins over inline flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "L", default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    p: u32,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    width: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
}

#[derive(Args, Debug)]
struct BundleArgs {
    /// A kkt.json written by construct-kkt, or any file with spec, data and weights.
    #[arg(long)]
    input: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Loads `path` when given, warning about inline flags it overrides.
fn config_or(path: &Option<PathBuf>, inline_given: bool, build: impl FnOnce() -> Result<ExperimentConfig>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            if inline_given {
                warn!("--config {} given; inline flags are ignored", p.display());
            }
            ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))
        }
        None => build(),
    }
}

fn seeds_from(first: u64, count: u64) -> Vec<u64> {
    (first..first + count).collect()
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let cfg = match &cli.command {
        Command::EarlyPhase(a) => {
            let inline = a.three_layer || a.delta.is_some() || a.step.is_some() || a.iters.is_some() || a.stride.is_some();
            config_or(&a.config.config, inline, || {
                let mut cfg = if a.three_layer {
                    ExperimentConfig::relu_three_layer(seed)
                } else {
                    ExperimentConfig::early_phase(seed)
                };
                if let Some(d) = a.delta {
                    cfg.delta = d;
                }
                if let Some(s) = a.step {
                    cfg.optimizer.step = s;
                }
                if let Some(i) = a.iters {
                    cfg.optimizer.iters = i;
                }
                if let Some(s) = a.stride {
                    cfg.optimizer.stride = s;
                }
                Ok(cfg)
            })?
        }
        Command::TableSweep(a) => config_or(&a.config.config, false, || {
            Ok(ExperimentConfig::table_cell(a.depth, a.p, a.alpha, seeds_from(seed, a.seeds))?)
        })?,
        Command::GdVsPga(a) => config_or(&a.config.config, false, || {
            Ok(ExperimentConfig::gd_vs_pga(a.steps, seeds_from(seed, a.instances)))
        })?,
        Command::BlowupRate(a) => config_or(&a.config.config, false, || Ok(ExperimentConfig::blowup(a.depth)?))?,
        Command::RescaleGap(a) => config_or(&a.config.config, a.horizon.is_some(), || {
            let mut cfg = ExperimentConfig::rescale_gap(seed);
            if let Some(h) = a.horizon {
                cfg.optimizer.horizon = Some(h);
            }
            Ok(cfg)
        })?,
        Command::ConstructKkt(a) => return construct(cli, a, seed),
        Command::VerifyKkt(a) => return verify(cli, &a.input, true),
        Command::KktReport(a) => return verify(cli, &a.input, false),
    };
    run_experiment(cli, cfg)
}

fn run_experiment(cli: &Cli, mut cfg: ExperimentConfig) -> Result<bool> {
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(cli.out_dir.clone());
    }
    let dir = cfg.out_dir.clone().expect("set above");
    // meta.json is written first so that failed runs still leave a record.
    harness::write_meta(&dir, &cfg)?;
    let report = harness::run(&cfg)?;
    harness::write_json(&dir.join("report.json"), &report)?;
    if cli.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print_summary(&report_title(&report), &dir, report.checks());
    }
    Ok(report.passed())
}

fn report_title(report: &ExperimentReport) -> String {
    match report {
        ExperimentReport::EarlyPhase(_) => "early-phase".into(),
        ExperimentReport::TableKappaRho(r) => format!("table-sweep L={} p={} alpha={}", r.depth, r.p, r.alpha),
        ExperimentReport::GdVsPga(_) => "gd-vs-pga".into(),
        ExperimentReport::BlowupRate(_) => "blowup-rate".into(),
        ExperimentReport::RescaleGap(_) => "rescale-gap".into(),
    }
}

fn print_summary(title: &str, dir: &Path, checks: &[Check]) {
    println!("{title}");
    for c in checks {
        let value = c.value.map_or_else(|| "none".to_string(), |v| format!("{v:.6e}"));
        let status = if c.passed { "ok" } else { "FAILED" };
        println!("  {:<28} {:>14}  {:?}  {status}", c.name, value, c.bound);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all checks passed; artifacts in {}", dir.display());
    } else {
        println!("failed: {}; artifacts in {}", failed.join(", "), dir.display());
    }
}

fn construct(cli: &Cli, a: &ConstructArgs, seed: u64) -> Result<bool> {
    let recipe = match &a.config {
        Some(p) => {
            warn!("--config {} given; inline flags are ignored", p.display());
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => KktRecipe {
            depth: a.depth,
            p: a.p,
            alpha: a.alpha,
            width: a.width,
            n: a.n,
            d: a.d,
            seed,
        },
    };
    harness::write_meta(&cli.out_dir, &recipe)?;
    let (bundle, outcome) = harness::construct_kkt(&recipe)?;
    harness::write_json(&cli.out_dir.join("kkt.json"), &bundle)?;
    finish(cli, "construct-kkt", &outcome)
}

#[derive(Serialize)]
struct VerifyMeta<'a> {
    input: &'a Path,
}

fn verify(cli: &Cli, input: &Path, itemized: bool) -> Result<bool> {
    harness::write_meta(&cli.out_dir, &VerifyMeta { input })?;
    let mut bundle = KktBundle::load(input).with_context(|| format!("reading {}", input.display()))?;
    if !itemized {
        bundle.kkt = None;
    }
    let spec = &bundle.spec;
    let recipe = KktRecipe {
        depth: spec.depth(),
        p: spec.p,
        alpha: spec.alpha,
        width: spec.widths.get(1).copied().unwrap_or(0),
        n: bundle.data.n(),
        d: spec.input_dim(),
        seed: cli.seed.unwrap_or(0),
    };
    let outcome = harness::verify_bundle(&bundle, recipe)?;
    let title = if itemized { "verify-kkt" } else { "kkt-report" };
    if !itemized {
        let report = ncf_core::ncf::kkt_report(&bundle.problem()?, &bundle.weights)?;
        harness::write_json(&cli.out_dir.join("kkt_report.json"), &report)?;
        if cli.json {
            println!("{}", serde_json::to_string(&report)?);
            return Ok(outcome.passed);
        }
        println!(
            "value {:.6e}  lambda {:.6e}  alignment {:.12}  residual {:.3e}",
            report.ncf_value, report.lambda_estimate, report.alignment, report.residual
        );
    }
    finish(cli, title, &outcome)
}

fn finish(cli: &Cli, title: &str, outcome: &KktOutcome) -> Result<bool> {
    harness::write_json(&cli.out_dir.join("verdict.json"), outcome)?;
    if cli.json {
        println!("{}", serde_json::to_string(outcome)?);
    } else {
        print_summary(title, &cli.out_dir, &outcome.checks);
        for c in outcome.verdict.failures() {
            println!("  condition {} measured {:.3e} > {:.1e}", c.name, c.measured, c.tolerance);
        }
    }
    Ok(outcome.passed)
}
