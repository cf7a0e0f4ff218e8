//! Command-line front end: train, build, diagnose, verify, eval, sweep.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 numerical failure
//! (including failed verification checks).

pub mod config;
pub mod pipeline;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pnc_core::bench_data::{generate, BenchConfig, ShiftedDataset};
use pnc_core::net::{train_mlp, Activation, MlpModel, TrainConfig};
use pnc_core::pnc::{build_ensemble, PncConfig, PncEnsemble};
use pnc_core::verify::{run_suite, CheckRow};
use serde::Serialize;
use serde_json::json;

use config::{pick, FileConfig};
use pipeline::{
    conditioning_summary, diagnose, evaluate, floor_for, sweep, SweepGrid, DIAGNOSTIC_COLUMNS, EVAL_SPLITS,
};
use report::{num, opt, CsvTable};

#[derive(Debug, Parser)]
#[command(name = "pnc", about = "Perturb-and-correct ensembles for regression networks")]
pub struct Cli {
    /// TOML file with [data], [train], [pnc], [sweep] and [verify] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a base MLP on the benchmark's train split.
    Train(TrainArgs),
    /// Build a perturbed (and by default corrected) ensemble.
    Build(BuildArgs),
    /// Per-point diagnostics as CSV.
    Diagnose(DiagnoseArgs),
    /// Run the oracle check suites.
    Verify(VerifyArgs),
    /// Split-level metrics for an ensemble.
    Eval(EvalArgs),
    /// Grid search selected by validation NLL.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset file written by `--save-data` or [`ShiftedDataset::save`].
    #[arg(long, conflicts_with = "generate")]
    pub data: Option<PathBuf>,
    /// Generate the benchmark instead of loading it.
    #[arg(long)]
    pub generate: bool,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Also write the generated dataset here.
    #[arg(long)]
    pub save_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PncArgs {
    /// Hidden layers to perturb (0-based), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long = "M")]
    pub members: Option<usize>,
    #[arg(long = "K")]
    pub rank: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub bootstrap_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pnc: PncArgs,
    /// Keep the perturbations but skip the repair.
    #[arg(long)]
    pub uncorrected: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Lsq,
    Sensitivity,
    Sketch,
    Mixture,
    Conv,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Lsq => "lsq",
            Suite::Sensitivity => "sensitivity",
            Suite::Sketch => "sketch",
            Suite::Mixture => "mixture",
            Suite::Conv => "conv",
            Suite::All => "all",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Option<Suite>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pnc: PncArgs,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub fracs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Leave out the sigma = 0 reference cell.
    #[arg(long)]
    pub no_baseline: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 2 for numerical failures anywhere in the chain, else 1.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let numerical = e.chain().any(|c| c.downcast_ref::<pnc_core::Error>().is_some_and(|pe| pe.is_numerical()));
    if numerical {
        2
    } else {
        1
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, &file),
        Command::Build(a) => cmd_build(a, &file),
        Command::Diagnose(a) => cmd_diagnose(a, &file),
        Command::Verify(a) => cmd_verify(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Sweep(a) => cmd_sweep(a, &file),
    }
}

#[derive(Debug, Clone, Serialize)]
struct DataSource {
    file: Option<String>,
    generated: Option<(BenchConfig, u64)>,
}

fn load_data(a: &DataArgs, file: &FileConfig) -> Result<(ShiftedDataset, DataSource)> {
    if let Some(p) = &a.data {
        let d = ShiftedDataset::load(p).with_context(|| format!("loading dataset {}", p.display()))?;
        return Ok((d, DataSource { file: Some(p.display().to_string()), generated: None }));
    }
    if !a.generate {
        bail!(pnc_core::Error::InvalidConfig("pass --data PATH or --generate".into()));
    }
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        train_size: pick(a.train_size, &file.data.train_size, defaults.train_size),
        val_size: pick(None, &file.data.val_size, defaults.val_size),
        eval_size: pick(a.eval_size, &file.data.eval_size, defaults.eval_size),
        ..defaults
    };
    let seed = pick(a.data_seed, &file.data.seed, 0);
    let d = generate(&cfg, seed)?;
    Ok((d, DataSource { file: None, generated: Some((cfg, seed)) }))
}

fn load_model(path: &Path) -> Result<Arc<MlpModel>> {
    Ok(Arc::new(MlpModel::load(path).with_context(|| format!("loading model {}", path.display()))?))
}

/// Writes a JSON document with the effective run configuration added under
/// `run_config`; readers ignore the extra key.
fn write_with_echo(path: &Path, text: &str, echo: &impl Serialize) -> Result<()> {
    let mut doc: serde_json::Value = serde_json::from_str(text)?;
    doc["run_config"] = serde_json::to_value(echo)?;
    let mut out = serde_json::to_string_pretty(&doc)?;
    out.push('\n');
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn train_config(a: &TrainArgs, file: &FileConfig) -> Result<(TrainConfig, u64)> {
    let d = TrainConfig::default();
    let t = &file.train;
    let act = match a.activation.clone().or_else(|| t.activation.clone()) {
        Some(name) => Activation::parse(&name)?,
        None => d.activation,
    };
    let cfg = TrainConfig {
        hidden: pick(a.hidden.clone(), &t.hidden, d.hidden.clone()),
        activation: act,
        steps: pick(a.steps, &t.steps, d.steps),
        batch_size: pick(a.batch_size, &t.batch_size, d.batch_size),
        learning_rate: pick(a.learning_rate, &t.learning_rate, d.learning_rate),
        ..d
    };
    Ok((cfg, pick(a.seed, &t.seed, 0)))
}

fn cmd_train(a: &TrainArgs, file: &FileConfig) -> Result<i32> {
    let (data, source) = load_data(&a.data, file)?;
    let (cfg, seed) = train_config(a, file)?;
    let model = train_mlp(&data.train().inputs, &data.train().targets, &cfg, seed)?;
    let rmse = |x: &pnc_core::numerics::Matrix, y: &pnc_core::numerics::Matrix| {
        ((model.predict_batch(x) - y).norm_squared() / y.len() as f64).sqrt()
    };
    let (tr, va) = (data.train(), data.val());
    let mean = tr.targets.row_mean();
    let const_rmse =
        (0..va.len()).map(|i| (va.targets.row(i) - &mean).norm_squared()).sum::<f64>() / va.targets.len() as f64;
    println!("train_rmse {}", rmse(&tr.inputs, &tr.targets));
    println!("val_rmse {}", rmse(&va.inputs, &va.targets));
    println!("val_rmse_constant_baseline {}", const_rmse.sqrt());
    if let Some(p) = &a.save_data {
        data.save(p)?;
    }
    write_with_echo(
        &a.out,
        &model.to_text(),
        &json!({"command": "train", "train": cfg, "seed": seed, "data": source}),
    )?;
    Ok(0)
}

pub fn pnc_config(a: &PncArgs, file: &FileConfig, model: &MlpModel) -> PncConfig {
    let d = PncConfig::default().targeting_last_hidden(model);
    let p = &file.pnc;
    PncConfig {
        target_layers: pick(a.layers.clone(), &p.layers, d.target_layers),
        ensemble_size: pick(a.members, &p.ensemble_size, d.ensemble_size),
        rank: pick(a.rank, &p.rank, d.rank),
        scale: pick(a.sigma, &p.scale, d.scale),
        ridge: pick(a.lambda, &p.ridge, d.ridge),
        bootstrap_fraction: a.bootstrap_frac.or(p.bootstrap_fraction),
        seed: pick(a.seed, &p.seed, d.seed),
    }
}

fn cmd_build(a: &BuildArgs, file: &FileConfig) -> Result<i32> {
    let model = load_model(&a.model)?;
    let (data, source) = load_data(&a.data, file)?;
    let cfg = pnc_config(&a.pnc, file, &model);
    if cfg.scale == 0.0 {
        eprintln!("warning: sigma = 0, every member equals the base model");
    }
    let e = build_ensemble(model, &data.train().inputs, &cfg, !a.uncorrected)?;
    let (lo, hi) = conditioning_summary(&e);
    println!("members {}", e.len());
    println!("min_sigma_min {}", if e.is_corrected() { num(lo) } else { "n/a".into() });
    println!("max_sigma_min {}", if e.is_corrected() { num(hi) } else { "n/a".into() });
    write_with_echo(
        &a.out,
        &e.to_text(),
        &json!({"command": "build", "pnc": cfg, "corrected": !a.uncorrected, "data": source}),
    )?;
    Ok(0)
}

fn load_ensemble(path: &Path, model: Arc<MlpModel>) -> Result<PncEnsemble> {
    PncEnsemble::load(path, model).with_context(|| format!("loading ensemble {}", path.display()))
}

fn cmd_diagnose(a: &DiagnoseArgs, file: &FileConfig) -> Result<i32> {
    let model = load_model(&a.model)?;
    let e = load_ensemble(&a.ensemble, model)?;
    let (data, source) = load_data(&a.data, file)?;
    let names: Vec<String> = a.splits.clone().unwrap_or_else(|| EVAL_SPLITS.iter().map(|s| s.to_string()).collect());
    let splits = names.iter().map(|n| Ok((n.clone(), data.split(n)?.inputs.clone()))).collect::<Result<Vec<_>>>()?;
    let rows = diagnose(&e, &data.train().inputs, &splits)?;
    let mut t = CsvTable::new(&DIAGNOSTIC_COLUMNS);
    for r in &rows {
        t.push(vec![
            r.split.clone(),
            r.point.to_string(),
            num(r.leverage),
            num(r.mahalanobis),
            num(r.rho_mean),
            num(r.rho_max),
            num(r.sketch),
            num(r.eff_rank),
            num(r.disagreement),
        ]);
    }
    t.write(&a.out, &json!({"command": "diagnose", "pnc": e.config(), "splits": names, "data": source}))?;
    println!("rows {}", rows.len());
    Ok(0)
}

pub fn verify_rows(suite: Suite, seed: u64) -> Result<Vec<CheckRow>> {
    Ok(run_suite(suite.name(), seed)?)
}

fn cmd_verify(a: &VerifyArgs, file: &FileConfig) -> Result<i32> {
    let suite = match (a.suite, &file.verify.suite) {
        (Some(s), _) => s,
        (None, Some(name)) => <Suite as clap::ValueEnum>::from_str(name, true)
            .map_err(|_| pnc_core::Error::InvalidConfig(format!("unknown suite '{name}'")))?,
        (None, None) => Suite::All,
    };
    let seed = pick(a.seed, &file.verify.seed, 0);
    let rows = verify_rows(suite, seed)?;
    let mut t = CsvTable::new(&["suite", "criterion", "check", "value", "threshold", "passed"]);
    for r in &rows {
        t.push(vec![
            r.suite.into(),
            r.criterion.to_string(),
            r.name.clone(),
            num(r.value),
            num(r.threshold),
            r.passed.to_string(),
        ]);
        println!("{} {:<52} {:>12.4e} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.value, r.suite);
    }
    if let Some(p) = &a.out {
        t.write(p, &json!({"command": "verify", "suite": suite, "seed": seed}))?;
    }
    let failed: Vec<&CheckRow> = rows.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("all {} checks passed", rows.len());
        Ok(0)
    } else {
        for r in &failed {
            eprintln!("failed: {} ({} > {})", r.name, r.value, r.threshold);
        }
        Ok(2)
    }
}

fn eval_table(report: &pnc_core::ensemble_eval::EvalReport) -> CsvTable {
    let mut t = CsvTable::new(&["split", "metric", "value"]);
    for (s, m, v) in report.rows() {
        t.push(vec![s, m.into(), num(v)]);
    }
    t
}

fn cmd_eval(a: &EvalArgs, file: &FileConfig) -> Result<i32> {
    let model = load_model(&a.model)?;
    let e = load_ensemble(&a.ensemble, model.clone())?;
    let (data, source) = load_data(&a.data, file)?;
    let floor = floor_for(&model, &data)?;
    let report = evaluate(&e, &data, &["id", "near", "mid", "far"], &floor)?;
    for s in &report.splits {
        println!(
            "{:<5} rmse {:.6} nll {:.6} auroc {} spearman {}",
            s.split,
            s.rmse,
            s.nll,
            opt(s.auroc),
            opt(s.spearman)
        );
    }
    eval_table(&report)
        .write(&a.out, &json!({"command": "eval", "pnc": e.config(), "noise_floor": floor, "data": source}))?;
    Ok(0)
}

pub fn sweep_grid(a: &SweepArgs, file: &FileConfig) -> SweepGrid {
    let d = SweepGrid::default();
    let s = &file.sweep;
    SweepGrid {
        sigmas: pick(a.sigmas.clone(), &s.sigmas, d.sigmas),
        fractions: pick(a.fracs.clone(), &s.fractions, d.fractions),
        ridges: pick(a.lambdas.clone(), &s.ridges, d.ridges),
        include_baseline: if a.no_baseline { false } else { s.include_baseline.unwrap_or(d.include_baseline) },
    }
}

fn cmd_sweep(a: &SweepArgs, file: &FileConfig) -> Result<i32> {
    let model = load_model(&a.model)?;
    let (data, source) = load_data(&a.data, file)?;
    let template = pnc_config(&a.pnc, file, &model);
    let grid = sweep_grid(a, file);
    let out = sweep(model, &data, &template, &grid)?;
    let mut t = CsvTable::new(&["row", "sigma", "bootstrap_frac", "lambda", "val_nll", "far_nll", "error"]);
    for (i, c) in out.cells.iter().enumerate() {
        let far = if i == out.winner {
            out.winner_report.split("far").map(|s| s.nll)
        } else if c.sigma == 0.0 {
            out.baseline_report.as_ref().and_then(|r| r.split("far")).map(|s| s.nll)
        } else {
            None
        };
        t.push(vec![
            "cell".into(),
            num(c.sigma),
            opt(c.fraction),
            num(c.ridge),
            opt(c.val_nll),
            opt(far),
            c.error.clone().unwrap_or_default(),
        ]);
    }
    let w = &out.cells[out.winner];
    t.push(vec![
        "winner".into(),
        num(w.sigma),
        opt(w.fraction),
        num(w.ridge),
        opt(w.val_nll),
        opt(out.winner_report.split("far").map(|s| s.nll)),
        String::new(),
    ]);
    t.write(&a.out, &json!({"command": "sweep", "template": template, "grid": grid, "data": source}))?;
    println!("winner sigma {} frac {} lambda {} val_nll {}", w.sigma, opt(w.fraction), w.ridge, opt(w.val_nll));
    for s in &out.winner_report.splits {
        println!("  {:<5} rmse {:.6} nll {:.6} auroc {}", s.split, s.rmse, s.nll, opt(s.auroc));
    }
    if let Some(b) = &out.baseline_report {
        println!("baseline far_nll {}", opt(b.split("far").map(|s| s.nll)));
    }
    Ok(0)
}
