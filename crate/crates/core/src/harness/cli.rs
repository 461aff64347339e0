//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::output::{emit_csv, emit_plot_series, write_epoch_log};
use super::sweep::{build_system, evaluate_grid, run_sweep, train_config_for};
use crate::data::generate_dataset;
use crate::error::{Error, Result};
use crate::fir::{ImportanceVector, Policy};
use crate::model::Mode;
use crate::training::{compute_importance, train_stage1, train_stage2};

#[derive(Debug, Parser)]
#[command(
    name = "semlink",
    version,
    about = "Multi-task semantic link simulator with feature importance ranking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config in TOML; built-in defaults when omitted
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed (first seed of a sweep)
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,

    /// Evaluate at this SNR only, in dB
    #[arg(long, global = true, value_name = "DB", allow_negative_numbers = true)]
    pub snr: Option<f64>,

    /// Selection policy: fir, random, sequential or full
    #[arg(long, global = true, value_name = "NAME")]
    pub method: Option<Policy>,

    /// Coding mode
    #[arg(long, global = true, value_name = "mtc|stc")]
    pub mode: Option<Mode>,

    /// Output root; runs go to <out>/run-<hash>-s<seed>/
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Stage 1: train with complete transmission
    Train,
    /// Compute and store the feature importance vector from a stage-1 checkpoint
    Rank,
    /// Stage 2: retrain with the slot's feature budget, top-ranked features first
    Retrain,
    /// Full experiment: every seed, mode, SNR and method
    Sweep,
    /// Evaluate a stage-2 checkpoint over the SNR grid
    Eval,
}

struct Context {
    cfg: ExperimentConfig,
    run_dir: PathBuf,
    mode: Mode,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.experiment.out_dir = out.clone();
        }
        let run_dir = cfg.run_dir();
        if let Some(mode) = cli.mode {
            cfg.train.mode = mode;
            cfg.experiment.modes = vec![mode];
        }
        if let Some(method) = cli.method {
            cfg.experiment.methods = vec![method];
        }
        if let Some(snr) = cli.snr {
            cfg.channel.snr_db = snr;
            cfg.experiment.snr_grid_db = vec![snr];
        }
        cfg.validate()?;
        std::fs::create_dir_all(&run_dir)?;
        std::fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
        let mode = cfg.train.mode;
        Ok(Context { cfg, run_dir, mode })
    }

    fn mode_dir(&self) -> Result<PathBuf> {
        let dir = self.run_dir.join(self.mode.name());
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn importance_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("importance-{k}.txt"))
}

fn train(ctx: &Context) -> Result<()> {
    let seed = ctx.cfg.train.seed;
    let dir = ctx.mode_dir()?;
    let data_cfg = ctx.cfg.dataset_for(seed);
    let data = generate_dataset(&data_cfg)?;
    let mut system = build_system(&ctx.cfg, seed, ctx.mode)?;
    let outcome = train_stage1(
        &mut system,
        &data,
        &ctx.cfg.channel,
        &train_config_for(&ctx.cfg, seed, ctx.mode),
    )?;
    write_epoch_log(&outcome.epochs, &dir.join("stage1_log.csv"))?;
    let path = dir.join("stage1.json");
    Checkpoint::new(1, seed, data_cfg, system).save(&path)?;
    if let Some(last) = outcome.epochs.last() {
        println!("stage 1 done: L_E2E {:.4}", last.mean.e2e);
    }
    println!("{}", path.display());
    Ok(())
}

fn rank(ctx: &Context) -> Result<()> {
    let dir = ctx.mode_dir()?;
    let ckpt = Checkpoint::load(&dir.join("stage1.json"))?;
    let data = generate_dataset(&ckpt.dataset)?;
    let importance = compute_importance(
        &ckpt.system,
        &data,
        &ctx.cfg.channel,
        &train_config_for(&ctx.cfg, ckpt.seed, ctx.mode),
    )?;
    for (k, s) in importance.iter().enumerate() {
        let path = importance_path(&dir, k);
        s.write_to(&path)?;
        println!("{}: {:?}", path.display(), s.priority_order());
    }
    Ok(())
}

fn load_importance(dir: &Path, pipelines: usize) -> Result<Vec<ImportanceVector>> {
    (0..pipelines)
        .map(|k| ImportanceVector::read_from(&importance_path(dir, k)))
        .collect()
}

fn retrain(ctx: &Context) -> Result<()> {
    let dir = ctx.mode_dir()?;
    let ckpt = Checkpoint::load(&dir.join("stage1.json"))?;
    let importance = load_importance(&dir, ckpt.system.pipelines.len())?;
    let data = generate_dataset(&ckpt.dataset)?;
    let mut system = ckpt.system;
    let tcfg = train_config_for(&ctx.cfg, ckpt.seed, ctx.mode);
    let outcome = train_stage2(&mut system, &data, &ctx.cfg.channel, &tcfg, &importance)?;
    write_epoch_log(&outcome.epochs, &dir.join("stage2_log.csv"))?;
    let path = dir.join("stage2.json");
    Checkpoint::new(2, ckpt.seed, ckpt.dataset, system).save(&path)?;
    if outcome.skipped_slots > 0 {
        println!("{} zero-budget slots redrawn", outcome.skipped_slots);
    }
    println!("{}", path.display());
    Ok(())
}

fn eval(ctx: &Context) -> Result<()> {
    let dir = ctx.mode_dir()?;
    let ckpt = Checkpoint::load(&dir.join("stage2.json"))?;
    let importance = load_importance(&dir, ckpt.system.pipelines.len())?;
    let data = generate_dataset(&ckpt.dataset)?;
    let rows = evaluate_grid(&ctx.cfg, &ckpt.system, &data, &importance, ckpt.seed)?;
    let path = dir.join("eval.csv");
    emit_csv(&rows, &path)?;
    print!("{}", std::fs::read_to_string(&path)?);
    Ok(())
}

fn sweep(ctx: &Context) -> Result<()> {
    let report = run_sweep(&ctx.cfg)?;
    let logs = ctx.run_dir.join("logs");
    std::fs::create_dir_all(&logs)?;
    let mut failures = String::new();
    for job in &report.jobs {
        let stem = format!("s{}-{}", job.seed, job.mode);
        if let Some(msg) = &job.failure {
            eprintln!("seed {} {}: {msg}", job.seed, job.mode);
            failures.push_str(&format!("{stem}: {msg}\n"));
            continue;
        }
        write_epoch_log(&job.log, &logs.join(format!("{stem}.csv")))?;
        for (k, s) in job.importance.iter().enumerate() {
            s.write_to(&logs.join(format!("{stem}-importance-{k}.txt")))?;
        }
    }
    if !failures.is_empty() {
        std::fs::write(ctx.run_dir.join("failures.txt"), &failures)?;
    }
    let csv = ctx.run_dir.join("results.csv");
    emit_csv(&report.rows, &csv)?;
    emit_plot_series(&report.rows, &ctx.run_dir.join("series"))?;
    println!("{}", csv.display());
    if report.jobs.iter().all(|j| j.failure.is_some()) {
        return Err(Error::contract("every training job failed"));
    }
    Ok(())
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 for usage or validation errors, 2 for runtime failures.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = Context::new(&cli).and_then(|ctx| match cli.command {
        Command::Train => train(&ctx),
        Command::Rank => rank(&ctx),
        Command::Retrain => retrain(&ctx),
        Command::Sweep => sweep(&ctx),
        Command::Eval => eval(&ctx),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
