//! Experiment orchestration: train each (seed, mode), then evaluate every
//! (snr, method) cell.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::channel::feature_budget;
use crate::data::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalSettings, Metrics};
use crate::fir::{ImportanceVector, Policy};
use crate::model::{Mode, System, TaskSpec};
use crate::training::{
    compute_importance, init_rng, train_stage1, train_stage2, EpochLog, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub snr_db: f64,
    pub method: Policy,
    pub mode: Mode,
    pub budget: usize,
    pub rank1: f64,
    pub color_acc: f64,
    pub type_acc: f64,
    pub deep_fades: usize,
    /// Diagnostic for a failed cell; its metrics are NaN.
    #[serde(skip)]
    pub failure: Option<String>,
}

impl ResultRow {
    fn key_cmp(&self, other: &Self) -> Ordering {
        (self.seed, self.mode, self.method)
            .cmp(&(other.seed, other.mode, other.method))
            .then(self.snr_db.total_cmp(&other.snr_db))
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "rank1" => Some(self.rank1),
            "color_acc" => Some(self.color_acc),
            "type_acc" => Some(self.type_acc),
            _ => None,
        }
    }
}

/// Stable output order: seed, mode, method, snr.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(ResultRow::key_cmp);
}

/// A system after both training stages.
pub struct Trained {
    pub dataset: Dataset,
    pub system: System,
    pub importance: Vec<ImportanceVector>,
    pub log: Vec<EpochLog>,
    pub skipped_slots: usize,
}

pub fn train_config_for(cfg: &ExperimentConfig, seed: u64, mode: Mode) -> TrainConfig {
    TrainConfig {
        seed,
        mode,
        ..cfg.train.clone()
    }
}

/// Fresh, untrained system for one run.
pub fn build_system(cfg: &ExperimentConfig, seed: u64, mode: Mode) -> Result<System> {
    let data = cfg.dataset_for(seed);
    let tcfg = train_config_for(cfg, seed, mode);
    let tasks = TaskSpec::standard(&data, tcfg.task_weights())?;
    System::new(
        mode,
        data.pixels(),
        &cfg.model,
        &tasks,
        &mut init_rng(&tcfg, mode),
    )
}

/// Stage 1, importance, stage 2.
pub fn train_run(cfg: &ExperimentConfig, seed: u64, mode: Mode) -> Result<Trained> {
    let dataset = generate_dataset(&cfg.dataset_for(seed))?;
    let tcfg = train_config_for(cfg, seed, mode);
    let mut system = build_system(cfg, seed, mode)?;
    let stage1 = train_stage1(&mut system, &dataset, &cfg.channel, &tcfg)?;
    let importance = compute_importance(&system, &dataset, &cfg.channel, &tcfg)?;
    let stage2 = train_stage2(&mut system, &dataset, &cfg.channel, &tcfg, &importance)?;
    let mut log = stage1.epochs;
    log.extend(stage2.epochs);
    Ok(Trained {
        dataset,
        system,
        importance,
        log,
        skipped_slots: stage1.skipped_slots + stage2.skipped_slots,
    })
}

/// Rows for every (snr, method) in the config.
pub fn evaluate_grid(
    cfg: &ExperimentConfig,
    system: &System,
    dataset: &Dataset,
    importance: &[ImportanceVector],
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let settings = EvalSettings {
        passes: cfg.experiment.eval_passes,
        seed,
    };
    let mut rows = Vec::new();
    for &snr in &cfg.experiment.snr_grid_db {
        let channel = cfg.channel.with_snr(snr);
        for &method in &cfg.experiment.methods {
            let m = evaluate(system, dataset, &channel, method, importance, &settings)?;
            rows.push(row(seed, snr, method, system.mode, m));
        }
    }
    Ok(rows)
}

fn row(seed: u64, snr_db: f64, method: Policy, mode: Mode, m: Metrics) -> ResultRow {
    ResultRow {
        seed,
        snr_db,
        method,
        mode,
        budget: m.budget,
        rank1: m.rank1,
        color_acc: m.color_acc,
        type_acc: m.type_acc,
        deep_fades: m.deep_fades,
        failure: None,
    }
}

fn failed_rows(cfg: &ExperimentConfig, seed: u64, mode: Mode, err: &Error) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for &snr in &cfg.experiment.snr_grid_db {
        for &method in &cfg.experiment.methods {
            rows.push(ResultRow {
                seed,
                snr_db: snr,
                method,
                mode,
                budget: feature_budget(&cfg.channel.with_snr(snr), cfg.model.channel_len),
                rank1: f64::NAN,
                color_acc: f64::NAN,
                type_acc: f64::NAN,
                deep_fades: 0,
                failure: Some(err.to_string()),
            });
        }
    }
    rows
}

/// Outcome of one (seed, mode) job.
pub struct JobReport {
    pub seed: u64,
    pub mode: Mode,
    pub rows: Vec<ResultRow>,
    pub log: Vec<EpochLog>,
    pub importance: Vec<ImportanceVector>,
    pub failure: Option<String>,
}

fn run_job(cfg: &ExperimentConfig, seed: u64, mode: Mode) -> JobReport {
    let outcome = train_run(cfg, seed, mode).and_then(|t| {
        Ok((
            evaluate_grid(cfg, &t.system, &t.dataset, &t.importance, seed)?,
            t,
        ))
    });
    match outcome {
        Ok((rows, t)) => {
            log::info!(
                "seed {seed} {mode}: {} rows, {} skipped slots",
                rows.len(),
                t.skipped_slots
            );
            JobReport {
                seed,
                mode,
                rows,
                log: t.log,
                importance: t.importance,
                failure: None,
            }
        }
        Err(e) => {
            log::error!("seed {seed} {mode} failed: {e}");
            JobReport {
                seed,
                mode,
                rows: failed_rows(cfg, seed, mode, &e),
                log: Vec::new(),
                importance: Vec::new(),
                failure: Some(e.to_string()),
            }
        }
    }
}

pub struct SweepReport {
    /// Sorted by (seed, mode, method, snr).
    pub rows: Vec<ResultRow>,
    pub jobs: Vec<JobReport>,
}

/// Every (seed, mode) job, run concurrently on up to `experiment.workers`
/// threads. Failed jobs yield NaN rows rather than aborting the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let jobs: Vec<(u64, Mode)> = cfg
        .seeds()
        .into_iter()
        .flat_map(|s| cfg.experiment.modes.iter().map(move |&m| (s, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.workers)
        .build()
        .map_err(|e| Error::contract(format!("cannot start worker pool: {e}")))?;
    let mut reports: Vec<JobReport> =
        pool.install(|| jobs.par_iter().map(|&(s, m)| run_job(cfg, s, m)).collect());
    reports.sort_by_key(|r| (r.seed, r.mode));
    let mut rows: Vec<ResultRow> = reports
        .iter()
        .flat_map(|r| r.rows.iter().cloned())
        .collect();
    sort_rows(&mut rows);
    Ok(SweepReport {
        rows,
        jobs: reports,
    })
}
