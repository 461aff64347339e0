//! Two-stage end-to-end training.
//!
//! Stage 1 trains every pipeline with complete transmission (`B = L`) over a
//! channel whose SNR is redrawn per batch. Stage 2 retrains with the slot's
//! feature budget, sending the top-`B` symbols of the importance vector.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{total_loss, CrossEntropyForm, LossConfig, LossReport};
use crate::autodiff::{AdamConfig, Graph, Tensor};
use crate::channel::{noise_sigma, split_budget, ChannelConfig};
use crate::data::{stack_images, Dataset, DatasetConfig, SyntheticSample};
use crate::error::{Error, Result};
use crate::fir::{
    combine_importance, select_full, select_random, select_sequential, select_top_b,
    task_sensitivity, ImportanceVector, Policy, SelectionPattern, SensitivityMode,
};
use crate::link::{run_pipeline, LinkDraw, NoiselessLink};
use crate::model::{Mode, Pipeline, System, TaskKind};
use crate::rng::{derive_seed, rng_from, stream, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Views per identity in a batch; `batch_size / views_per_batch`
    /// identities are drawn.
    pub views_per_batch: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub triplet_margin: f64,
    pub weight_reid: f64,
    pub weight_color: f64,
    pub weight_type: f64,
    pub mode: Mode,
    pub seed: u64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Halve the learning rate after each third of a stage.
    pub lr_decay: bool,
    pub cross_entropy: CrossEntropyForm,
    pub sensitivity: SensitivityMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 32,
            views_per_batch: 4,
            epochs_stage1: 30,
            epochs_stage2: 20,
            triplet_margin: 0.3,
            weight_reid: 1.0,
            weight_color: 0.125,
            weight_type: 0.125,
            mode: Mode::Mtc,
            seed: 0,
            snr_min_db: -6.0,
            snr_max_db: 8.0,
            lr_decay: true,
            cross_entropy: CrossEntropyForm::Binary,
            sensitivity: SensitivityMode::Magnitude,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &DatasetConfig) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(self.triplet_margin > 0.0) {
            return Err(Error::config("train.triplet_margin", "must be > 0"));
        }
        for (field, w) in [
            ("train.weight_reid", self.weight_reid),
            ("train.weight_color", self.weight_color),
            ("train.weight_type", self.weight_type),
        ] {
            if !(w >= 0.0) {
                return Err(Error::config(field, "must be >= 0"));
            }
        }
        if !(self.snr_min_db <= self.snr_max_db)
            || !self.snr_min_db.is_finite()
            || !self.snr_max_db.is_finite()
        {
            return Err(Error::config(
                "train.snr_min_db",
                "need finite snr_min_db <= snr_max_db",
            ));
        }
        if self.views_per_batch < 2 {
            return Err(Error::config(
                "train.views_per_batch",
                "triplet mining needs at least 2 views",
            ));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.views_per_batch) {
            return Err(Error::config(
                "train.batch_size",
                format!(
                    "must be a positive multiple of views_per_batch = {}",
                    self.views_per_batch
                ),
            ));
        }
        let ids = self.batch_size / self.views_per_batch;
        if ids < 2 || ids > data.num_identities {
            return Err(Error::config(
                "train.batch_size",
                format!(
                    "needs between 2 and {} identities per batch, got {ids}",
                    data.num_identities
                ),
            ));
        }
        if self.views_per_batch > data.train_views() {
            return Err(Error::config(
                "train.views_per_batch",
                format!("only {} training views per identity", data.train_views()),
            ));
        }
        Ok(())
    }

    pub fn task_weights(&self) -> [f64; 3] {
        [self.weight_reid, self.weight_color, self.weight_type]
    }

    fn adam(&self, epoch: usize, epochs: usize) -> AdamConfig {
        let mut lr = self.learning_rate;
        if self.lr_decay {
            let period = (epochs / 3).max(1);
            lr *= 0.5f64.powi((epoch / period).min(2) as i32);
        }
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Per-epoch means for one pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub pipeline: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean: LossReport,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "stage,pipeline,epoch,lr,l_e2e,l_t,l_ch,l_reid,l_color,l_type,wall_s";

    pub fn csv_line(&self) -> String {
        let m = &self.mean;
        format!(
            "{},{},{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.stage,
            self.pipeline,
            self.epoch,
            self.learning_rate,
            m.e2e,
            m.task,
            m.channel,
            m.reid,
            m.color,
            m.type_,
            self.wall_seconds
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// Every batch's losses, in training order.
    pub batches: Vec<LossReport>,
    pub epochs: Vec<EpochLog>,
    /// Batches redrawn because the drawn SNR gave a zero budget.
    pub skipped_slots: usize,
    pub deep_fades: usize,
}

/// Identity-balanced batches: `P` identities times `K` views each.
struct PkSampler {
    by_identity: Vec<Vec<usize>>,
    identities: usize,
    views: usize,
}

impl PkSampler {
    fn new(samples: &[SyntheticSample], batch_size: usize, views: usize) -> Result<Self> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        let by_identity: Vec<Vec<usize>> = map.into_values().filter(|v| v.len() >= views).collect();
        let identities = batch_size / views;
        if by_identity.len() < identities {
            return Err(Error::contract(format!(
                "need {identities} identities with {views} views, found {}",
                by_identity.len()
            )));
        }
        Ok(PkSampler {
            by_identity,
            identities,
            views,
        })
    }

    fn sample(&self, rng: &mut SimRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.identities * self.views);
        for id in rand::seq::index::sample(rng, self.by_identity.len(), self.identities) {
            let pool = &self.by_identity[id];
            for v in rand::seq::index::sample(rng, pool.len(), self.views) {
                out.push(pool[v]);
            }
        }
        out
    }
}

/// How stage 2 picks the transmitted symbols for each batch.
enum Selector<'a> {
    Full,
    Ranked(&'a ImportanceVector),
    Sequential,
    Random,
}

impl Selector<'_> {
    fn pattern(&self, len: usize, budget: usize, rng: &mut SimRng) -> Result<SelectionPattern> {
        match self {
            Selector::Full => Ok(select_full(len)),
            Selector::Ranked(s) => select_top_b(s, budget),
            Selector::Sequential => select_sequential(len, budget),
            Selector::Random => select_random(len, budget, rng.random()),
        }
    }
}

const MAX_SLOT_REDRAWS: usize = 10_000;

struct StageRun<'a> {
    stage: u8,
    epochs: usize,
    data: &'a Dataset,
    channel: &'a ChannelConfig,
    cfg: &'a TrainConfig,
}

impl StageRun<'_> {
    fn train_pipeline(
        &self,
        pipeline: &mut Pipeline,
        index: usize,
        parts: usize,
        selector: &Selector<'_>,
        outcome: &mut TrainOutcome,
    ) -> Result<()> {
        let cfg = self.cfg;
        if !pipeline.params.all_finite() {
            return Err(Error::contract(format!(
                "pipeline {index} starts with NaN or infinite parameters"
            )));
        }
        let train_x = stack_images(&self.data.train)?;
        let sampler = PkSampler::new(&self.data.train, cfg.batch_size, cfg.views_per_batch)?;
        let batches_per_epoch = (self.data.train.len() / cfg.batch_size).max(1);
        let stage = u64::from(self.stage);
        let mut batch_rng = rng_from(cfg.seed, &[stream::BATCHES, stage, index as u64]);
        let mut chan_rng = rng_from(cfg.seed, &[stream::TRAIN_CHANNEL, stage, index as u64]);
        let loss_cfg = LossConfig {
            triplet_margin: cfg.triplet_margin,
            cross_entropy: cfg.cross_entropy,
            unit_weights: parts > 1,
        };
        let len = pipeline.channel_len();

        for epoch in 0..self.epochs {
            let start = Instant::now();
            let adam = cfg.adam(epoch, self.epochs);
            let first = outcome.batches.len();
            for _ in 0..batches_per_epoch {
                let rows = sampler.sample(&mut batch_rng);
                let batch: Vec<&SyntheticSample> =
                    rows.iter().map(|&i| &self.data.train[i]).collect();
                let x = train_x.select_rows(&rows);

                let mut redraws = 0;
                let (snr, budget) = loop {
                    let snr = chan_rng.random_range(cfg.snr_min_db..=cfg.snr_max_db);
                    let budget = match selector {
                        Selector::Full => len,
                        _ => split_budget(&self.channel.with_snr(snr), len, parts)[index],
                    };
                    if budget > 0 {
                        break (snr, budget);
                    }
                    redraws += 1;
                    outcome.skipped_slots += 1;
                    if redraws > MAX_SLOT_REDRAWS {
                        return Err(Error::contract(
                            "training SNR range never yields a non-zero feature budget",
                        ));
                    }
                };
                let pattern = selector.pattern(len, budget, &mut chan_rng)?;
                let draw = LinkDraw::block(
                    &mut chan_rng,
                    rows.len(),
                    budget,
                    self.channel.rician_factor,
                    noise_sigma(snr, self.channel.avg_power),
                );
                outcome.deep_fades += draw.deep_fades;
                let report = train_step(
                    pipeline,
                    &x,
                    &batch,
                    &pattern,
                    &draw,
                    self.channel.avg_power,
                    &loss_cfg,
                    &adam,
                )?;
                outcome.batches.push(report);
            }
            outcome.epochs.push(EpochLog {
                stage: self.stage,
                pipeline: index,
                epoch,
                learning_rate: adam.lr,
                mean: mean_report(&outcome.batches[first..]),
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport {
        weights: reports.first().map_or([0.0; 3], |r| r.weights),
        ..Default::default()
    };
    for r in reports {
        m.e2e += r.e2e / n;
        m.task += r.task / n;
        m.channel += r.channel / n;
        m.reid += r.reid / n;
        m.color += r.color / n;
        m.type_ += r.type_ / n;
    }
    m
}

pub fn batch_labels(pipeline: &Pipeline, batch: &[&SyntheticSample]) -> Vec<Vec<usize>> {
    pipeline
        .tasks
        .iter()
        .map(|t| batch.iter().map(|s| t.kind.label(s)).collect())
        .collect()
}

/// One forward/backward pass and Adam update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    pipeline: &mut Pipeline,
    x: &Tensor,
    batch: &[&SyntheticSample],
    pattern: &SelectionPattern,
    draw: &LinkDraw,
    avg_power: f64,
    loss_cfg: &LossConfig,
    adam: &AdamConfig,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let bound = pipeline.bind(&mut g);
    let xv = g.leaf(x.clone());
    let out = run_pipeline(&mut g, pipeline, &bound, xv, pattern, draw, avg_power)?;
    let labels = batch_labels(pipeline, batch);
    let ids: Vec<usize> = batch.iter().map(|s| TaskKind::Reid.label(s)).collect();
    let terms = total_loss(
        &mut g, pipeline, out.e, out.e_hat, &out.probs, &labels, &ids, loss_cfg,
    )?;
    if !g.scalar(terms.e2e).is_finite() {
        return Err(g.first_non_finite().unwrap_or(Error::NonFinite {
            op: "loss",
            node: terms.e2e.index(),
        }));
    }
    g.backward(terms.e2e)?;
    let grads = pipeline.params.collect_grads(&g, bound.vars());
    if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
        let name = pipeline
            .params
            .iter()
            .nth(bad)
            .map_or("?", |(n, _)| n)
            .to_string();
        return Err(Error::contract(format!(
            "non-finite gradient for parameter `{name}`"
        )));
    }
    pipeline.params.adam_step(&grads, adam)?;
    Ok(terms.report(&g))
}

/// Stage 1: complete transmission, SNR redrawn per batch.
pub fn train_stage1(
    system: &mut System,
    data: &Dataset,
    channel: &ChannelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(&data.config)?;
    let run = StageRun {
        stage: 1,
        epochs: cfg.epochs_stage1,
        data,
        channel,
        cfg,
    };
    let parts = system.pipelines.len();
    let mut outcome = TrainOutcome::default();
    for (k, p) in system.pipelines.iter_mut().enumerate() {
        run.train_pipeline(p, k, parts, &Selector::Full, &mut outcome)?;
    }
    Ok(outcome)
}

/// Stage 2 with importance-ranked selection, one importance vector per pipeline.
pub fn train_stage2(
    system: &mut System,
    data: &Dataset,
    channel: &ChannelConfig,
    cfg: &TrainConfig,
    importance: &[ImportanceVector],
) -> Result<TrainOutcome> {
    train_stage2_with(system, data, channel, cfg, Policy::Fir, importance)
}

/// Stage 2 using any selection policy; `importance` is only read for `fir`.
pub fn train_stage2_with(
    system: &mut System,
    data: &Dataset,
    channel: &ChannelConfig,
    cfg: &TrainConfig,
    policy: Policy,
    importance: &[ImportanceVector],
) -> Result<TrainOutcome> {
    cfg.validate(&data.config)?;
    if policy == Policy::Fir && importance.len() != system.pipelines.len() {
        return Err(Error::contract(format!(
            "{} importance vectors for {} pipelines",
            importance.len(),
            system.pipelines.len()
        )));
    }
    let run = StageRun {
        stage: 2,
        epochs: cfg.epochs_stage2,
        data,
        channel,
        cfg,
    };
    let parts = system.pipelines.len();
    let mut outcome = TrainOutcome::default();
    for (k, p) in system.pipelines.iter_mut().enumerate() {
        if policy == Policy::Fir && importance[k].len() != p.channel_len() {
            return Err(Error::contract("importance vector length differs from L"));
        }
        let selector = match policy {
            Policy::Fir => Selector::Ranked(&importance[k]),
            Policy::Random => Selector::Random,
            Policy::Sequential => Selector::Sequential,
            Policy::Full => Selector::Full,
        };
        run.train_pipeline(p, k, parts, &selector, &mut outcome)?;
    }
    Ok(outcome)
}

/// Population-level importance per pipeline from the calibration split,
/// differentiating through a noiseless complete-transmission link.
pub fn compute_importance(
    system: &System,
    data: &Dataset,
    channel: &ChannelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<ImportanceVector>> {
    let x = stack_images(&data.calibration)?;
    system
        .pipelines
        .iter()
        .map(|p| {
            let model = NoiselessLink {
                pipeline: p,
                avg_power: channel.avg_power,
            };
            let sens = (0..p.tasks.len())
                .map(|k| task_sensitivity(&model, &x, k, cfg.sensitivity))
                .collect::<Result<Vec<_>>>()?;
            let weights: Vec<f64> = match system.mode {
                Mode::Mtc => p.tasks.iter().map(|t| t.weight).collect(),
                Mode::Stc => vec![1.0; p.tasks.len()],
            };
            combine_importance(&sens, &weights)
        })
        .collect()
}

/// Seed for the model initialisation of a run.
pub fn init_rng(cfg: &TrainConfig, mode: Mode) -> SimRng {
    rng_from(derive_seed(cfg.seed, &[stream::INIT]), &[mode as u64])
}
