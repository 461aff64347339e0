//! Test-time evaluation of a trained system over a fading channel.
//!
//! Every test sample is sent in its own slot: a fresh fading coefficient and
//! fresh noise per sample and pass. Channel draws depend only on the seed,
//! SNR, pass and pipeline, so all selection policies see the same channel.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::channel::{
    equalize, feature_budget, noise_from, noise_sigma, power_normalize, split_budget, transmit,
    ChannelConfig, ChannelRealization,
};
use crate::data::{stack_images, Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::fir::{
    apply_selection, scatter_received, select_full, select_random, select_sequential, select_top_b,
    ImportanceVector, Policy, SelectionPattern,
};
use crate::link::draw_h;
use crate::metrics::{classification_accuracy, rank1_accuracy};
use crate::model::{Pipeline, System, TaskKind};
use crate::rng::{rng_from, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rank1: f64,
    pub color_acc: f64,
    pub type_acc: f64,
    pub deep_fades: usize,
    /// Feature budget of the slot at this SNR.
    pub budget: usize,
}

impl Metrics {
    pub fn task(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Reid => self.rank1,
            TaskKind::Color => self.color_acc,
            TaskKind::Type => self.type_acc,
        }
    }
}

/// Averages over `passes` sweeps of the query and gallery splits.
#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub passes: usize,
    pub seed: u64,
}

fn to_complex(row: &[f64]) -> Vec<Complex64> {
    row.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

fn pattern_for(
    policy: Policy,
    importance: Option<&ImportanceVector>,
    len: usize,
    budget: usize,
    random_seed: u64,
) -> Result<SelectionPattern> {
    match policy {
        Policy::Fir => select_top_b(
            importance.ok_or_else(|| Error::contract("fir needs an importance vector"))?,
            budget,
        ),
        Policy::Random => select_random(len, budget, random_seed),
        Policy::Sequential => select_sequential(len, budget),
        Policy::Full => Ok(select_full(len)),
    }
}

struct PassOutput {
    e_hat: Tensor,
    probs: Vec<Tensor>,
    deep_fades: usize,
}

/// Sends every row of `f` through its own slot and decodes the batch.
#[allow(clippy::too_many_arguments)]
fn one_pass(
    pipeline: &Pipeline,
    f: &Tensor,
    channel: &ChannelConfig,
    policy: Policy,
    importance: Option<&ImportanceVector>,
    budget: usize,
    settings: &EvalSettings,
    pass: usize,
    index: usize,
) -> Result<PassOutput> {
    let len = pipeline.channel_len();
    let key = [channel.snr_db.to_bits(), pass as u64, index as u64];
    let mut chan_rng = rng_from(
        settings.seed,
        &[stream::EVAL_CHANNEL, key[0], key[1], key[2]],
    );
    let mut sel_rng = rng_from(
        settings.seed,
        &[stream::EVAL_SELECTION, key[0], key[1], key[2]],
    );
    let sigma2 = noise_sigma(channel.snr_db, channel.avg_power);
    let fixed = match policy {
        Policy::Random => None,
        _ => Some(pattern_for(policy, importance, len, budget, 0)?),
    };

    let mut deep_fades = 0;
    let mut received = Vec::with_capacity(f.numel());
    for r in 0..f.rows() {
        let h = draw_h(&mut chan_rng, channel.rician_factor, &mut deep_fades);
        let noise = noise_from(&mut chan_rng, len, sigma2);
        let random_seed: u64 = sel_rng.random();
        let drawn;
        let pattern = match &fixed {
            Some(p) => p,
            None => {
                drawn = pattern_for(policy, importance, len, budget, random_seed)?;
                &drawn
            }
        };
        let z = power_normalize(
            &apply_selection(&to_complex(f.row(r)), pattern)?,
            channel.avg_power,
        )?;
        let slot = ChannelRealization {
            h,
            noise: noise[..pattern.len()].to_vec(),
            seed: 0,
        };
        let z_eq = equalize(&transmit(&z, &slot)?, h)?;
        received.extend(
            scatter_received(&z_eq, pattern, len)?
                .iter()
                .flat_map(|c| [c.re, c.im]),
        );
    }

    let mut g = Graph::new();
    let bound = pipeline.bind(&mut g);
    let z = g.leaf(Tensor::new(vec![f.rows(), 2 * len], received)?);
    let e_hat = pipeline.jsc_decode(&mut g, &bound, z)?;
    let probs = pipeline.task_heads(&mut g, &bound, e_hat)?;
    Ok(PassOutput {
        e_hat: g.value(e_hat).clone(),
        probs: probs.iter().map(|&p| g.value(p).clone()).collect(),
        deep_fades,
    })
}

/// Rank-1 over query against gallery on `ê`, and color/type accuracy over
/// both splits, each averaged over passes.
pub fn evaluate(
    system: &System,
    data: &Dataset,
    channel: &ChannelConfig,
    policy: Policy,
    importance: &[ImportanceVector],
    settings: &EvalSettings,
) -> Result<Metrics> {
    channel.validate()?;
    if settings.passes == 0 {
        return Err(Error::config("experiment.eval_passes", "must be >= 1"));
    }
    if policy == Policy::Fir && importance.len() != system.pipelines.len() {
        return Err(Error::contract(format!(
            "{} importance vectors for {} pipelines",
            importance.len(),
            system.pipelines.len()
        )));
    }
    let test: Vec<&SyntheticSample> = data.query.iter().chain(&data.gallery).collect();
    let nq = data.query.len();
    let x = stack_images(test.iter().copied())?;
    let qids: Vec<usize> = data.query.iter().map(|s| s.identity).collect();
    let gids: Vec<usize> = data.gallery.iter().map(|s| s.identity).collect();
    let query_rows: Vec<usize> = (0..nq).collect();
    let gallery_rows: Vec<usize> = (nq..test.len()).collect();

    let parts = system.pipelines.len();
    let len = system.pipelines[0].channel_len();
    let budgets = split_budget(channel, len, parts);
    let mut metrics = Metrics {
        rank1: 0.0,
        color_acc: 0.0,
        type_acc: 0.0,
        deep_fades: 0,
        budget: feature_budget(channel, len),
    };
    let per_pass = 1.0 / settings.passes as f64;

    for (k, pipeline) in system.pipelines.iter().enumerate() {
        let budget = if policy == Policy::Full {
            pipeline.channel_len()
        } else {
            budgets[k]
        };
        if budget == 0 {
            log::warn!(
                "pipeline {k} has no slots at {} dB; its tasks fail",
                channel.snr_db
            );
            continue;
        }
        let f = pipeline.encode_to_channel(&x)?;
        for pass in 0..settings.passes {
            let out = one_pass(
                pipeline,
                &f,
                channel,
                policy,
                importance.get(k),
                budget,
                settings,
                pass,
                k,
            )?;
            metrics.deep_fades += out.deep_fades;
            for (t, spec) in pipeline.tasks.iter().enumerate() {
                let score = match spec.kind {
                    TaskKind::Reid => rank1_accuracy(
                        &out.e_hat.select_rows(&query_rows),
                        &out.e_hat.select_rows(&gallery_rows),
                        &qids,
                        &gids,
                    )?,
                    kind => {
                        let labels: Vec<usize> = test.iter().map(|s| kind.label(s)).collect();
                        classification_accuracy(&out.probs[t], &labels)?
                    }
                };
                match spec.kind {
                    TaskKind::Reid => metrics.rank1 += score * per_pass,
                    TaskKind::Color => metrics.color_acc += score * per_pass,
                    TaskKind::Type => metrics.type_acc += score * per_pass,
                }
            }
        }
    }
    Ok(metrics)
}
