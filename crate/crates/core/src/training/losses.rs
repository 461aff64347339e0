//! Loss terms: cross-entropy, batch-hard triplet, channel MSE, and the
//! weighted end-to-end total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Pipeline, TaskKind};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossEntropyForm {
    /// `-Σ_k [y_k log ŷ_k + (1 - y_k) log(1 - ŷ_k)]` over one-hot `y`.
    #[default]
    Binary,
    /// `-log ŷ_label`.
    Categorical,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[r * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Batch mean of the per-row cross-entropy.
pub fn cross_entropy(
    g: &mut Graph,
    probs: Var,
    labels: &[usize],
    form: CrossEntropyForm,
) -> Result<Var> {
    let (rows, classes) = (g.value(probs).rows(), g.value(probs).cols());
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: g.value(probs).shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let y = one_hot(labels, classes)?;
    let clamped = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(clamped);
    let yv = g.leaf(y.clone());
    let mut per_entry = g.mul(yv, log_p)?;
    if form == CrossEntropyForm::Binary {
        let one_minus_p = g.affine(clamped, -1.0, 1.0);
        let log_q = g.log(one_minus_p);
        let complement = y.data().iter().map(|v| 1.0 - v).collect();
        let cv = g.leaf(Tensor::new(y.shape().to_vec(), complement)?);
        let neg_part = g.mul(cv, log_q)?;
        per_entry = g.add(per_entry, neg_part)?;
    }
    let total = g.sum(per_entry);
    Ok(g.affine(total, -1.0 / rows as f64, 0.0))
}

/// Hardest positive and hardest negative per anchor, by Euclidean distance.
/// Ties go to the lowest index.
pub fn hard_pairs(dist: &Tensor, ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = ids.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for a in 0..n {
        let row = dist.row(a);
        let hardest_pos =
            (0..n)
                .filter(|&j| j != a && ids[j] == ids[a])
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                });
        let hardest_neg =
            (0..n)
                .filter(|&j| ids[j] != ids[a])
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] <= row[j] => Some(b),
                    _ => Some(j),
                });
        match (hardest_pos, hardest_neg) {
            (Some(p), Some(q)) => {
                pos.push(p);
                neg.push(q);
            }
            _ => {
                return Err(Error::contract(format!(
                    "triplet mining needs a positive and a negative for every anchor (anchor {a}, id {})",
                    ids[a]
                )))
            }
        }
    }
    Ok((pos, neg))
}

/// `mean_a max(max d_ap - min d_an + margin, 0)`.
pub fn hard_triplet(g: &mut Graph, features: Var, ids: &[usize], margin: f64) -> Result<Var> {
    let n = g.value(features).rows();
    if ids.len() != n {
        return Err(Error::Shape {
            op: "hard_triplet",
            lhs: g.value(features).shape().to_vec(),
            rhs: vec![ids.len()],
        });
    }
    let dist = g.pairwise_dist(features);
    let (pos, neg) = hard_pairs(g.value(dist), ids)?;
    let pos_flat: Vec<usize> = pos.iter().enumerate().map(|(a, &p)| a * n + p).collect();
    let neg_flat: Vec<usize> = neg.iter().enumerate().map(|(a, &q)| a * n + q).collect();
    let d_ap = g.gather(dist, &pos_flat)?;
    let d_an = g.gather(dist, &neg_flat)?;
    let gap = g.sub(d_ap, d_an)?;
    let shifted = g.affine(gap, 1.0, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// Mean squared error between `e` and `ê` over features and batch.
pub fn channel_loss(g: &mut Graph, e: Var, e_hat: Var) -> Result<Var> {
    let diff = g.sub(e, e_hat)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Scalar loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub e2e: f64,
    pub task: f64,
    pub channel: f64,
    pub reid: f64,
    pub color: f64,
    pub type_: f64,
    /// Weights actually applied to (reid, color, type).
    pub weights: [f64; 3],
}

impl LossReport {
    /// `|L_E2E - (L_T + L_CH)|` and `|L_T - Σ λ L|`.
    pub fn identity_residuals(&self) -> (f64, f64) {
        let [wr, wc, wt] = self.weights;
        (
            (self.e2e - (self.task + self.channel)).abs(),
            (self.task - (wr * self.reid + wc * self.color + wt * self.type_)).abs(),
        )
    }
}

pub struct LossTerms {
    pub e2e: Var,
    pub task: Var,
    pub channel: Var,
    pub per_task: Vec<(TaskKind, f64, Var)>,
}

impl LossTerms {
    pub fn report(&self, g: &Graph) -> LossReport {
        let mut r = LossReport {
            e2e: g.scalar(self.e2e),
            task: g.scalar(self.task),
            channel: g.scalar(self.channel),
            ..Default::default()
        };
        for &(kind, w, v) in &self.per_task {
            let val = g.scalar(v);
            match kind {
                TaskKind::Reid => (r.reid, r.weights[0]) = (val, w),
                TaskKind::Color => (r.color, r.weights[1]) = (val, w),
                TaskKind::Type => (r.type_, r.weights[2]) = (val, w),
            }
        }
        r
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub triplet_margin: f64,
    pub cross_entropy: CrossEntropyForm,
    /// Single-task pipelines apply weight 1 to their only task.
    pub unit_weights: bool,
}

/// `L_E2E = L_T + L_CH` with `L_T = Σ λ_k L_k`; the re-identification term
/// adds the batch-hard triplet loss on `ê` to its cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    pipeline: &Pipeline,
    e: Var,
    e_hat: Var,
    probs: &[Var],
    labels: &[Vec<usize>],
    identities: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if probs.len() != pipeline.tasks.len() || labels.len() != pipeline.tasks.len() {
        return Err(Error::contract(
            "one probability tensor and label list per task",
        ));
    }
    let mut per_task = Vec::with_capacity(probs.len());
    let mut task_total: Option<Var> = None;
    for ((spec, &p), y) in pipeline.tasks.iter().zip(probs).zip(labels) {
        let mut loss = cross_entropy(g, p, y, cfg.cross_entropy)?;
        if spec.kind == TaskKind::Reid {
            let triplet = hard_triplet(g, e_hat, identities, cfg.triplet_margin)?;
            loss = g.add(triplet, loss)?;
        }
        let weight = if cfg.unit_weights { 1.0 } else { spec.weight };
        let weighted = g.affine(loss, weight, 0.0);
        task_total = Some(match task_total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
        per_task.push((spec.kind, weight, loss));
    }
    let task = task_total.expect("at least one task");
    let channel = channel_loss(g, e, e_hat)?;
    let e2e = g.add(task, channel)?;
    Ok(LossTerms {
        e2e,
        task,
        channel,
        per_task,
    })
}
