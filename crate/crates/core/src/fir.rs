//! Feature importance ranking and the scalable selection policies.
//!
//! Task sensitivity is the gradient of the predicted class probability with
//! respect to the channel-input vector `f`, reduced to one magnitude per
//! complex symbol and averaged over a calibration batch. The importance
//! vector is the task-weighted sum of sensitivities; the selector sends the
//! `B` symbols with the largest importance.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Fir,
    Random,
    Sequential,
    Full,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Fir,
        Policy::Random,
        Policy::Sequential,
        Policy::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Fir => "fir",
            Policy::Random => "random",
            Policy::Sequential => "sequential",
            Policy::Full => "full",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "method",
                    format!("unknown method `{s}` (fir, random, sequential, full)"),
                )
            })
    }
}

/// Which complex features are transmitted, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionPattern {
    indices: Vec<usize>,
    policy: Policy,
}

impl SelectionPattern {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Interleaved real columns `2j, 2j+1` of every selected symbol `j`.
    pub fn real_columns(&self) -> Vec<usize> {
        self.indices
            .iter()
            .flat_map(|&j| [2 * j, 2 * j + 1])
            .collect()
    }
}

fn check_budget(len: usize, budget: usize) -> Result<()> {
    if budget == 0 || budget > len {
        return Err(Error::contract(format!(
            "budget {budget} outside [1, {len}]"
        )));
    }
    Ok(())
}

/// How per-sample gradients are reduced to a sensitivity value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityMode {
    /// Per-sample magnitude per complex symbol, then averaged.
    #[default]
    Magnitude,
    /// Signed gradients averaged first, magnitude taken last.
    Signed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityVector {
    pub values: Vec<f64>,
    pub task_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    pub values: Vec<f64>,
    pub task_weights: Vec<f64>,
}

impl ImportanceVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Uniform scores: the ranking degenerates to index order.
    pub fn uniform(len: usize) -> Self {
        ImportanceVector {
            values: vec![1.0; len],
            task_weights: vec![1.0],
        }
    }

    /// All indices from most to least important, ties to the lower index.
    pub fn priority_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]));
        order
    }

    /// Plain-text form: a header line, then one value per line.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        let weights: Vec<String> = self.task_weights.iter().map(f64::to_string).collect();
        writeln!(
            out,
            "# importance L={} lambda={}",
            self.values.len(),
            weights.join(",")
        )?;
        for v in &self.values {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty importance file", path.display())))?;
        let bad = |what: &str| Error::Parse(format!("{}: {what}", path.display()));
        let mut len = None;
        let mut weights = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("L=") {
                len = Some(v.parse::<usize>().map_err(|_| bad("bad L in header"))?);
            } else if let Some(v) = tok.strip_prefix("lambda=") {
                let w: std::result::Result<Vec<f64>, _> = v.split(',').map(str::parse).collect();
                weights = Some(w.map_err(|_| bad("bad lambda in header"))?);
            }
        }
        let len = len.ok_or_else(|| bad("header lacks L="))?;
        let task_weights = weights.ok_or_else(|| bad("header lacks lambda="))?;
        let values: std::result::Result<Vec<f64>, _> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>())
            .collect();
        let values = values.map_err(|_| bad("non-numeric value"))?;
        if values.len() != len {
            return Err(bad(&format!(
                "header says L={len}, found {} values",
                values.len()
            )));
        }
        Ok(ImportanceVector {
            values,
            task_weights,
        })
    }
}

/// A model whose task probabilities can be differentiated w.r.t. the
/// channel-input vector `f` (interleaved real/imaginary, width `2L`).
pub trait SensitivityModel {
    fn channel_features(&self, x: &Tensor) -> Result<Tensor>;
    fn task_probabilities(&self, g: &mut Graph, f: Var, task: usize) -> Result<Var>;
    fn params_finite(&self) -> bool;
}

/// Gradient of the predicted-class probability w.r.t. `f`, one value per
/// complex symbol, averaged over the calibration batch.
pub fn task_sensitivity<M: SensitivityModel + ?Sized>(
    model: &M,
    calibration: &Tensor,
    task: usize,
    mode: SensitivityMode,
) -> Result<SensitivityVector> {
    if !model.params_finite() {
        return Err(Error::contract("model parameters contain NaN or infinity"));
    }
    let f = model.channel_features(calibration)?;
    let (rows, width) = (f.rows(), f.cols());
    if width % 2 != 0 {
        return Err(Error::contract(format!(
            "feature width {width} is not interleaved complex"
        )));
    }

    let mut g = Graph::new();
    let fv = g.leaf(f);
    let probs = model.task_probabilities(&mut g, fv, task)?;
    if g.value(probs).rows() != rows {
        return Err(Error::contract("task head changed the batch size"));
    }
    let classes = g.value(probs).cols();
    // sample r contributes only to row r of the gradient, so one backward
    // pass over the sum yields every per-sample gradient
    let picks: Vec<usize> = (0..rows)
        .map(|r| r * classes + argmax(g.value(probs).row(r)))
        .collect();
    let picked = g.gather(probs, &picks)?;
    let total = g.sum(picked);
    g.backward(total)?;
    let grad = g.grad_or_zeros(fv);
    if !grad.all_finite() {
        return Err(Error::contract("sensitivity gradient is not finite"));
    }

    let symbols = width / 2;
    let mut values = vec![0.0; symbols];
    match mode {
        SensitivityMode::Magnitude => {
            for r in 0..rows {
                for (j, pair) in grad.row(r).chunks(2).enumerate() {
                    values[j] += pair[0].hypot(pair[1]);
                }
            }
            values.iter_mut().for_each(|v| *v /= rows as f64);
        }
        SensitivityMode::Signed => {
            let mut mean = vec![0.0; width];
            for r in 0..rows {
                mean.iter_mut().zip(grad.row(r)).for_each(|(m, v)| *m += v);
            }
            for (j, pair) in mean.chunks(2).enumerate() {
                values[j] = (pair[0] / rows as f64).hypot(pair[1] / rows as f64);
            }
        }
    }
    Ok(SensitivityVector {
        values,
        task_id: task,
    })
}

/// First index of the maximum entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `s = Σ λ_i · sensitivity_i`.
pub fn combine_importance(
    sensitivities: &[SensitivityVector],
    weights: &[f64],
) -> Result<ImportanceVector> {
    if sensitivities.is_empty() || sensitivities.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} sensitivity vectors for {} task weights",
            sensitivities.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract("task weights must be non-negative"));
    }
    let len = sensitivities[0].values.len();
    if let Some(bad) = sensitivities.iter().find(|s| s.values.len() != len) {
        return Err(Error::Shape {
            op: "combine_importance",
            lhs: vec![len],
            rhs: vec![bad.values.len()],
        });
    }
    let mut values = vec![0.0; len];
    for (s, &w) in sensitivities.iter().zip(weights) {
        values
            .iter_mut()
            .zip(&s.values)
            .for_each(|(acc, v)| *acc += w * v);
    }
    Ok(ImportanceVector {
        values,
        task_weights: weights.to_vec(),
    })
}

/// The `budget` most important symbols, returned in ascending index order.
pub fn select_top_b(s: &ImportanceVector, budget: usize) -> Result<SelectionPattern> {
    check_budget(s.len(), budget)?;
    if s.values.iter().all(|&v| v == 0.0) {
        log::warn!("importance vector is all zero; falling back to sequential selection");
    }
    let mut indices: Vec<usize> = s.priority_order().into_iter().take(budget).collect();
    indices.sort_unstable();
    Ok(SelectionPattern {
        indices,
        policy: Policy::Fir,
    })
}

/// `budget` indices drawn uniformly without replacement.
pub fn select_random(len: usize, budget: usize, seed: u64) -> Result<SelectionPattern> {
    check_budget(len, budget)?;
    let mut rng = rng_from(seed, &[]);
    let mut indices = rand::seq::index::sample(&mut rng, len, budget).into_vec();
    indices.sort_unstable();
    Ok(SelectionPattern {
        indices,
        policy: Policy::Random,
    })
}

/// The first `budget` indices.
pub fn select_sequential(len: usize, budget: usize) -> Result<SelectionPattern> {
    check_budget(len, budget)?;
    Ok(SelectionPattern {
        indices: (0..budget).collect(),
        policy: Policy::Sequential,
    })
}

pub fn select_full(len: usize) -> SelectionPattern {
    SelectionPattern {
        indices: (0..len).collect(),
        policy: Policy::Full,
    }
}

/// Gather `f` at the pattern's indices.
pub fn apply_selection(f: &[Complex64], pattern: &SelectionPattern) -> Result<Vec<Complex64>> {
    if let Some(&bad) = pattern.indices.iter().find(|&&i| i >= f.len()) {
        return Err(Error::contract(format!(
            "selection index {bad} out of range for L={}",
            f.len()
        )));
    }
    Ok(pattern.indices.iter().map(|&i| f[i]).collect())
}

/// Zero-filled length-`len` vector with `z_eq` written at the pattern's indices.
pub fn scatter_received(
    z_eq: &[Complex64],
    pattern: &SelectionPattern,
    len: usize,
) -> Result<Vec<Complex64>> {
    if z_eq.len() != pattern.len() {
        return Err(Error::Shape {
            op: "scatter_received",
            lhs: vec![z_eq.len()],
            rhs: vec![pattern.len()],
        });
    }
    if let Some(&bad) = pattern.indices.iter().find(|&&i| i >= len) {
        return Err(Error::contract(format!(
            "selection index {bad} out of range for L={len}"
        )));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for (&i, &z) in pattern.indices.iter().zip(z_eq) {
        out[i] = z;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(v: &[f64]) -> ImportanceVector {
        ImportanceVector {
            values: v.to_vec(),
            task_weights: vec![1.0],
        }
    }

    fn sens(v: &[f64]) -> SensitivityVector {
        SensitivityVector {
            values: v.to_vec(),
            task_id: 0,
        }
    }

    #[test]
    fn top_b_cases() {
        assert_eq!(
            select_top_b(&imp(&[0.1, 0.9, 0.5]), 2).unwrap().indices(),
            &[1, 2]
        );
        assert_eq!(
            select_top_b(&imp(&[0.1, 0.9, 0.5]), 3).unwrap().indices(),
            &[0, 1, 2]
        );
        assert_eq!(
            select_top_b(&imp(&[0.5, 0.5, 0.1]), 1).unwrap().indices(),
            &[0]
        );
        assert!(select_top_b(&imp(&[0.5, 0.5]), 0).is_err());
        assert!(select_top_b(&imp(&[0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn zero_importance_behaves_sequentially() {
        let p = select_top_b(&imp(&[0.0; 5]), 3).unwrap();
        assert_eq!(p.indices(), select_sequential(5, 3).unwrap().indices());
    }

    #[test]
    fn combine_cases() {
        let s = combine_importance(&[sens(&[0.3, 0.7])], &[1.0]).unwrap();
        assert_eq!(s.values, vec![0.3, 0.7]);

        let s = combine_importance(
            &[sens(&[1.0, 0.0]), sens(&[0.0, 8.0]), sens(&[0.0, 8.0])],
            &[1.0, 0.125, 0.125],
        )
        .unwrap();
        assert_eq!(s.values, vec![1.0, 2.0]);

        let s = combine_importance(&[sens(&[1.0, 3.0]), sens(&[2.0, 5.0])], &[0.0, 0.0]).unwrap();
        assert_eq!(s.values, vec![0.0, 0.0]);

        assert!(combine_importance(&[sens(&[1.0]), sens(&[1.0, 2.0])], &[1.0, 1.0]).is_err());
        assert!(combine_importance(&[sens(&[1.0])], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn random_and_sequential() {
        assert_eq!(
            select_random(6, 6, 11).unwrap().indices(),
            &[0, 1, 2, 3, 4, 5]
        );
        assert_eq!(
            select_random(20, 5, 3).unwrap(),
            select_random(20, 5, 3).unwrap()
        );
        assert_eq!(select_sequential(8, 3).unwrap().indices(), &[0, 1, 2]);
        assert_eq!(select_sequential(8, 1).unwrap().indices(), &[0]);
        assert_eq!(select_sequential(4, 4).unwrap().indices(), &[0, 1, 2, 3]);
    }

    #[test]
    fn gather_scatter() {
        let c = |x: f64| Complex64::new(x, -x);
        let f = vec![c(1.0), c(2.0), c(3.0)];
        assert_eq!(apply_selection(&f, &select_full(3)).unwrap(), f);
        let p = SelectionPattern {
            indices: vec![1],
            policy: Policy::Fir,
        };
        assert_eq!(apply_selection(&f, &p).unwrap(), vec![c(2.0)]);
        assert_eq!(
            scatter_received(&[c(2.0)], &p, 3).unwrap(),
            vec![c(0.0), c(2.0), c(0.0)]
        );
        assert_eq!(scatter_received(&f, &select_full(3), 3).unwrap(), f);
        assert!(apply_selection(&f[..1], &p).is_err());
    }

    #[test]
    fn importance_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        let s = ImportanceVector {
            values: vec![0.1, 1.0 / 3.0, 2.5e-9],
            task_weights: vec![1.0, 0.125, 0.125],
        };
        s.write_to(&path).unwrap();
        assert_eq!(ImportanceVector::read_from(&path).unwrap(), s);
    }

    #[test]
    fn policy_names_parse() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("best".parse::<Policy>().is_err());
    }
}
