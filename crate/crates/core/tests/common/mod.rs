//! Checks shared by the acceptance runner and the regular test targets.
#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semlink::autodiff::{Graph, Tensor, Var};
use semlink::model::{ModelConfig, Pipeline, TaskSpec};
use semlink::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Entries with magnitude in `[gap, 2]` and random sign, away from a kink at 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ w ⊙ out` with fixed random weights, turning any op into a scalar.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = uniform(&mut r, g.value(out).shape(), -1.0, 1.0);
    let wv = g.leaf(w);
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

/// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)` for a scalar
/// function of one tensor, with central differences of step `h`.
pub fn grad_rel_error<F>(x: &Tensor, f: F) -> f64
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v).unwrap();
    g.backward(out).unwrap();
    let analytic = g.grad_or_zeros(v);

    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v).unwrap();
        g.scalar(out)
    };
    let h = 1e-6;
    let mut diff = 0.0;
    let (mut na, mut nn) = (0.0, 0.0);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.data()[i];
        diff += (a - numeric).powi(2);
        na += a * a;
        nn += numeric * numeric;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

pub fn random_unit_complex(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::from_polar(
        rng.random_range(0.3..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    )
}

/// A tiny three-task pipeline for end-to-end gradient checks.
pub fn tiny_pipeline(seed: u64) -> Pipeline {
    let cfg = ModelConfig {
        semantic_dim: 5,
        channel_len: 3,
        encoder_hidden: 6,
        codec_hidden: 5,
        head_hidden: 4,
    };
    let tasks = vec![
        TaskSpec::new(semlink::model::TaskKind::Reid, 3, 1.0).unwrap(),
        TaskSpec::new(semlink::model::TaskKind::Color, 2, 0.125).unwrap(),
        TaskSpec::new(semlink::model::TaskKind::Type, 2, 0.125).unwrap(),
    ];
    let mut p = Pipeline::new(4, cfg, tasks, &mut semlink::rng::rng_from(seed, &[])).unwrap();
    // nonzero biases, so no input silences every hidden unit
    let mut r = rng(seed ^ 0xb1a5);
    let biases: Vec<String> = p
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.contains(".b"))
        .collect();
    for name in biases {
        for v in p.params.get_mut(&name).unwrap().data_mut() {
            *v = r.random_range(0.1..0.5);
        }
    }
    p
}

/// Independent batch-hard triplet value: for every anchor, the largest hinge
/// over all (positive, negative) pairs, averaged over anchors.
pub fn triplet_oracle(features: &[Vec<f64>], ids: &[usize], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let n = ids.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = 0.0f64;
        for p in (0..n).filter(|&p| p != a && ids[p] == ids[a]) {
            for q in (0..n).filter(|&q| ids[q] != ids[a]) {
                let hinge =
                    dist(&features[a], &features[p]) - dist(&features[a], &features[q]) + margin;
                worst = worst.max(hinge.max(0.0));
            }
        }
        total += worst;
    }
    total / n as f64
}

/// Sort-and-take reference for top-`b` selection with lowest-index ties.
pub fn top_b_oracle(values: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap().then(i.cmp(&j)));
    let mut picked = order[..b].to_vec();
    picked.sort_unstable();
    picked
}

/// Largest `b` with `bits_per_feature · b ≤ V`, found by counting up.
pub fn budget_oracle(time_bandwidth: f64, snr_db: f64, bits_per_feature: f64, len: usize) -> usize {
    let v = time_bandwidth * (1.0 + 10f64.powf(snr_db / 10.0)).log2();
    let mut b = 0usize;
    while bits_per_feature * (b + 1) as f64 <= v {
        b += 1;
    }
    b.min(len)
}

/// Random batch of at most 12 rows where every anchor has a positive and a negative.
pub fn triplet_batch(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let identities = rng.random_range(2..=4);
    let mut ids = Vec::new();
    for id in 0..identities {
        for _ in 0..rng.random_range(2..=3) {
            ids.push(id);
        }
    }
    let feats = (0..ids.len())
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (feats, ids)
}
