//! The multi-task pipeline: semantic encoder, joint source-channel encoder
//! and decoder, and one classifier head per task. Every block is a two-layer
//! relu MLP.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::data::{DatasetConfig, SyntheticSample};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reid,
    Color,
    Type,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Reid, TaskKind::Color, TaskKind::Type];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reid => "reid",
            TaskKind::Color => "color",
            TaskKind::Type => "type",
        }
    }

    pub fn label(self, s: &SyntheticSample) -> usize {
        match self {
            TaskKind::Reid => s.identity,
            TaskKind::Color => s.color,
            TaskKind::Type => s.type_label,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rank1,
    Accuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
    /// Loss weight `λ`.
    pub weight: f64,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, classes: usize, weight: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(
                format!("task.{kind}"),
                "needs at least 2 classes",
            ));
        }
        if !(weight >= 0.0) {
            return Err(Error::config(
                format!("train.weight_{kind}"),
                "must be >= 0",
            ));
        }
        let metric = match kind {
            TaskKind::Reid => MetricKind::Rank1,
            _ => MetricKind::Accuracy,
        };
        Ok(TaskSpec {
            kind,
            classes,
            weight,
            metric,
        })
    }

    /// The three experiment tasks with their class counts from the dataset.
    pub fn standard(data: &DatasetConfig, weights: [f64; 3]) -> Result<Vec<TaskSpec>> {
        Ok(vec![
            TaskSpec::new(TaskKind::Reid, data.num_identities, weights[0])?,
            TaskSpec::new(TaskKind::Color, data.num_colors, weights[1])?,
            TaskSpec::new(TaskKind::Type, data.num_types, weights[2])?,
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `N`, width of the semantic feature vector `e`.
    pub semantic_dim: usize,
    /// `L`, number of complex channel symbols in `f`.
    pub channel_len: usize,
    pub encoder_hidden: usize,
    pub codec_hidden: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            semantic_dim: 64,
            channel_len: 32,
            encoder_hidden: 128,
            codec_hidden: 64,
            head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.semantic_dim", self.semantic_dim),
            ("model.channel_len", self.channel_len),
            ("model.encoder_hidden", self.encoder_hidden),
            ("model.codec_hidden", self.codec_hidden),
            ("model.head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Learnable weights of one encoder/decoder chain with its task heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub input_dim: usize,
    pub config: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub params: ParamStore,
}

/// Parameter leaves of one pipeline on one graph.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn layer_names(block: &str) -> [String; 4] {
    [
        format!("{block}.w1"),
        format!("{block}.b1"),
        format!("{block}.w2"),
        format!("{block}.b2"),
    ]
}

fn head_block(kind: TaskKind) -> String {
    format!("head.{kind}")
}

impl Pipeline {
    /// He-normal weights, zero biases.
    pub fn new(
        input_dim: usize,
        config: ModelConfig,
        tasks: Vec<TaskSpec>,
        rng: &mut SimRng,
    ) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::contract("a pipeline needs at least one task"));
        }
        let n = config.semantic_dim;
        let two_l = 2 * config.channel_len;
        let mut blocks = vec![
            ("enc".to_string(), input_dim, config.encoder_hidden, n),
            ("jsc_enc".to_string(), n, config.codec_hidden, two_l),
            ("jsc_dec".to_string(), two_l, config.codec_hidden, n),
        ];
        for t in &tasks {
            blocks.push((head_block(t.kind), n, config.head_hidden, t.classes));
        }
        let mut params = ParamStore::new();
        for (block, fan_in, hidden, out) in blocks {
            let [w1, b1, w2, b2] = layer_names(&block);
            params.insert(w1, he_normal(fan_in, hidden, rng))?;
            params.insert(b1, Tensor::zeros(&[hidden]))?;
            params.insert(w2, he_normal(hidden, out, rng))?;
            params.insert(b2, Tensor::zeros(&[out]))?;
        }
        Ok(Pipeline {
            input_dim,
            config,
            tasks,
            params,
        })
    }

    pub fn channel_len(&self) -> usize {
        self.config.channel_len
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.bind(g))
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.0[self
            .params
            .index_of(name)
            .expect("parameter registered at construction")]
    }

    fn mlp(&self, g: &mut Graph, bound: &Bound, block: &str, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = layer_names(block);
        let h = g.matmul(x, self.var(bound, &w1))?;
        let h = g.add_bias(h, self.var(bound, &b1))?;
        let h = g.relu(h);
        let o = g.matmul(h, self.var(bound, &w2))?;
        g.add_bias(o, self.var(bound, &b2))
    }

    /// Flattened images `[batch × W·H]` to semantic features `e` `[batch × N]`.
    pub fn semantic_encode(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        self.mlp(g, bound, "enc", x)
    }

    /// `e` to `f` `[batch × 2L]`, columns `2j, 2j+1` being symbol `j`.
    pub fn jsc_encode(&self, g: &mut Graph, bound: &Bound, e: Var) -> Result<Var> {
        self.mlp(g, bound, "jsc_enc", e)
    }

    /// Equalized, re-assembled channel output `[batch × 2L]` to `ê`.
    pub fn jsc_decode(&self, g: &mut Graph, bound: &Bound, z_eq: Var) -> Result<Var> {
        self.mlp(g, bound, "jsc_dec", z_eq)
    }

    /// Class probabilities for task `k` of this pipeline.
    pub fn task_head(&self, g: &mut Graph, bound: &Bound, e_hat: Var, k: usize) -> Result<Var> {
        let kind = self
            .tasks
            .get(k)
            .ok_or_else(|| Error::contract(format!("pipeline has no task #{k}")))?
            .kind;
        let logits = self.mlp(g, bound, &head_block(kind), e_hat)?;
        Ok(g.softmax(logits))
    }

    pub fn task_heads(&self, g: &mut Graph, bound: &Bound, e_hat: Var) -> Result<Vec<Var>> {
        (0..self.tasks.len())
            .map(|k| self.task_head(g, bound, e_hat, k))
            .collect()
    }

    pub fn task_index(&self, kind: TaskKind) -> Option<usize> {
        self.tasks.iter().position(|t| t.kind == kind)
    }

    /// `x ↦ f` without keeping a tape around.
    pub fn encode_to_channel(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let e = self.semantic_encode(&mut g, &bound, xv)?;
        let f = self.jsc_encode(&mut g, &bound, e)?;
        Ok(g.value(f).clone())
    }

    pub fn semantic_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let e = self.semantic_encode(&mut g, &bound, xv)?;
        Ok(g.value(e).clone())
    }
}

fn he_normal(fan_in: usize, fan_out: usize, rng: &mut SimRng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized")
}

/// Multi-task coding shares one pipeline between all tasks; single-task
/// coding runs one independent pipeline per task.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Mtc,
    Stc,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Mtc => "mtc",
            Mode::Stc => "stc",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtc" => Ok(Mode::Mtc),
            "stc" => Ok(Mode::Stc),
            _ => Err(Error::config(
                "mode",
                format!("unknown mode `{s}` (mtc, stc)"),
            )),
        }
    }
}

/// All pipelines of one transmitter/receiver pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub mode: Mode,
    pub pipelines: Vec<Pipeline>,
}

impl System {
    pub fn new(
        mode: Mode,
        input_dim: usize,
        config: &ModelConfig,
        tasks: &[TaskSpec],
        rng: &mut SimRng,
    ) -> Result<Self> {
        let pipelines = match mode {
            Mode::Mtc => vec![Pipeline::new(
                input_dim,
                config.clone(),
                tasks.to_vec(),
                rng,
            )?],
            Mode::Stc => tasks
                .iter()
                .map(|t| Pipeline::new(input_dim, config.clone(), vec![*t], rng))
                .collect::<Result<_>>()?,
        };
        Ok(System { mode, pipelines })
    }

    /// The pipeline serving `kind`, with the task's index inside it.
    pub fn route(&self, kind: TaskKind) -> Option<(usize, usize)> {
        self.pipelines
            .iter()
            .enumerate()
            .find_map(|(p, pl)| pl.task_index(kind).map(|k| (p, k)))
    }

    pub fn params_finite(&self) -> bool {
        self.pipelines.iter().all(|p| p.params.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn pipeline() -> Pipeline {
        let tasks = TaskSpec::standard(&DatasetConfig::default(), [1.0, 0.125, 0.125]).unwrap();
        let cfg = ModelConfig {
            semantic_dim: 8,
            channel_len: 4,
            encoder_hidden: 6,
            codec_hidden: 5,
            head_hidden: 4,
        };
        Pipeline::new(10, cfg, tasks, &mut rng_from(3, &[])).unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed, &[]);
        let d = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| d.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut p = pipeline();
        let names: Vec<String> = p.params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            p.params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let e = p.semantic_features(&batch(3, 10, 1)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        let f = p.encode_to_channel(&batch(3, 10, 1)).unwrap();
        assert_eq!(f.shape(), &[3, 8]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let p = pipeline();
        let x = batch(32, 10, 2);
        let e = p.semantic_features(&x).unwrap();
        assert_eq!(e.shape(), &[32, 8]);
        let single = p.semantic_features(&x.select_rows(&[7])).unwrap();
        assert_eq!(single.data(), e.row(7));
    }

    #[test]
    fn heads_are_distinct_distributions() {
        let p = pipeline();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let e = g.leaf(batch(5, 8, 4));
        let probs = p.task_heads(&mut g, &b, e).unwrap();
        assert_eq!(probs.len(), 3);
        for &pv in &probs {
            let t = g.value(pv);
            for r in 0..t.rows() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_ne!(g.value(probs[1]).data(), g.value(probs[2]).data());
    }

    #[test]
    fn decoder_width_is_n() {
        let p = pipeline();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let z = g.leaf(batch(2, 8, 5));
        let e_hat = p.jsc_decode(&mut g, &b, z).unwrap();
        assert_eq!(g.value(e_hat).shape(), &[2, 8]);
        let wrong = g.leaf(batch(2, 7, 5));
        assert!(matches!(
            p.jsc_decode(&mut g, &b, wrong),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn stc_has_one_pipeline_per_task() {
        let tasks = TaskSpec::standard(&DatasetConfig::default(), [1.0, 0.125, 0.125]).unwrap();
        let sys = System::new(
            Mode::Stc,
            16,
            &ModelConfig::default(),
            &tasks,
            &mut rng_from(1, &[]),
        )
        .unwrap();
        assert_eq!(sys.pipelines.len(), 3);
        assert_eq!(sys.route(TaskKind::Type), Some((2, 0)));
        let sys = System::new(
            Mode::Mtc,
            16,
            &ModelConfig::default(),
            &tasks,
            &mut rng_from(1, &[]),
        )
        .unwrap();
        assert_eq!(sys.route(TaskKind::Type), Some((0, 2)));
    }
}
