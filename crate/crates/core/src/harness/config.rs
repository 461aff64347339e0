//! Experiment configuration: a TOML file with `[dataset]`, `[channel]`,
//! `[model]`, `[train]` and `[experiment]` sections.
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::fir::Policy;
use crate::model::{Mode, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub snr_grid_db: Vec<f64>,
    pub methods: Vec<Policy>,
    pub modes: Vec<Mode>,
    /// Seeds `train.seed .. train.seed + num_seeds`.
    pub num_seeds: usize,
    /// Sweeps over the test split per (snr, method) cell.
    pub eval_passes: usize,
    /// Concurrent (seed, mode) jobs; 0 uses every core.
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            snr_grid_db: vec![-6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.0],
            methods: Policy::ALL.to_vec(),
            modes: vec![Mode::Mtc, Mode::Stc],
            num_seeds: 5,
            eval_passes: 20,
            workers: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub channel: ChannelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            // 0 dB gives B = L = 32 and -6 dB gives B = 10.
            channel: ChannelConfig {
                bandwidth: 2.048e6,
                ..ChannelConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs_stage1: 90,
                epochs_stage2: 60,
                ..TrainConfig::default()
            },
            experiment: ExperimentSection::default(),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` on top of the defaults and validates the result.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let mut table = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Parse(e.to_string()))?;
        merge(&mut table, overlay);
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.channel.validate()?;
        self.model.validate()?;
        self.train.validate(&self.dataset)?;
        let exp = &self.experiment;
        if exp.snr_grid_db.is_empty() {
            return Err(Error::config("experiment.snr_grid_db", "must not be empty"));
        }
        if exp.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config(
                "experiment.snr_grid_db",
                "entries must be finite",
            ));
        }
        if exp.methods.is_empty() {
            return Err(Error::config("experiment.methods", "must not be empty"));
        }
        if exp.modes.is_empty() {
            return Err(Error::config("experiment.modes", "must not be empty"));
        }
        if exp.num_seeds == 0 {
            return Err(Error::config("experiment.num_seeds", "must be >= 1"));
        }
        if exp.eval_passes == 0 {
            return Err(Error::config("experiment.eval_passes", "must be >= 1"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.experiment.num_seeds as u64)
            .map(|i| self.train.seed + i)
            .collect()
    }

    /// Short digest of the settings that shape training: dataset, channel,
    /// model and train sections, without the seed, mode and channel SNR.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Trained<'a> {
            dataset: &'a DatasetConfig,
            channel: ChannelConfig,
            model: &'a ModelConfig,
            train: TrainConfig,
        }
        let key = Trained {
            dataset: &self.dataset,
            channel: self.channel.with_snr(0.0),
            model: &self.model,
            train: TrainConfig {
                seed: 0,
                mode: Mode::default(),
                ..self.train.clone()
            },
        };
        let text = toml::to_string(&key).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<out_dir>/run-<hash>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.experiment
            .out_dir
            .join(format!("run-{}-s{}", self.hash(), self.train.seed))
    }

    /// Dataset for one run seed; the dataset seed is mixed with it.
    pub fn dataset_for(&self, seed: u64) -> DatasetConfig {
        DatasetConfig {
            seed: crate::rng::derive_seed(self.dataset.seed, &[seed]),
            ..self.dataset.clone()
        }
    }
}
