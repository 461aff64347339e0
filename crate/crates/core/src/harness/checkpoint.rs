//! Versioned JSON checkpoints of a trained system.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{Pipeline, System};
use crate::rng::rng_from;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Training stage the weights come from (1 or 2).
    pub stage: u8,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub system: System,
}

impl Checkpoint {
    pub fn new(stage: u8, seed: u64, dataset: DatasetConfig, system: System) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            stage,
            seed,
            dataset,
            system,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.system.params_finite() {
            return Err(Error::contract(
                "refusing to checkpoint non-finite parameters",
            ));
        }
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Parse(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("checkpoint {}: {e}", path.display()),
            ))
        })?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if ckpt.version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "{}: checkpoint format {} (expected {FORMAT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        ckpt.check()?;
        Ok(ckpt)
    }

    /// Every pipeline must have the parameter layout its config implies.
    fn check(&self) -> Result<()> {
        for p in &self.system.pipelines {
            let fresh = Pipeline::new(
                p.input_dim,
                p.config.clone(),
                p.tasks.clone(),
                &mut rng_from(0, &[]),
            )?;
            p.params.check_layout(&fresh.params)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig, TaskSpec};

    fn system(mode: Mode) -> System {
        let data = DatasetConfig::default();
        let tasks = TaskSpec::standard(&data, [1.0, 0.125, 0.125]).unwrap();
        System::new(
            mode,
            data.pixels(),
            &ModelConfig::default(),
            &tasks,
            &mut rng_from(3, &[]),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [Mode::Mtc, Mode::Stc] {
            let ckpt = Checkpoint::new(1, 4, DatasetConfig::default(), system(mode));
            let path = dir.path().join(format!("{mode}.json"));
            ckpt.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{\"version\": 1").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn wrong_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut sys = system(Mode::Mtc);
        sys.pipelines[0].input_dim += 1;
        let path = dir.path().join("c.json");
        Checkpoint::new(1, 0, DatasetConfig::default(), sys)
            .save(&path)
            .unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
