//! Run configuration: one JSON document with a top-level seed and the
//! `data`, `model`, `train`, `eval` and `paths` sections. Unknown keys are
//! rejected. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::eval::EvalMode;
use crate::pipeline::ModelConfig;
use crate::synth::DatasetSpec;
use crate::taxonomy::{ClassTaxonomy, FoldSplit};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub s_train: usize,
    pub q_train: usize,
    pub s_test: usize,
    pub q_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { s_train: 256, q_train: 256, s_test: 20, q_test: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub counts: SplitCounts,
    pub fixed_supports: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { height: 64, width: 64, counts: SplitCounts::default(), fixed_supports: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub fold: u8,
    /// Seeds per ablation row (`seed`, `seed + 1`, ...).
    pub ablation_seeds: usize,
    /// Spread evaluation and ablation rows over the rayon pool.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mode: EvalMode::KWay, fold: 1, ablation_seeds: 3, parallel: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory; `manifest.json` lives at its root.
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), report_dir: "reports".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    /// Read, parse and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.checkpoint_dir, &mut cfg.paths.report_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// The single seed feeds data generation, parameter initialisation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let c = &self.data.counts;
        DatasetSpec {
            seed: self.seed,
            height: self.data.height,
            width: self.data.width,
            counts: [c.s_train, c.q_train, c.s_test, c.q_test],
            fixed_supports: self.data.fixed_supports,
            fold: self.eval.fold,
        }
    }

    pub fn fold(&self) -> Result<FoldSplit> {
        ClassTaxonomy::standard().select_fold(self.eval.fold).map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => config_err!("eval.fold: {other}"),
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.data_dir.join("manifest.json")
    }

    pub fn stage_checkpoint(&self, stage: u8) -> PathBuf {
        self.paths.checkpoint_dir.join(format!("stage{stage}.popc"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.paths.checkpoint_dir.join("final.popc")
    }

    /// Section-level checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.fold()?;
        if self.eval.ablation_seeds == 0 {
            return Err(config_err!("eval.ablation_seeds must be at least 1"));
        }
        Ok(())
    }

    /// Full validation plus the paths `command` will read.
    pub fn validate_for(&self, command: Command) -> Result<()> {
        self.validate()?;
        let need = |p: PathBuf, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(config_err!("{what} {} does not exist", p.display()))
            }
        };
        match command {
            Command::GenData => Ok(()),
            Command::Train | Command::Ablate => need(self.manifest_path(), "manifest"),
            Command::Eval => {
                need(self.manifest_path(), "manifest")?;
                need(self.final_checkpoint(), "checkpoint")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    Ablate,
}
