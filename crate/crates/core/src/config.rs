//! Experiment configuration: one flat JSON document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::MessageMode;
use crate::codec::Architecture;
use crate::distortion::{default_channel, Distortion};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::EvalSettings;
use crate::optim::AdamConfig;
use crate::trainer::{KnlPairing, TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Procedural images; eval images follow the training images in the same stream.
    Synthetic { train: usize, eval: usize },
    /// PNG directories for training and for the attacker/eval pool.
    Directory { train: PathBuf, eval: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub image_size: usize,
    pub message_length: usize,
    pub strength: f32,
    pub width: usize,
    pub steps: usize,
    pub lr: f32,
    /// Dual pairs per training step.
    pub batch: usize,
    pub weights: LossWeights,
    pub train_distortions: Vec<Distortion>,
    pub eval_distortions: Vec<Distortion>,
    /// Models to train, in order.
    pub models: Vec<Variant>,
    pub knl_pairing: KnlPairing,
    pub rse_start: usize,
    pub rse_ramp: usize,
    pub n_grid: Vec<usize>,
    pub message_modes: Vec<MessageMode>,
    pub num_targets: usize,
    pub residual_images: usize,
    pub attack_clamped: bool,
    pub dataset: DatasetSource,
    /// Checkpoints to load instead of training, keyed by model name.
    pub load: BTreeMap<String, PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let eval = EvalSettings::default();
        let arch = Architecture::default();
        Self {
            image_size: arch.image_size,
            message_length: arch.message_len,
            strength: arch.strength,
            width: arch.width,
            steps: train.steps,
            lr: train.adam.lr,
            batch: train.batch_pairs,
            weights: train.weights,
            train_distortions: default_channel(),
            eval_distortions: eval.distortions,
            models: vec![Variant::Base, Variant::ResGuard],
            knl_pairing: train.knl_pairing,
            rse_start: train.rse_start,
            rse_ramp: train.rse_ramp,
            n_grid: eval.n_grid,
            message_modes: eval.modes,
            num_targets: eval.num_targets,
            residual_images: eval.residual_images,
            attack_clamped: eval.attack_clamped,
            dataset: DatasetSource::Synthetic { train: 2000, eval: 500 },
            load: BTreeMap::new(),
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative dataset and checkpoint paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Directory { train, eval } = &mut cfg.dataset {
            resolve(train);
            resolve(eval);
        }
        cfg.load.values_mut().for_each(resolve);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.iter().any(|&n| !(1..=50).contains(&n)) {
            return Err(Error::Config(format!("n_grid must be non-empty within [1, 50], got {:?}", self.n_grid)));
        }
        if self.message_modes.is_empty() {
            return Err(Error::Config("message_modes is empty".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("models is empty".into()));
        }
        for name in self.load.keys() {
            if !self.models.iter().any(|m| m.name() == name) {
                return Err(Error::Config(format!("load entry `{name}` is not in models")));
            }
        }
        if let DatasetSource::Synthetic { train, eval } = self.dataset {
            if train == 0 || eval == 0 {
                return Err(Error::Config("synthetic dataset counts must be >= 1".into()));
            }
        }
        self.architecture().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train_config(Variant::ResGuard)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        for d in &self.eval_distortions {
            d.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = self.load.values().collect();
        if let DatasetSource::Directory { train, eval } = &self.dataset {
            paths.push(train);
            paths.push(eval);
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("path does not exist: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            image_size: self.image_size,
            message_len: self.message_length,
            strength: self.strength,
            width: self.width,
            ..Architecture::default()
        }
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_pairs: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            weights: self.weights,
            channel: self.train_distortions.clone(),
            knl_pairing: self.knl_pairing,
            rse_start: self.rse_start,
            rse_ramp: self.rse_ramp,
            seed: self.seed,
            ..TrainConfig::default()
        }
        .for_variant(variant)
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            distortions: self.eval_distortions.clone(),
            n_grid: self.n_grid.clone(),
            modes: self.message_modes.clone(),
            num_targets: self.num_targets,
            residual_images: self.residual_images,
            attack_clamped: self.attack_clamped,
        }
    }
}
