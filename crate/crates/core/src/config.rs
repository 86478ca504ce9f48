//! Run configuration: one TOML file holds the data, training and evaluation
//! settings plus the single seed behind all randomness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::evalx::{EvalOptions, ModelKind};
use crate::segnet::NetMode;
use crate::synthgen::SynthParams;
use crate::teach::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cases: usize,
    pub test_size: usize,
    /// Held-out fold used for training/testing splits.
    pub fold: usize,
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            test_size: 5,
            fold: 0,
            synth: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Settings of the full iterative model; the other variants are derived
    /// from it by [`RunConfig::train_for`].
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Desktop-scale preset: a small 2D net trained for 300 epochs.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.train.net.base_channels = 8;
        cfg.train.net.pool = 2;
        cfg.seed = 3;
        cfg.train.loss.class_balance_power = 0.25;
        cfg.train.traj.tube_step = 4;
        cfg.train.traj.positive_prob = 0.4;
        cfg.train.optim.lr = 0.5;
        cfg.train.optim.anneal_start = 0.5;
        cfg.train.optim.final_lr_ratio = 0.05;
        cfg.data.synth.tube.blob_radius_min = 10.0;
        cfg.data.synth.tube.blob_radius_max = 13.0;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SegError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SegError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SegError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            SegError::Config(msg) => SegError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.test_size == 0 || d.test_size >= d.cases || !d.cases.is_multiple_of(d.test_size) {
            return Err(SegError::Config(format!(
                "data.test_size {} must divide data.cases {} and be smaller",
                d.test_size, d.cases
            )));
        }
        if d.fold >= d.cases / d.test_size {
            return Err(SegError::Config(format!("data.fold {} exceeds the {} folds", d.fold, d.cases / d.test_size)));
        }
        if self.train.net.mode != NetMode::Iterative || self.train.net.distance_channel {
            return Err(SegError::Config(
                "train.net describes the iterative model (mode = iterative, no distance channel)".into(),
            ));
        }
        self.train.net.validate()?;
        self.train.traj.validate()?;
        let o = &self.train.optim;
        if !(o.lr > 0.0 && (0.0..=1.0).contains(&o.final_lr_ratio) && (0.0..=1.0).contains(&o.anneal_start)) {
            return Err(SegError::Config("train.optim needs lr > 0 and anneal_start, final_lr_ratio in [0, 1]".into()));
        }
        self.train.net.check_dims(&crate::grid::Dims::square(d.synth.side))?;
        Ok(())
    }

    /// Training settings for one model variant.
    pub fn train_for(&self, kind: ModelKind) -> TrainConfig {
        let mut t = self.train.clone();
        match kind {
            ModelKind::Dir => t.net.mode = NetMode::Direct,
            ModelKind::DirDist => {
                t.net.mode = NetMode::Direct;
                t.net.distance_channel = true;
            }
            ModelKind::Iter => {}
            ModelKind::IterAbl => t.augment.corrupt = false,
        }
        t
    }
}
