//! Run configuration shared by the library harnesses and the CLI.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::infer::{MapChoice, DEFAULT_THRESHOLD};
use crate::net::EncoderConfig;
use crate::phantom::{generate, Phantom, MIN_SIZE};
use crate::trainer::TrainConfig;

/// Phantom corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub dim: usize,
    pub size: Vec<usize>,
    pub variation: f64,
    /// The first `train_count` phantoms train; the rest are held out.
    pub train_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            count: 60,
            dim: 2,
            size: vec![128, 128],
            variation: 0.3,
            train_count: 40,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.len() != self.dim || self.size.iter().any(|&s| s < MIN_SIZE) {
            return Err(Error::config(format!(
                "data.size needs {} extents of at least {MIN_SIZE}",
                self.dim
            )));
        }
        if self.train_count == 0 || self.train_count >= self.count {
            return Err(Error::config("data.train_count must lie in [1, count)"));
        }
        Ok(())
    }

    /// Phantom `k` of the corpus uses seed `seed + k`.
    pub fn generate(&self) -> Result<Vec<Phantom>> {
        self.validate()?;
        (0..self.count as u64)
            .map(|k| generate(self.seed + k, self.dim, &self.size, self.variation))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Half-width in pixels of the hit box around each true landmark.
    pub box_half_width: f64,
    pub threshold: f64,
    pub variant: MapChoice,
    /// Tile core per axis; empty embeds whole images.
    pub tile: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            box_half_width: 4.0,
            threshold: DEFAULT_THRESHOLD,
            variant: MapChoice::Combined,
            tile: vec![],
        }
    }
}

/// Everything one train + evaluate run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            encoder: EncoderConfig::desk_2d(),
            augment: AugmentConfig::default(),
            train: TrainConfig::desk_2d(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small 3D setup.
    pub fn desk_3d() -> Self {
        ExperimentConfig {
            data: DataConfig {
                dim: 3,
                count: 12,
                train_count: 8,
                size: vec![32, 64, 64],
                ..DataConfig::default()
            },
            encoder: EncoderConfig::desk_3d(),
            augment: AugmentConfig {
                patch_size: vec![16, 48, 48],
                ..AugmentConfig::default()
            },
            train: TrainConfig::desk_3d(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        if self.encoder.dim != self.data.dim {
            return Err(Error::config("encoder.dim differs from data.dim"));
        }
        self.augment.validate(self.encoder.dim)?;
        self.encoder.check_extent(&self.augment.patch_size)?;
        self.train.validate()?;
        if !(self.eval.box_half_width >= 0.0) {
            return Err(Error::config("eval.box_half_width must be non-negative"));
        }
        Ok(())
    }
}
