//! Pipeline configuration: a TOML file whose key paths mirror the module
//! config types, overridden by CLI flags. Precedence: defaults, then config
//! file, then flags.

use std::path::Path;

use serde::Deserialize;

use nowcast_core::datagen::GridDims;
use nowcast_core::model::BackboneConfig;
use nowcast_core::training::{SripConfig, TrainConfig};
use nowcast_core::CoreError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub datagen: DatagenSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub srip: SripSection,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub regions: Option<usize>,
    pub years: Option<Vec<i32>>,
    pub events: Option<u32>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub t_in: Option<usize>,
    pub t_out: Option<usize>,
    pub rain_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub levels: Option<usize>,
    pub base_channels: Option<usize>,
    pub dropout_rate: Option<f32>,
    pub super_resolution: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub mixup_alpha: Option<f64>,
    pub distill_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
    pub stop_at_csi: Option<f64>,
    /// Fraction of each (region, year) group held out for validation.
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SripSection {
    pub lambda: Option<f64>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CoreError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CoreError::io(p.display().to_string(), e))?;
                toml::from_str(&text)
                    .map_err(|e| CoreError::format(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Grid dims from the datagen section plus any flag overrides.
    pub fn grid_dims(&self, height: Option<usize>, width: Option<usize>, t_out: Option<usize>) -> GridDims {
        let h = height.or(self.datagen.height).unwrap_or(32);
        let w = width.or(self.datagen.width).unwrap_or(32);
        GridDims {
            t_in: self.datagen.t_in.unwrap_or(4),
            t_out: t_out.or(self.datagen.t_out).unwrap_or(32),
            ..GridDims::with_spatial(h, w)
        }
    }

    /// Backbone config resolved against the dataset dims.
    pub fn backbone_config(&self, dims: &GridDims) -> BackboneConfig {
        let defaults = BackboneConfig::default();
        BackboneConfig {
            levels: self.model.levels.unwrap_or(defaults.levels),
            base_channels: self.model.base_channels.unwrap_or(defaults.base_channels),
            in_channels: dims.channels,
            in_frames: dims.t_in,
            out_frames: dims.t_out,
            dropout_rate: self.model.dropout_rate.unwrap_or(defaults.dropout_rate),
            super_resolution: self.model.super_resolution.unwrap_or(defaults.super_resolution),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        let sd = SripConfig::default();
        TrainConfig {
            learning_rate: self.train.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: self.train.weight_decay.unwrap_or(d.weight_decay),
            max_epochs: self.train.max_epochs.unwrap_or(d.max_epochs),
            patience: self.train.patience.unwrap_or(d.patience),
            batch_size: self.train.batch_size.unwrap_or(d.batch_size),
            mixup_alpha: self.train.mixup_alpha.unwrap_or(d.mixup_alpha),
            srip: SripConfig {
                lambda: self.srip.lambda.unwrap_or(sd.lambda),
                iters: self.srip.iters.unwrap_or(sd.iters),
                seed: self.srip.seed.unwrap_or(seed),
            },
            distill_epochs: self.train.distill_epochs.unwrap_or(d.distill_epochs),
            finetune_epochs: self.train.finetune_epochs.unwrap_or(d.finetune_epochs),
            stop_at_csi: self.train.stop_at_csi,
            seed,
        }
    }

    pub fn val_fraction(&self) -> f64 {
        self.train.val_fraction.unwrap_or(0.25)
    }

    pub fn root_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(7)
    }
}
