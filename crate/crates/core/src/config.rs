//! Run configuration, loaded from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::supervision::{AugConfig, AugMode, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch at which the learning rate drops by 10x; defaults to
    /// `0.8 * epochs`.
    pub lr_drop_epoch: Option<usize>,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 60,
            batch_size: 4,
            lr_drop_epoch: None,
            weight_decay: 1e-4,
            clip_norm: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn drop_epoch(&self) -> usize {
        self.lr_drop_epoch
            .unwrap_or_else(|| (0.8 * self.epochs as f64).round() as usize)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch() {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub spec: SceneSpec,
    pub train_count: usize,
    /// Evaluation scenes follow the training indices.
    pub eval_count: usize,
    /// Fraction of the training scenes kept.
    pub subsample: f64,
    pub subsample_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            train_count: 200,
            eval_count: 50,
            subsample: 1.0,
            subsample_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub config_id: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augmentation: AugConfig,
    pub nms_threshold: f64,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_id: "default".into(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugConfig::default(),
            nms_threshold: 0.7,
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Label augmentation actually applied during training.
    pub fn effective_aug(&self) -> AugConfig {
        if self.model.toggles.label_aug {
            self.augmentation
        } else {
            AugConfig {
                mode: AugMode::None,
                ..self.augmentation
            }
        }
    }

    /// NMS is applied at evaluation iff training used label augmentation.
    pub fn eval_nms(&self) -> Option<f64> {
        self.effective_aug().enabled().then_some(self.nms_threshold)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.data.spec.validate()?;
        if self.config_id.is_empty() || self.config_id.contains([',', '"', '\n']) {
            return bad(format!("config_id {:?} must be non-empty plain text", self.config_id));
        }
        if self.model.num_classes != self.data.spec.num_classes {
            return bad(format!(
                "model has {} classes, data has {}",
                self.model.num_classes, self.data.spec.num_classes
            ));
        }
        if self.model.in_channels != self.data.spec.channels {
            return bad(format!(
                "model expects {} channels, data has {}",
                self.model.in_channels, self.data.spec.channels
            ));
        }
        if self.model.num_levels != crate::data::STRIDES.len() {
            return bad(format!("data provides {} levels", crate::data::STRIDES.len()));
        }
        let n = self.model.num_queries;
        if self.data.spec.max_objects > n {
            return bad(format!(
                "max_objects {} exceeds num_queries {n}",
                self.data.spec.max_objects
            ));
        }
        let aug = self.effective_aug();
        match aug.mode {
            AugMode::FixedRepeat if aug.repeat == 0 || aug.repeat * self.data.spec.max_objects > n => {
                return bad(format!(
                    "repeat {} x max_objects {} does not fit in {n} queries",
                    aug.repeat, self.data.spec.max_objects
                ));
            }
            AugMode::FixedRatio if !(aug.ratio > 0.0 && aug.ratio <= 1.0) => {
                return bad(format!("ratio {} outside (0, 1]", aug.ratio));
            }
            _ => {}
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return bad(format!("nms_threshold {} outside (0, 1]", self.nms_threshold));
        }
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 || o.clip_norm < 0.0 {
            return bad("lr must be positive; weight_decay and clip_norm non-negative".into());
        }
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            return bad("train_count and eval_count must be at least 1".into());
        }
        if !(self.data.subsample > 0.0 && self.data.subsample <= 1.0) {
            return bad(format!("subsample {} outside (0, 1]", self.data.subsample));
        }
        Ok(())
    }
}
