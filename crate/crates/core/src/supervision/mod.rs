//! Label assignment and training targets: matching cost, Hungarian
//! assignment, label augmentation, and the set loss.

mod augment;
mod hungarian;
mod loss;

pub use augment::{
    augment_fixed_ratio, augment_fixed_repeat, AugEntry, AugmentedLabelSet, Label, LabelSet, Strategy,
};
pub use hungarian::{hungarian, Assignment};
pub use loss::{
    assign_labels, giou_loss_sum, layer_loss, match_cost_matrix, set_loss, CostWeights, LossBreakdown,
    LossConfig, SetLoss,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    None,
    #[default]
    FixedRepeat,
    FixedRatio,
}

/// Label augmentation settings used during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub mode: AugMode,
    /// Repeat count for `fixed_repeat`.
    pub repeat: usize,
    /// Positive fraction for `fixed_ratio`.
    pub ratio: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            mode: AugMode::FixedRepeat,
            repeat: 2,
            ratio: 0.25,
        }
    }
}

impl AugConfig {
    pub fn enabled(&self) -> bool {
        self.mode != AugMode::None
    }

    /// Applies the configured strategy. `seed` only matters for
    /// `fixed_ratio`.
    pub fn apply(&self, labels: &LabelSet, seed: u64) -> Result<AugmentedLabelSet> {
        match self.mode {
            AugMode::None => Ok(AugmentedLabelSet::plain(labels)),
            AugMode::FixedRepeat => augment_fixed_repeat(labels, self.repeat),
            AugMode::FixedRatio => augment_fixed_ratio(labels, self.ratio, seed),
        }
    }
}
