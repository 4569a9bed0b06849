//! Pretraining hyperparameters.

use crate::engine::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::modality::ModalityKind;

/// Every knob of the two-stage pretraining loop. Defaults follow the
/// reference protocol (temperature 0.07, key momentum 0.999, SGD momentum
/// 0.9, weight decay 1e-4, 150+150 epochs, lr 0.1 dropped by 0.1 at 5/6 of
/// the run); desk-scale runs override sizes via configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Modalities trained by this run, in fixed order.
    pub modalities: Vec<ModalityKind>,
    pub tau: f64,
    pub bank_capacity: usize,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    /// Epoch (0-based, over stage1+stage2) at which the learning rate is
    /// multiplied by `lr_drop_factor`; `None` means 5/6 of the total.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    /// Key-encoder momentum.
    pub key_momentum: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Modalities whose key encoders stay frozen during stage 2.
    pub freeze_high_perf: Vec<ModalityKind>,
    /// Mined positives per ordered modality pair in stage 2.
    pub ekem_topk: usize,
    pub ekem_weight: f64,
    pub ikem_weight: f64,
    pub augment: AugmentParams,
    /// Per-frame hidden width of the backbone.
    pub hidden_width: usize,
    /// Pooled feature width (the evaluation representation).
    pub feature_width: usize,
    /// Contrastive embedding width c_z.
    pub embed_width: usize,
    pub seed: u64,
    /// Write wall_ms as 0 in metrics so reruns are byte-identical.
    pub deterministic_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            modalities: ModalityKind::ALL.to_vec(),
            tau: 0.07,
            bank_capacity: 2048,
            batch_size: 128,
            stage1_epochs: 150,
            stage2_epochs: 150,
            learning_rate: 0.1,
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
            key_momentum: 0.999,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            freeze_high_perf: vec![
                ModalityKind::Joint,
                ModalityKind::Bone,
                ModalityKind::RotationAxis,
            ],
            ekem_topk: 1,
            ekem_weight: 1.0,
            ikem_weight: 1.0,
            augment: AugmentParams::default(),
            hidden_width: 64,
            feature_width: 128,
            embed_width: 128,
            seed: 0,
            deterministic_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("no modalities selected".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if !seen.insert(*m) {
                return Err(Error::Config(format!("modality {m} listed twice")));
            }
        }
        for m in &self.freeze_high_perf {
            if !self.modalities.contains(m) {
                return Err(Error::Config(format!(
                    "freeze list names {m}, which is not trained"
                )));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.bank_capacity == 0 {
            return Err(Error::Config("batch size and bank capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.key_momentum)
            || !(0.0..=1.0).contains(&self.sgd_momentum)
        {
            return Err(Error::Config("momenta must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config("learning rate terms must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if let Some(drop) = self.lr_drop_epoch {
            if drop > self.total_epochs() {
                return Err(Error::Config(format!(
                    "lr drop epoch {drop} is past the {} total epochs",
                    self.total_epochs()
                )));
            }
        }
        if self.hidden_width == 0 || self.feature_width == 0 || self.embed_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.augment.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Learning rate at a (0-based) epoch: the base rate, dropped once at the
    /// configured epoch (default 5/6 of the total run).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drop = self
            .lr_drop_epoch
            .unwrap_or(self.total_epochs() * 5 / 6);
        if epoch >= drop && self.total_epochs() > 0 && drop > 0 {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}
