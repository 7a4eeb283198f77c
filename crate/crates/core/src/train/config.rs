use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::plan::Stage;
use crate::error::{Error, Result};

/// How `lr_decay_factor` is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Learning rate multiplied by the factor every `lr_decay_every` epochs.
    #[default]
    StepDecay,
    /// Constant learning rate; the factor becomes Adam's coupled L2 coefficient.
    WeightDecay,
}

/// Stage-1 domain interleaving.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// One batch per domain in turn; smaller corpora are recycled.
    #[default]
    RoundRobin,
    /// Batches spread in proportion to corpus size; each pair once per epoch.
    Proportional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_g: f64,
    pub lambda_a: f64,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub decay_mode: DecayMode,
    /// Epochs per stage.
    pub epochs: usize,
    /// Per-stage epoch counts, keyed `S1`/`S2`/`S3`; absent stages use `epochs`.
    pub stage_epochs: BTreeMap<String, usize>,
    /// Per-stage initial learning rates, keyed like `stage_epochs`.
    pub stage_learning_rates: BTreeMap<String, f64>,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub bce_epsilon: f64,
    pub interleave: Interleave,
    /// Random partners drawn per training video in each Stage-3 epoch.
    pub stage3_pairs_per_video: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_a: 0.5,
            learning_rate: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            decay_mode: DecayMode::StepDecay,
            epochs: 5,
            stage_epochs: BTreeMap::new(),
            stage_learning_rates: BTreeMap::new(),
            batch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            bce_epsilon: 1e-7,
            interleave: Interleave::RoundRobin,
            stage3_pairs_per_video: 1,
        }
    }
}

fn stage_key_ok(k: &str) -> bool {
    matches!(k, "S1" | "S2" | "S3")
}

impl TrainConfig {
    /// The 60-epoch schedule.
    pub fn full_scale() -> Self {
        Self { epochs: 60, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_g >= 0.0 && self.lambda_a >= 0.0 && self.lambda_g.is_finite() && self.lambda_a.is_finite()) {
            return bad(format!("lambda_g {} and lambda_a {} must be finite and >= 0", self.lambda_g, self.lambda_a));
        }
        if self.lambda_g == 0.0 && self.lambda_a == 0.0 {
            return bad("lambda_g and lambda_a cannot both be zero".into());
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 1e-3) {
            return bad(format!("bce_epsilon {} outside (0, 1e-3)", self.bce_epsilon));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor {} outside (0, 1]", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 || self.stage3_pairs_per_video == 0 {
            return bad("lr_decay_every, batch_size and stage3_pairs_per_video must be positive".into());
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam beta {b} outside [0, 1)"));
            }
        }
        if let Some(k) = self.stage_epochs.keys().chain(self.stage_learning_rates.keys()).find(|k| !stage_key_ok(k)) {
            return bad(format!("unknown stage key {k:?}; expected S1, S2 or S3"));
        }
        if self.stage_learning_rates.values().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("stage learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn epochs_for(&self, stage: Stage) -> usize {
        self.stage_epochs.get(stage.key()).copied().unwrap_or(self.epochs)
    }

    pub fn base_lr(&self, stage: Stage) -> f64 {
        self.stage_learning_rates.get(stage.key()).copied().unwrap_or(self.learning_rate)
    }
}

/// Learning rate at `epoch` for the base rate in `cfg`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    stage_lr(epoch, cfg.learning_rate, cfg)
}

pub(crate) fn stage_lr(epoch: usize, base: f64, cfg: &TrainConfig) -> f64 {
    match cfg.decay_mode {
        DecayMode::StepDecay => base * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32),
        DecayMode::WeightDecay => base,
    }
}
