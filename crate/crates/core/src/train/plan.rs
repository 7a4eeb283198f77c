use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, AGGREGATOR, HEAD_A, HEAD_Q};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "S1_rank_pretrain")]
    S1RankPretrain,
    #[serde(rename = "S2_diagnostic")]
    S2Diagnostic,
    #[serde(rename = "S3_joint")]
    S3Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::S1RankPretrain, Stage::S2Diagnostic, Stage::S3Joint];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1..=3 => Ok(Self::ALL[usize::from(n - 1)]),
            _ => Err(Error::Argument(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn key(self) -> &'static str {
        ["S1", "S2", "S3"][self as usize]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Which parameter groups a stage updates. Every other group is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable_groups: Vec<String>,
    pub frozen_groups: Vec<String>,
}

impl StagePlan {
    pub fn for_model(stage: Stage, model: &Model) -> Self {
        let experts = model.expert_groups();
        let trains = |g: &str| match stage {
            Stage::S1RankPretrain => g != HEAD_A,
            Stage::S2Diagnostic => g == HEAD_A,
            Stage::S3Joint => [AGGREGATOR, HEAD_Q, HEAD_A].contains(&g),
        };
        debug_assert!(experts.iter().all(|e| !trains(e) || stage == Stage::S1RankPretrain));
        let (trainable_groups, frozen_groups) = model.group_names().into_iter().partition(|g| trains(g));
        Self { stage, trainable_groups, frozen_groups }
    }

    /// Sets the model's freeze flags to this plan.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        for g in &self.trainable_groups {
            model.set_frozen(g, false)?;
        }
        for g in &self.frozen_groups {
            model.set_frozen(g, true)?;
        }
        Ok(())
    }

    /// Fails unless the model's freeze flags already match this plan.
    pub fn check(&self, model: &Model) -> Result<()> {
        if let Some(g) = self.frozen_groups.iter().find(|g| !model.is_frozen(g)) {
            return Err(Error::Contract(format!("{} requires group {g} to be frozen", self.stage)));
        }
        if let Some(g) = self.trainable_groups.iter().find(|g| model.is_frozen(g)) {
            return Err(Error::Contract(format!("{} trains group {g}, which is frozen", self.stage)));
        }
        Ok(())
    }

    /// Errors if any frozen group holds a non-zero gradient.
    pub fn check_frozen_gradients(&self, model: &Model) -> Result<()> {
        for g in &self.frozen_groups {
            let m = model.max_abs_grad(g);
            if m != 0.0 {
                return Err(Error::Contract(format!("{}: frozen group {g} received gradient {m:e}", self.stage)));
            }
        }
        Ok(())
    }

    /// Hashes of the frozen groups.
    pub fn frozen_hashes(&self, model: &Model) -> Vec<(String, String)> {
        self.frozen_groups.iter().map(|g| (g.clone(), model.group_hash(g))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, EXTRACTOR};

    #[test]
    fn plans_partition_groups() {
        let m = Model::new(ModelConfig::tiny(), 0).unwrap();
        let s1 = StagePlan::for_model(Stage::S1RankPretrain, &m);
        assert_eq!(s1.frozen_groups, vec![HEAD_A]);
        let s2 = StagePlan::for_model(Stage::S2Diagnostic, &m);
        assert_eq!(s2.trainable_groups, vec![HEAD_A]);
        let s3 = StagePlan::for_model(Stage::S3Joint, &m);
        assert_eq!(s3.trainable_groups, vec![AGGREGATOR, HEAD_Q, HEAD_A]);
        assert!(s3.frozen_groups.contains(&EXTRACTOR.to_string()) && s3.frozen_groups.contains(&"expert_T".to_string()));
        assert!(matches!(s2.check(&m), Err(Error::Contract(_))));
        let mut m2 = m.clone();
        s2.apply(&mut m2).unwrap();
        s2.check(&m2).unwrap();
        assert!(s3.check(&m2).is_err());
        assert_eq!(Stage::from_number(3).unwrap(), Stage::S3Joint);
        assert!(Stage::from_number(0).is_err());
    }
}
