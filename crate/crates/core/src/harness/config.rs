use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::variant::Variant;
use crate::error::{Error, Result};
use crate::lab::CorpusConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable naming a JSON file of externally computed Stage-1 proxy scores.
pub const PROXY_SCORES_ENV: &str = "DIAGVQA_PROXY_SCORES";

/// Everything a command needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for corpus generation, initialization and training order.
    /// Overrides `train.seed`.
    pub seed: u64,
    pub variant: Variant,
    /// Output root; `--out` takes precedence.
    pub out: Option<PathBuf>,
    /// Corpus directory; defaults to `<out>/corpora`.
    pub corpus_dir: Option<PathBuf>,
    /// Detection threshold for artifact verdicts.
    pub threshold: f64,
    /// Seeds the ablation runner repeats every variant over.
    pub ablation_seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// The desk preset: 64x64x12 patches, D = 64, 2000 pairs per domain, five epochs per stage.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            variant: Variant::Full,
            out: None,
            corpus_dir: None,
            threshold: 0.5,
            ablation_seeds: vec![1, 2, 3],
            model: ModelConfig::desk(),
            train: TrainConfig {
                stage_learning_rates: [("S1".to_string(), 3e-4), ("S2".to_string(), 3e-3), ("S3".to_string(), 1e-3)].into(),
                ..TrainConfig::default()
            },
            corpus: CorpusConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        let mut seeds = self.ablation_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.is_empty() || seeds.len() != self.ablation_seeds.len() {
            return Err(Error::Config("ablation_seeds must be non-empty and distinct".into()));
        }
        Ok(())
    }

    /// This configuration with its variant's deltas applied and the master seed propagated.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut cfg = self.variant.apply(self);
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("no output directory: pass --out or set \"out\"".into()))
    }

    pub fn corpora_dir(&self) -> Result<PathBuf> {
        match &self.corpus_dir {
            Some(d) => Ok(d.clone()),
            None => Ok(self.out_dir()?.join("corpora")),
        }
    }

    pub fn checkpoints_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir()?.join("checkpoints"))
    }

    pub fn logs_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir()?.join("logs"))
    }

    pub fn reports_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir()?.join("reports"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg = RunConfig::desk();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [r#"{"sede": 3}"#, r#"{"model": {"embed_dims": 32}}"#, r#"{"train": {"lr": 0.1}}"#, r#"{"corpus": {"lab": {"x": 1}}}"#] {
            let e = RunConfig::from_json(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for text in [r#"{"threshold": 1.0}"#, r#"{"ablation_seeds": []}"#, r#"{"ablation_seeds": [2, 2]}"#, r#"{"train": {"batch_size": 0}}"#, r#"{"variant": "V9"}"#] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn seed_overrides_train_seed() {
        let cfg = RunConfig { seed: 42, ..RunConfig::desk() };
        assert_eq!(cfg.resolved().unwrap().train.seed, 42);
    }

    #[test]
    fn layout_needs_an_output_directory() {
        let cfg = RunConfig::desk();
        assert!(cfg.corpora_dir().is_err());
        let cfg = RunConfig { out: Some("/x".into()), ..cfg };
        assert_eq!(cfg.corpora_dir().unwrap(), PathBuf::from("/x/corpora"));
        assert_eq!(cfg.reports_dir().unwrap(), PathBuf::from("/x/reports"));
    }
}
