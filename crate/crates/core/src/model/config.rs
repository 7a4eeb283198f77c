use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lab::{DomainTag, ARTIFACT_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "FR")]
    Fr,
    #[serde(rename = "NR")]
    Nr,
}

impl Mode {
    /// Extractor input channels: distorted only, or distorted + reference + residual.
    pub fn channels(self) -> usize {
        match self {
            Mode::Nr => 3,
            Mode::Fr => 9,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fr => "FR",
            Mode::Nr => "NR",
        })
    }
}

/// How adapters are laid out over the three feature streams.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertLayout {
    /// One adapter per listed domain. Streams of unlisted domains carry the raw
    /// extractor output.
    PerDomain { domains: Vec<DomainTag> },
    /// A single adapter shared by every stream, with no routing.
    Shared,
}

impl ExpertLayout {
    pub fn all_domains() -> Self {
        ExpertLayout::PerDomain { domains: DomainTag::ALL.to_vec() }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            ExpertLayout::PerDomain { domains } => domains.len(),
            ExpertLayout::Shared => 1,
        }
    }

    /// Index of the adapter serving `domain`.
    pub fn expert_for(&self, domain: DomainTag) -> Option<usize> {
        match self {
            ExpertLayout::PerDomain { domains } => domains.iter().position(|&d| d == domain),
            ExpertLayout::Shared => Some(0),
        }
    }

    /// Parameter-group name of adapter `index`.
    pub fn group_name(&self, index: usize) -> String {
        match self {
            ExpertLayout::PerDomain { domains } => format!("expert_{}", domains[index].letter()),
            ExpertLayout::Shared => "expert_shared".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    SlowFast,
    /// Temporal 1-D convolutions over frame-pooled stream features.
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub extractor_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub experts: ExpertLayout,
    pub adapter_bottleneck: usize,
    pub artifact_dim: usize,
    pub mode: Mode,
    pub clip_len: usize,
    pub slow_stride: usize,
    pub fast_stride: usize,
    pub dropout: f64,
    pub aggregator: AggregatorKind,
    pub head_hidden: usize,
    /// Init scale of the projection rows that read the FR residual channels. At 255 a
    /// one-code-value residual on 8-bit content enters with the weight of a full-range pixel.
    pub residual_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 64,
            extractor_depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            experts: ExpertLayout::all_domains(),
            adapter_bottleneck: 16,
            artifact_dim: ARTIFACT_DIM,
            mode: Mode::Fr,
            clip_len: 12,
            slow_stride: 4,
            fast_stride: 1,
            dropout: 0.1,
            aggregator: AggregatorKind::SlowFast,
            head_hidden: 64,
            residual_init_gain: 255.0,
        }
    }

    /// The ViT-B/16 scale; expressible but far beyond a CPU budget.
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 768,
            extractor_depth: 12,
            num_heads: 12,
            adapter_bottleneck: 192,
            head_hidden: 768,
            ..Self::desk()
        }
    }

    /// Small configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 16,
            extractor_depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            adapter_bottleneck: 4,
            clip_len: 4,
            slow_stride: 2,
            head_hidden: 16,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.embed_dim;
        if self.patch_size == 0 || d == 0 || self.num_heads == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 {
            return bad("patch_size, embed_dim, num_heads, mlp_ratio and head_hidden must be positive".into());
        }
        if d % self.num_heads != 0 {
            return bad(format!("embed_dim {d} is not divisible by num_heads {}", self.num_heads));
        }
        if !(self.residual_init_gain.is_finite() && self.residual_init_gain > 0.0) {
            return bad(format!("residual_init_gain must be positive, got {}", self.residual_init_gain));
        }
        if d % 4 != 0 {
            return bad(format!("embed_dim {d} must be a multiple of 4"));
        }
        if self.experts.num_experts() == 0 {
            return bad("at least one expert is required".into());
        }
        if let ExpertLayout::PerDomain { domains } = &self.experts {
            let mut seen = domains.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != domains.len() {
                return bad("expert domains must be distinct".into());
            }
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= d {
            return bad(format!("adapter_bottleneck {} must lie in 1..{d}", self.adapter_bottleneck));
        }
        if self.artifact_dim == 0 {
            return bad("artifact_dim must be at least 1".into());
        }
        if self.clip_len < 2 || self.slow_stride == 0 || self.clip_len % self.slow_stride != 0 {
            return bad(format!("clip_len {} must be >= 2 and divisible by slow_stride {}", self.clip_len, self.slow_stride));
        }
        if self.fast_stride == 0 || self.clip_len % self.fast_stride != 0 || self.slow_stride % self.fast_stride != 0 {
            return bad(format!("fast_stride {} must divide clip_len and slow_stride", self.fast_stride));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Width of the fused representation: slow `2D` plus fast `D/2`.
    pub fn fused_dim(&self) -> usize {
        2 * self.embed_dim + self.embed_dim / 2
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.mode.channels()
    }
}
