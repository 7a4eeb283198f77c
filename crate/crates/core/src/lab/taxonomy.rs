use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Perceptual domain an expert is responsible for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Spatial,
    Color,
    Temporal,
}

impl DomainTag {
    pub const ALL: [DomainTag; 3] = [DomainTag::Spatial, DomainTag::Color, DomainTag::Temporal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Spatial => "spatial",
            DomainTag::Color => "color",
            DomainTag::Temporal => "temporal",
        }
    }

    /// Short tag used in parameter-group names.
    pub fn letter(self) -> char {
        match self {
            DomainTag::Spatial => 'S',
            DomainTag::Color => 'C',
            DomainTag::Temporal => 'T',
        }
    }

    /// Distortion kinds belonging to this domain, in table order.
    pub fn kinds(self) -> Vec<DistortionKind> {
        DistortionKind::ALL.iter().copied().filter(|k| k.domain() == self).collect()
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainTag::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown domain {s:?}")))
    }
}

/// Procedural distortion kernels.
///
/// | kind                      | domain   | artifact label      |
/// |---------------------------|----------|---------------------|
/// | blockiness                | spatial  | blockiness          |
/// | gaussian_blur             | spatial  | spatial blur        |
/// | grain_noise               | spatial  | graininess          |
/// | aliasing                  | spatial  | aliasing            |
/// | transmission_block_loss   | spatial  | transmission errors |
/// | banding                   | color    | banding             |
/// | tone_error                | color    | -                   |
/// | chroma_gain_error         | color    | -                   |
/// | dark_scene                | color    | dark scenes         |
/// | frame_drop_judder         | temporal | dropped frames      |
/// | ghost_blend               | temporal | -                   |
/// | temporal_jitter           | temporal | -                   |
/// | black_frame               | temporal | black frame         |
/// | motion_blur               | temporal | motion blur         |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Blockiness,
    GaussianBlur,
    GrainNoise,
    Aliasing,
    TransmissionBlockLoss,
    Banding,
    ToneError,
    ChromaGainError,
    DarkScene,
    FrameDropJudder,
    GhostBlend,
    TemporalJitter,
    BlackFrame,
    MotionBlur,
}

/// Labeled artifacts in weak-label bit order.
pub const ARTIFACTS: [DistortionKind; 10] = [
    DistortionKind::MotionBlur,
    DistortionKind::DarkScene,
    DistortionKind::GrainNoise,
    DistortionKind::Blockiness,
    DistortionKind::GaussianBlur,
    DistortionKind::FrameDropJudder,
    DistortionKind::Aliasing,
    DistortionKind::Banding,
    DistortionKind::TransmissionBlockLoss,
    DistortionKind::BlackFrame,
];

pub const ARTIFACT_DIM: usize = ARTIFACTS.len();

impl DistortionKind {
    pub const ALL: [DistortionKind; 14] = [
        DistortionKind::Blockiness,
        DistortionKind::GaussianBlur,
        DistortionKind::GrainNoise,
        DistortionKind::Aliasing,
        DistortionKind::TransmissionBlockLoss,
        DistortionKind::Banding,
        DistortionKind::ToneError,
        DistortionKind::ChromaGainError,
        DistortionKind::DarkScene,
        DistortionKind::FrameDropJudder,
        DistortionKind::GhostBlend,
        DistortionKind::TemporalJitter,
        DistortionKind::BlackFrame,
        DistortionKind::MotionBlur,
    ];

    pub fn domain(self) -> DomainTag {
        use DistortionKind::*;
        match self {
            Blockiness | GaussianBlur | GrainNoise | Aliasing | TransmissionBlockLoss => DomainTag::Spatial,
            Banding | ToneError | ChromaGainError | DarkScene => DomainTag::Color,
            FrameDropJudder | GhostBlend | TemporalJitter | BlackFrame | MotionBlur => DomainTag::Temporal,
        }
    }

    /// Position in the weak-label vector, if this kind is a labeled artifact.
    pub fn artifact_index(self) -> Option<usize> {
        ARTIFACTS.iter().position(|&k| k == self)
    }

    pub fn name(self) -> &'static str {
        use DistortionKind::*;
        match self {
            Blockiness => "blockiness",
            GaussianBlur => "gaussian_blur",
            GrainNoise => "grain_noise",
            Aliasing => "aliasing",
            TransmissionBlockLoss => "transmission_block_loss",
            Banding => "banding",
            ToneError => "tone_error",
            ChromaGainError => "chroma_gain_error",
            DarkScene => "dark_scene",
            FrameDropJudder => "frame_drop_judder",
            GhostBlend => "ghost_blend",
            TemporalJitter => "temporal_jitter",
            BlackFrame => "black_frame",
            MotionBlur => "motion_blur",
        }
    }

    /// Kernels in the temporal domain need at least this many frames.
    pub fn min_frames(self) -> usize {
        if self.domain() == DomainTag::Temporal {
            4
        } else {
            1
        }
    }

    /// Order in which stacked distortions are applied; black frames go last so they stay black.
    pub(crate) fn apply_rank(self) -> usize {
        match self {
            DistortionKind::BlackFrame => usize::MAX,
            k => k as usize,
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown distortion kind {s:?}")))
    }
}

/// One distortion to apply: kind, severity level 1..=5 and the kernel seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: u8,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return arg(format!("severity {severity} outside 1..=5"));
        }
        Ok(Self { kind, severity, seed })
    }
}

/// Binary artifact-presence vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeakLabelVector(Vec<u8>);

impl WeakLabelVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return arg("weak label bits must be 0 or 1");
        }
        Ok(Self(bits))
    }

    /// Labels implied by a set of applied distortions; unlabeled kinds contribute nothing.
    pub fn from_specs(specs: &[DistortionSpec], dim: usize) -> Result<Self> {
        let mut bits = vec![0; dim];
        for s in specs {
            if let Some(i) = s.kind.artifact_index() {
                if i >= dim {
                    return arg(format!("artifact {} has index {i} beyond label dimension {dim}", s.kind));
                }
                bits[i] = 1;
            }
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_pristine(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| f64::from(b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_has_one_domain_and_domains_partition_kinds() {
        let total: usize = DomainTag::ALL.iter().map(|d| d.kinds().len()).sum();
        assert_eq!(total, DistortionKind::ALL.len());
        for d in DomainTag::ALL {
            assert!(d.kinds().iter().all(|k| k.domain() == d));
        }
    }

    #[test]
    fn artifact_table_is_injective() {
        for (i, k) in ARTIFACTS.iter().enumerate() {
            assert_eq!(k.artifact_index(), Some(i));
        }
        assert_eq!(DistortionKind::ToneError.artifact_index(), None);
    }

    #[test]
    fn names_roundtrip() {
        for k in DistortionKind::ALL {
            assert_eq!(k.name().parse::<DistortionKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        for d in DomainTag::ALL {
            assert_eq!(d.name().parse::<DomainTag>().unwrap(), d);
        }
    }

    #[test]
    fn labels_from_specs() {
        let specs = [
            DistortionSpec::new(DistortionKind::Blockiness, 2, 0).unwrap(),
            DistortionSpec::new(DistortionKind::Banding, 4, 1).unwrap(),
        ];
        let l = WeakLabelVector::from_specs(&specs, ARTIFACT_DIM).unwrap();
        assert_eq!(l.bits().iter().filter(|&&b| b == 1).count(), 2);
        assert_eq!(l.bits()[3], 1);
        assert_eq!(l.bits()[7], 1);
        assert!(WeakLabelVector::from_specs(&[], ARTIFACT_DIM).unwrap().is_pristine());
        assert!(DistortionSpec::new(DistortionKind::Banding, 0, 1).is_err());
        assert!(DistortionSpec::new(DistortionKind::Banding, 6, 1).is_err());
    }
}
