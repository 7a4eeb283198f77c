//! Domain-matched proxy quality oracles used to label Stage-1 pairs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::taxonomy::DomainTag;
use crate::error::{Error, Result};
use crate::metrics::luma;
use crate::video::{FrameSequence, CHANNELS};

pub const LUMA_PSNR: &str = "luma_psnr";
pub const CHROMA_WEIGHTED_MSE: &str = "chroma_weighted_mse";
pub const TEMPORAL_DIFFERENCE_MSE: &str = "temporal_difference_mse";

const COLOR_WEIGHTS: [f64; 3] = [0.2, 0.4, 0.4];
const TRANSFER_GAMMA: f64 = 1.0 / 2.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyDirection {
    HigherIsBetter,
}

/// Names the proxy metric responsible for one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyMetricRef {
    pub name: String,
    pub domain: DomainTag,
    pub direction: ProxyDirection,
}

impl ProxyMetricRef {
    /// The built-in analytic proxy for `domain`.
    pub fn builtin(domain: DomainTag) -> Self {
        let name = match domain {
            DomainTag::Spatial => LUMA_PSNR,
            DomainTag::Color => CHROMA_WEIGHTED_MSE,
            DomainTag::Temporal => TEMPORAL_DIFFERENCE_MSE,
        };
        Self { name: name.into(), domain, direction: ProxyDirection::HigherIsBetter }
    }
}

/// Scores `dist` against `reference`; higher is better for every proxy.
///
/// Built-ins: luma PSNR (spatial, `+inf` when identical), negated chroma-weighted
/// MSE after a gamma transfer (colour), and negated MSE between successive-frame
/// luma differences (temporal).
pub fn compute_proxy(reference: &FrameSequence, dist: &FrameSequence, proxy: &ProxyMetricRef) -> Result<f64> {
    let natural = match proxy.name.as_str() {
        LUMA_PSNR => DomainTag::Spatial,
        CHROMA_WEIGHTED_MSE => DomainTag::Color,
        TEMPORAL_DIFFERENCE_MSE => DomainTag::Temporal,
        other => return Err(Error::Config(format!("unknown built-in proxy {other:?}"))),
    };
    if natural != proxy.domain {
        return Err(Error::Config(format!(
            "proxy {} serves the {natural} domain but is declared for {}",
            proxy.name, proxy.domain
        )));
    }
    reference.check_same_geometry(dist)?;
    Ok(match natural {
        DomainTag::Spatial => luma_psnr(reference, dist),
        DomainTag::Color => -chroma_weighted_mse(reference, dist),
        DomainTag::Temporal => -temporal_difference_mse(reference, dist),
    })
}

fn luma_plane(s: &FrameSequence) -> Vec<f64> {
    s.samples()
        .chunks_exact(CHANNELS)
        .map(|p| luma(f64::from(p[0]), f64::from(p[1]), f64::from(p[2])))
        .collect()
}

fn luma_psnr(reference: &FrameSequence, dist: &FrameSequence) -> f64 {
    let (a, b) = (luma_plane(reference), luma_plane(dist));
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let max = reference.max_value();
    10.0 * (max * max / mse).log10()
}

fn transferred_ycc(s: &FrameSequence) -> Vec<[f64; 3]> {
    let max = s.max_value();
    s.samples()
        .chunks_exact(CHANNELS)
        .map(|p| {
            let [r, g, b] = [p[0], p[1], p[2]].map(|v| (f64::from(v) / max).powf(TRANSFER_GAMMA));
            let y = luma(r, g, b);
            [y, 0.564 * (b - y), 0.713 * (r - y)]
        })
        .collect()
}

fn chroma_weighted_mse(reference: &FrameSequence, dist: &FrameSequence) -> f64 {
    let (a, b) = (transferred_ycc(reference), transferred_ycc(dist));
    let mut acc = [0.0; 3];
    for (p, q) in a.iter().zip(&b) {
        for c in 0..3 {
            acc[c] += (p[c] - q[c]).powi(2);
        }
    }
    let n = a.len() as f64;
    (0..3).map(|c| COLOR_WEIGHTS[c] * acc[c] / n).sum()
}

fn temporal_difference_mse(reference: &FrameSequence, dist: &FrameSequence) -> f64 {
    let max = reference.max_value();
    let (a, b) = (luma_plane(reference), luma_plane(dist));
    let n = reference.height() * reference.width();
    let frames = reference.frames();
    if frames < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 1..frames {
        for i in 0..n {
            let da = a[t * n + i] - a[(t - 1) * n + i];
            let db = b[t * n + i] - b[(t - 1) * n + i];
            acc += ((da - db) / max).powi(2);
        }
    }
    acc / ((frames - 1) * n) as f64
}

/// How Stage-1 pairs get their proxy scores.
pub trait PairOracle {
    /// Score for the patch identified by `patch_id`.
    fn score(&self, patch_id: &str, reference: &FrameSequence, dist: &FrameSequence, domain: DomainTag) -> Result<f64>;
}

/// Built-in analytic proxies, one per domain.
#[derive(Clone, Debug, Default)]
pub struct BuiltinProxies;

impl PairOracle for BuiltinProxies {
    fn score(&self, _id: &str, reference: &FrameSequence, dist: &FrameSequence, domain: DomainTag) -> Result<f64> {
        compute_proxy(reference, dist, &ProxyMetricRef::builtin(domain))
    }
}

/// Externally computed proxy scores keyed by patch ID.
///
/// The file is a JSON object mapping patch IDs to numbers, higher meaning better.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExternalProxyScores {
    scores: HashMap<String, f64>,
}

impl ExternalProxyScores {
    pub fn new(scores: HashMap<String, f64>) -> Self {
        Self { scores }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

impl PairOracle for ExternalProxyScores {
    fn score(&self, patch_id: &str, _r: &FrameSequence, _d: &FrameSequence, _domain: DomainTag) -> Result<f64> {
        self.scores
            .get(patch_id)
            .copied()
            .ok_or_else(|| Error::Generation(format!("no external proxy score for patch {patch_id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::kernels::apply_distortion;
    use crate::lab::sources::{synthesize_source, SourceStyle};
    use crate::lab::taxonomy::{DistortionKind, DistortionSpec};
    use crate::metrics::psnr;

    fn src() -> FrameSequence {
        synthesize_source(21, 6, 32, 32, SourceStyle::default_sdr()).unwrap()
    }

    #[test]
    fn identity_scores_are_maximal() {
        let s = src();
        assert_eq!(compute_proxy(&s, &s, &ProxyMetricRef::builtin(DomainTag::Spatial)).unwrap(), f64::INFINITY);
        assert_eq!(compute_proxy(&s, &s, &ProxyMetricRef::builtin(DomainTag::Color)).unwrap(), 0.0);
        assert_eq!(compute_proxy(&s, &s, &ProxyMetricRef::builtin(DomainTag::Temporal)).unwrap(), 0.0);
    }

    #[test]
    fn temporal_proxy_ignores_static_offsets() {
        let s = FrameSequence::from_fn(5, 16, 16, 8, 30.0, crate::video::RangeTag::Sdr, |t, y, x, c| {
            (40 + t * 9 + y * 3 + x + c * 5) as f64
        })
        .unwrap();
        let shifted = s.with_samples(s.samples().iter().map(|v| v + 20).collect()).unwrap();
        assert!(compute_proxy(&s, &shifted, &ProxyMetricRef::builtin(DomainTag::Temporal)).unwrap().abs() < 1e-20);
        assert!(compute_proxy(&s, &shifted, &ProxyMetricRef::builtin(DomainTag::Spatial)).unwrap().is_finite());
    }

    #[test]
    fn spatial_proxy_is_luma_psnr() {
        let s = src();
        let d = apply_distortion(&s, &DistortionSpec::new(DistortionKind::GaussianBlur, 3, 0).unwrap()).unwrap();
        let v = compute_proxy(&s, &d, &ProxyMetricRef::builtin(DomainTag::Spatial)).unwrap();
        // Luma PSNR sits near the all-channel PSNR for a channel-uniform blur.
        assert!((v - psnr(&s, &d).unwrap()).abs() < 3.0);
    }

    #[test]
    fn mismatched_proxy_is_a_config_error() {
        let s = src();
        let mut p = ProxyMetricRef::builtin(DomainTag::Spatial);
        p.domain = DomainTag::Temporal;
        assert!(matches!(compute_proxy(&s, &s, &p), Err(Error::Config(_))));
        p.name = "vmaf".into();
        assert!(matches!(compute_proxy(&s, &s, &p), Err(Error::Config(_))));
    }

    #[test]
    fn external_scores_lookup() {
        let ext = ExternalProxyScores::new(HashMap::from([("p1".to_string(), 3.5)]));
        let s = src();
        assert_eq!(ext.score("p1", &s, &s, DomainTag::Color).unwrap(), 3.5);
        assert!(matches!(ext.score("p2", &s, &s, DomainTag::Color), Err(Error::Generation(_))));
    }
}
