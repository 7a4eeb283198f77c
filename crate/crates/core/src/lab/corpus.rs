//! Corpus generators for the three training stages.
//!
//! Every item draws its randomness from `derive_seed(master, [stream, index, attempt])`,
//! so corpora are identical whether items are produced serially or in parallel.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::kernels::{apply_stack, KernelParams};
use super::proxy::PairOracle;
use super::taxonomy::{DistortionKind, DistortionSpec, DomainTag, WeakLabelVector, ARTIFACTS, ARTIFACT_DIM};
use crate::error::{arg, Error, Result};
use crate::video::FrameSequence;

const STREAM_PAIRS: u64 = 1;
const STREAM_ARTIFACTS: u64 = 2;
const STREAM_MOS: u64 = 3;

/// Generation settings shared by all corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    pub patch_frames: usize,
    /// Relative weights of severities 1..=5.
    pub severity_weights: [f64; 5],
    pub pristine_fraction: f64,
    pub max_artifacts: usize,
    pub mos_frames: usize,
    /// Attempts per item before a tied pair aborts generation.
    pub retry_budget: usize,
    pub kernels: KernelParams,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            patch_height: 256,
            patch_width: 256,
            patch_frames: 12,
            severity_weights: [1.0; 5],
            pristine_fraction: 0.2,
            max_artifacts: 3,
            mos_frames: 24,
            retry_budget: 16,
            kernels: KernelParams::default(),
        }
    }
}

impl LabConfig {
    /// 64x64x12 patches.
    pub fn desk() -> Self {
        Self { patch_height: 64, patch_width: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_height < 16 || self.patch_width < 16 || self.patch_frames == 0 {
            return Err(Error::Config("patch geometry must be at least 16x16x1".into()));
        }
        if self.severity_weights.iter().any(|w| !(*w >= 0.0)) || self.severity_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("severity weights must be non-negative with a positive sum".into()));
        }
        if !(0.0..=1.0).contains(&self.pristine_fraction) {
            return Err(Error::Config("pristine_fraction must lie in [0, 1]".into()));
        }
        if self.max_artifacts == 0 || self.max_artifacts > ARTIFACT_DIM {
            return Err(Error::Config(format!("max_artifacts must lie in 1..={ARTIFACT_DIM}")));
        }
        if self.mos_frames < 2 * self.patch_frames {
            return Err(Error::Config("mos_frames must cover at least two clips".into()));
        }
        if self.retry_budget == 0 {
            return Err(Error::Config("retry_budget must be positive".into()));
        }
        Ok(())
    }

    fn draw_severity(&self, rng: &mut ChaCha8Rng) -> u8 {
        let total: f64 = self.severity_weights.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for (i, &w) in self.severity_weights.iter().enumerate() {
            if u < w {
                return i as u8 + 1;
            }
            u -= w;
        }
        5
    }
}

/// Spatio-temporal crop of a source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub t0: usize,
    pub y0: usize,
    pub x0: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    fn draw(rng: &mut ChaCha8Rng, src: &FrameSequence, frames: usize, height: usize, width: usize) -> Result<Self> {
        if src.frames() < frames || src.height() < height || src.width() < width {
            return arg(format!(
                "source {}x{}x{} smaller than window {frames}x{height}x{width}",
                src.frames(),
                src.height(),
                src.width()
            ));
        }
        Ok(Self {
            t0: rng.random_range(0..=src.frames() - frames),
            y0: rng.random_range(0..=src.height() - height),
            x0: rng.random_range(0..=src.width() - width),
            frames,
            height,
            width,
        })
    }

    pub fn apply(&self, src: &FrameSequence) -> Result<FrameSequence> {
        src.crop(self.t0, self.frames, self.y0, self.x0, self.height, self.width)
    }
}

/// `f64` scores that may be `+inf` (PSNR of identical patches); stored as `"inf"` in JSON.
mod score_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad score {t:?}"))),
        }
    }
}

/// Provenance and label of one Stage-1 pair; the patches are re-rendered on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub domain: DomainTag,
    pub source: usize,
    pub window: CropWindow,
    pub spec_a: DistortionSpec,
    pub spec_b: DistortionSpec,
    #[serde(with = "score_serde")]
    pub proxy_a: f64,
    #[serde(with = "score_serde")]
    pub proxy_b: f64,
    pub v_binary: u8,
}

impl PairRecord {
    /// Renders `(patch_a, patch_b, reference)`.
    pub fn materialize(&self, sources: &[FrameSequence], kernels: &KernelParams) -> Result<(FrameSequence, FrameSequence, FrameSequence)> {
        let src = sources.get(self.source).ok_or_else(|| Error::Argument(format!("no source {}", self.source)))?;
        let reference = self.window.apply(src)?;
        let a = apply_stack(&reference, &[self.spec_a], kernels)?;
        let b = apply_stack(&reference, &[self.spec_b], kernels)?;
        Ok((a, b, reference))
    }

    /// The same pair with roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            spec_a: self.spec_b,
            spec_b: self.spec_a,
            proxy_a: self.proxy_b,
            proxy_b: self.proxy_a,
            v_binary: 1 - self.v_binary,
            ..self.clone()
        }
    }
}

/// A rendered Stage-1 training unit.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub patch_a: FrameSequence,
    pub patch_b: FrameSequence,
    pub reference: Option<FrameSequence>,
    pub domain: DomainTag,
    pub v_binary: u8,
    pub record: PairRecord,
}

impl PatchPair {
    pub fn swapped(&self) -> Self {
        Self {
            patch_a: self.patch_b.clone(),
            patch_b: self.patch_a.clone(),
            reference: self.reference.clone(),
            domain: self.domain,
            v_binary: 1 - self.v_binary,
            record: self.record.swapped(),
        }
    }
}

/// Labels one pair; `v_binary = 1` iff patch A scores strictly higher.
pub fn label_pair(proxy_a: f64, proxy_b: f64) -> Option<u8> {
    if proxy_a > proxy_b {
        Some(1)
    } else if proxy_b > proxy_a {
        Some(0)
    } else {
        None
    }
}

fn check_sources(sources: &[FrameSequence], count: usize) -> Result<()> {
    if sources.is_empty() {
        return arg("at least one source is required");
    }
    if count == 0 {
        return arg("count must be at least 1");
    }
    Ok(())
}

/// Stage-1 pair records for one domain. Tied pairs are redrawn up to `retry_budget` times.
pub fn generate_pair_records(
    sources: &[FrameSequence],
    domain: DomainTag,
    count: usize,
    seed: u64,
    cfg: &LabConfig,
    oracle: &dyn PairOracle,
) -> Result<Vec<PairRecord>> {
    Ok(generate_pairs_inner(sources, domain, count, seed, cfg, oracle, false)?.into_iter().map(|(r, _)| r).collect())
}

/// Stage-1 pairs with rendered patches.
pub fn generate_patch_pairs(
    sources: &[FrameSequence],
    domain: DomainTag,
    count: usize,
    seed: u64,
    cfg: &LabConfig,
    oracle: &dyn PairOracle,
) -> Result<Vec<PatchPair>> {
    generate_pairs_inner(sources, domain, count, seed, cfg, oracle, true)?
        .into_iter()
        .map(|(record, patches)| {
            let (patch_a, patch_b, reference) = patches.expect("patches kept");
            Ok(PatchPair { patch_a, patch_b, reference: Some(reference), domain, v_binary: record.v_binary, record })
        })
        .collect()
}

type Rendered = (FrameSequence, FrameSequence, FrameSequence);

fn generate_pairs_inner(
    sources: &[FrameSequence],
    domain: DomainTag,
    count: usize,
    seed: u64,
    cfg: &LabConfig,
    oracle: &dyn PairOracle,
    keep: bool,
) -> Result<Vec<(PairRecord, Option<Rendered>)>> {
    check_sources(sources, count)?;
    cfg.validate()?;
    let kinds = domain.kinds();
    let mut out = Vec::with_capacity(count);
    let mut ties = 0usize;
    for i in 0..count {
        let base_id = format!("{}-{i:06}", domain.name());
        let mut produced = None;
        for attempt in 0..cfg.retry_budget {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_PAIRS, domain.index() as u64, i as u64, attempt as u64]));
            let source = rng.random_range(0..sources.len());
            let window = CropWindow::draw(&mut rng, &sources[source], cfg.patch_frames, cfg.patch_height, cfg.patch_width)?;
            let mut spec = || {
                let kind = kinds[rng.random_range(0..kinds.len())];
                let severity = cfg.draw_severity(&mut rng);
                DistortionSpec { kind, severity, seed: rng.random() }
            };
            let (spec_a, spec_b) = (spec(), spec());
            let id = if attempt == 0 { base_id.clone() } else { format!("{base_id}-r{attempt}") };
            let mut record = PairRecord { id, domain, source, window, spec_a, spec_b, proxy_a: 0.0, proxy_b: 0.0, v_binary: 0 };
            let (a, b, reference) = record.materialize(sources, &cfg.kernels)?;
            record.proxy_a = oracle.score(&format!("{}-a", record.id), &reference, &a, domain)?;
            record.proxy_b = oracle.score(&format!("{}-b", record.id), &reference, &b, domain)?;
            match label_pair(record.proxy_a, record.proxy_b) {
                Some(v) => {
                    record.v_binary = v;
                    produced = Some((record, keep.then_some((a, b, reference))));
                    break;
                }
                None => ties += 1,
            }
        }
        match produced {
            Some(p) => out.push(p),
            None => {
                return Err(Error::Generation(format!(
                    "{domain} pair {i}: every one of {} attempts tied ({ties} ties so far, {} pairs produced)",
                    cfg.retry_budget,
                    out.len()
                )))
            }
        }
    }
    Ok(out)
}

/// Provenance of one Stage-2 artifact patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub id: String,
    pub source: usize,
    pub window: CropWindow,
    pub specs: Vec<DistortionSpec>,
    pub labels: WeakLabelVector,
}

impl ArtifactRecord {
    /// Renders `(patch, reference)`.
    pub fn materialize(&self, sources: &[FrameSequence], kernels: &KernelParams) -> Result<(FrameSequence, FrameSequence)> {
        let src = sources.get(self.source).ok_or_else(|| Error::Argument(format!("no source {}", self.source)))?;
        let reference = self.window.apply(src)?;
        Ok((apply_stack(&reference, &self.specs, kernels)?, reference))
    }
}

pub fn generate_artifact_records(sources: &[FrameSequence], count: usize, seed: u64, cfg: &LabConfig) -> Result<Vec<ArtifactRecord>> {
    check_sources(sources, count)?;
    cfg.validate()?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_ARTIFACTS, i as u64]));
        let source = rng.random_range(0..sources.len());
        let window = CropWindow::draw(&mut rng, &sources[source], cfg.patch_frames, cfg.patch_height, cfg.patch_width)?;
        let specs = if rng.random_bool(cfg.pristine_fraction) {
            Vec::new()
        } else {
            let n = rng.random_range(1..=cfg.max_artifacts);
            // Redraw combinations the patch length cannot host.
            loop {
                let kinds: Vec<DistortionKind> = sample(&mut rng, ARTIFACTS.len(), n).iter().map(|k| ARTIFACTS[k]).collect();
                if kinds.iter().all(|k| k.min_frames() <= window.frames) {
                    break kinds
                        .into_iter()
                        .map(|kind| DistortionSpec { kind, severity: cfg.draw_severity(&mut rng), seed: rng.random() })
                        .collect::<Vec<_>>();
                }
                if ARTIFACTS.iter().filter(|k| k.min_frames() <= window.frames).count() < n {
                    return arg(format!("{}-frame patches cannot host {n} artifacts", window.frames));
                }
            }
        };
        let labels = WeakLabelVector::from_specs(&specs, ARTIFACT_DIM)?;
        out.push(ArtifactRecord { id: format!("artifact-{i:06}"), source, window, specs, labels });
    }
    Ok(out)
}

/// Stage-2 patches with their weak labels.
pub fn generate_artifact_patches(
    sources: &[FrameSequence],
    count: usize,
    seed: u64,
    cfg: &LabConfig,
) -> Result<Vec<(FrameSequence, WeakLabelVector)>> {
    generate_artifact_records(sources, count, seed, cfg)?
        .into_iter()
        .map(|r| Ok((r.materialize(sources, &cfg.kernels)?.0, r.labels)))
        .collect()
}

/// Synthetic opinion score on the 0..100 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMos {
    pub score: f64,
    pub severity_source: u8,
    pub noise_seed: u64,
}

pub const MOS_SLOPE: f64 = 18.0;
pub const MOS_JITTER: f64 = 4.0;

/// Uniform jitter in `[-4, 4]` derived from a content hash.
pub fn mos_jitter(noise_seed: u64) -> f64 {
    let u = (derive_seed(noise_seed, &[0x4a17]) >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * u - 1.0) * MOS_JITTER
}

/// `100 - 18 * severity + jitter`, clamped to `[0, 100]`.
pub fn synthetic_mos(severity: u8, jitter: f64) -> f64 {
    (100.0 - MOS_SLOPE * f64::from(severity) + jitter).clamp(0.0, 100.0)
}

/// Provenance of one Stage-3 clip with its synthetic opinion score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub id: String,
    pub source: usize,
    pub window: CropWindow,
    pub domain: DomainTag,
    pub spec: DistortionSpec,
    pub mos: SyntheticMos,
    pub labels: WeakLabelVector,
}

impl MosRecord {
    /// Renders `(reference, distorted)`.
    pub fn materialize(&self, sources: &[FrameSequence], kernels: &KernelParams) -> Result<(FrameSequence, FrameSequence)> {
        let src = sources.get(self.source).ok_or_else(|| Error::Argument(format!("no source {}", self.source)))?;
        let reference = self.window.apply(src)?;
        let dist = apply_stack(&reference, &[self.spec], kernels)?;
        Ok((reference, dist))
    }
}

pub fn generate_mos_records(sources: &[FrameSequence], count: usize, seed: u64, cfg: &LabConfig) -> Result<Vec<MosRecord>> {
    check_sources(sources, count)?;
    if count < 2 {
        return arg("a MOS dataset needs at least two clips");
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_MOS, i as u64]));
        let source = rng.random_range(0..sources.len());
        let window = CropWindow::draw(&mut rng, &sources[source], cfg.mos_frames, cfg.patch_height, cfg.patch_width)?;
        let domain = DomainTag::ALL[rng.random_range(0..3)];
        let kinds = domain.kinds();
        let kind = kinds[rng.random_range(0..kinds.len())];
        let severity = cfg.draw_severity(&mut rng);
        let spec = DistortionSpec { kind, severity, seed: rng.random() };
        let noise_seed = derive_seed(seed, &[STREAM_MOS, i as u64, source as u64, window.t0 as u64, window.y0 as u64, window.x0 as u64]);
        let mos = SyntheticMos { score: synthetic_mos(severity, mos_jitter(noise_seed)), severity_source: severity, noise_seed };
        let labels = WeakLabelVector::from_specs(&[spec], ARTIFACT_DIM)?;
        out.push(MosRecord { id: format!("mos-{i:06}"), source, window, domain, spec, mos, labels });
    }
    Ok(out)
}

/// Stage-3 clips as `(reference, distorted, mos)`.
pub fn generate_mos_dataset(
    sources: &[FrameSequence],
    count: usize,
    seed: u64,
    cfg: &LabConfig,
) -> Result<Vec<(FrameSequence, FrameSequence, SyntheticMos)>> {
    generate_mos_records(sources, count, seed, cfg)?
        .into_iter()
        .map(|r| {
            let (reference, dist) = r.materialize(sources, &cfg.kernels)?;
            Ok((reference, dist, r.mos))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::proxy::{compute_proxy, BuiltinProxies, ProxyMetricRef};
    use crate::lab::sources::synthesize_bank;

    fn cfg() -> LabConfig {
        LabConfig { patch_height: 32, patch_width: 32, patch_frames: 6, mos_frames: 12, ..LabConfig::desk() }
    }

    fn bank() -> Vec<FrameSequence> {
        synthesize_bank(3, 12, 40, 40, 0.34, 9).unwrap()
    }

    #[test]
    fn pairs_are_deterministic_pure_and_consistent_with_proxies() {
        let (sources, cfg) = (bank(), cfg());
        for domain in DomainTag::ALL {
            let pairs = generate_patch_pairs(&sources, domain, 6, 42, &cfg, &BuiltinProxies).unwrap();
            let again = generate_patch_pairs(&sources, domain, 6, 42, &cfg, &BuiltinProxies).unwrap();
            assert_eq!(pairs, again);
            for p in &pairs {
                assert_eq!(p.record.spec_a.kind.domain(), domain);
                assert_eq!(p.record.spec_b.kind.domain(), domain);
                let r = p.reference.as_ref().unwrap();
                let proxy = ProxyMetricRef::builtin(domain);
                let qa = compute_proxy(r, &p.patch_a, &proxy).unwrap();
                let qb = compute_proxy(r, &p.patch_b, &proxy).unwrap();
                assert_eq!(p.v_binary, u8::from(qa > qb));
                assert_eq!(p.swapped().v_binary, 1 - p.v_binary);
            }
        }
    }

    #[test]
    fn records_match_rendered_pairs() {
        let (sources, cfg) = (bank(), cfg());
        let recs = generate_pair_records(&sources, DomainTag::Color, 4, 1, &cfg, &BuiltinProxies).unwrap();
        let pairs = generate_patch_pairs(&sources, DomainTag::Color, 4, 1, &cfg, &BuiltinProxies).unwrap();
        for (r, p) in recs.iter().zip(&pairs) {
            assert_eq!(r, &p.record);
            let (a, b, _) = r.materialize(&sources, &cfg.kernels).unwrap();
            assert_eq!((a, b), (p.patch_a.clone(), p.patch_b.clone()));
        }
    }

    #[test]
    fn mild_versus_severe_of_same_kind_prefers_mild() {
        let (sources, cfg) = (bank(), cfg());
        let window = CropWindow { t0: 0, y0: 0, x0: 0, frames: 6, height: 32, width: 32 };
        for kind in DomainTag::Spatial.kinds() {
            let rec = PairRecord {
                id: "x".into(),
                domain: DomainTag::Spatial,
                source: 0,
                window,
                spec_a: DistortionSpec::new(kind, 1, 5).unwrap(),
                spec_b: DistortionSpec::new(kind, 5, 5).unwrap(),
                proxy_a: 0.0,
                proxy_b: 0.0,
                v_binary: 0,
            };
            let (a, b, r) = rec.materialize(&sources, &cfg.kernels).unwrap();
            let proxy = ProxyMetricRef::builtin(DomainTag::Spatial);
            let label = label_pair(compute_proxy(&r, &a, &proxy).unwrap(), compute_proxy(&r, &b, &proxy).unwrap());
            assert_eq!(label, Some(1), "{kind}");
        }
    }

    #[test]
    fn tie_exhaustion_is_a_generation_error() {
        struct Flat;
        impl PairOracle for Flat {
            fn score(&self, _: &str, _: &FrameSequence, _: &FrameSequence, _: DomainTag) -> Result<f64> {
                Ok(1.0)
            }
        }
        let err = generate_pair_records(&bank(), DomainTag::Spatial, 2, 0, &cfg(), &Flat).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn artifact_labels_match_provenance() {
        let (sources, cfg) = (bank(), cfg());
        let recs = generate_artifact_records(&sources, 200, 3, &cfg).unwrap();
        for r in &recs {
            assert!(r.specs.len() <= 3);
            let kinds: std::collections::BTreeSet<_> = r.specs.iter().map(|s| s.kind).collect();
            assert_eq!(kinds.len(), r.specs.len(), "drawn without replacement");
            for (i, &bit) in r.labels.bits().iter().enumerate() {
                assert_eq!(bit == 1, kinds.contains(&ARTIFACTS[i]));
            }
        }
        assert!(recs.iter().any(|r| r.labels.is_pristine()));
    }

    #[test]
    fn pristine_fraction_near_configured() {
        let recs = generate_artifact_records(&bank(), 1000, 17, &cfg()).unwrap();
        let pristine = recs.iter().filter(|r| r.specs.is_empty()).count();
        assert!((150..=250).contains(&pristine), "{pristine}");
        assert!(recs.iter().filter(|r| r.specs.is_empty()).all(|r| r.labels.is_pristine()));
    }

    #[test]
    fn mos_formula_and_jitter() {
        assert_eq!(synthetic_mos(1, 0.0), 82.0);
        assert_eq!(synthetic_mos(5, 0.0), 10.0);
        assert_eq!(synthetic_mos(5, -15.0), 0.0);
        for s in 0..2000u64 {
            let j = mos_jitter(s);
            assert!((-4.0..=4.0).contains(&j));
        }
        for sev in 1..5u8 {
            assert!(synthetic_mos(sev, 4.0) > synthetic_mos(sev + 1, 4.0));
        }
    }

    #[test]
    fn mos_dataset_is_full_length_and_covers_domains() {
        let (sources, cfg) = (bank(), cfg());
        let recs = generate_mos_records(&sources, 60, 5, &cfg).unwrap();
        let domains: std::collections::BTreeSet<_> = recs.iter().map(|r| r.domain).collect();
        assert_eq!(domains.len(), 3);
        for r in &recs {
            assert_eq!(r.window.frames, cfg.mos_frames);
            assert_eq!(r.spec.kind.domain(), r.domain);
            let expected = synthetic_mos(r.mos.severity_source, mos_jitter(r.mos.noise_seed));
            assert_eq!(r.mos.score, expected);
        }
        let data = generate_mos_dataset(&sources, 3, 5, &cfg).unwrap();
        assert_eq!(data[0].0.frames(), 12);
        assert!(generate_mos_records(&sources, 1, 5, &cfg).is_err());
    }

    #[test]
    fn records_serialize_infinite_proxies() {
        let sources = bank();
        let mut rec = generate_pair_records(&sources, DomainTag::Spatial, 1, 0, &cfg(), &BuiltinProxies).unwrap().remove(0);
        rec.proxy_a = f64::INFINITY;
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<PairRecord>(&json).unwrap(), rec);
    }
}
