//! In-memory corpora for all stages and their directory layout on disk.
//!
//! ```text
//! corpora/
//!   corpus.json                    config, seed and per-stage counts
//!   sources/{patch,video}/{train,val}/src-NNNN.raw
//!   stage1/{spatial,color,temporal}.json   per-domain pair manifests
//!   stage2/manifest.json
//!   stage3/manifest.json
//!   */patches/*.raw                only when `materialize_patches` is set
//! ```
//!
//! Manifests hold full provenance, so patches can always be re-rendered from sources.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{
    generate_artifact_records, generate_mos_records, generate_pair_records, ArtifactRecord, LabConfig, MosRecord,
    PairRecord,
};
use super::derive_seed;
use super::proxy::PairOracle;
use super::sources::synthesize_bank;
use super::taxonomy::DomainTag;
use crate::error::{Error, Result};
use crate::video::FrameSequence;

/// Sizes of every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub lab: LabConfig,
    pub train_sources: usize,
    pub val_sources: usize,
    /// Extra frames and pixels around the patch size so crops vary.
    pub source_margin: usize,
    pub hdr_fraction: f64,
    /// Stage-1 pairs per domain; domains absent from the map get none.
    pub pairs_per_domain: BTreeMap<DomainTag, usize>,
    pub val_pairs_per_domain: usize,
    pub artifact_patches: usize,
    pub val_artifact_patches: usize,
    pub mos_videos: usize,
    pub val_mos_videos: usize,
    pub materialize_patches: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            lab: LabConfig::desk(),
            train_sources: 24,
            val_sources: 8,
            source_margin: 16,
            hdr_fraction: 0.25,
            pairs_per_domain: DomainTag::ALL.into_iter().map(|d| (d, 2000)).collect(),
            val_pairs_per_domain: 300,
            artifact_patches: 2000,
            val_artifact_patches: 500,
            mos_videos: 300,
            val_mos_videos: 150,
            materialize_patches: false,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.lab.validate()?;
        if self.train_sources == 0 || self.val_sources == 0 {
            return Err(Error::Config("train_sources and val_sources must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hdr_fraction) {
            return Err(Error::Config("hdr_fraction must lie in [0, 1]".into()));
        }
        if self.pairs_per_domain.values().any(|&n| n == 0) {
            return Err(Error::Config("per-domain pair counts must be positive".into()));
        }
        if self.mos_videos < 2 || self.val_mos_videos < 2 {
            return Err(Error::Config("stage-3 splits need at least two videos".into()));
        }
        Ok(())
    }
}

/// Train and held-out source banks.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSources {
    pub train: Vec<FrameSequence>,
    pub val: Vec<FrameSequence>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: T,
    pub val: T,
}

/// All three corpora plus the sources they were cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    /// Sources for Stage-1/2 patches.
    pub patch_sources: SplitSources,
    /// Full-length sources for Stage-3 videos.
    pub video_sources: SplitSources,
    pub stage1: Split<BTreeMap<DomainTag, Vec<PairRecord>>>,
    pub stage2: Split<Vec<ArtifactRecord>>,
    pub stage3: Split<Vec<MosRecord>>,
}

#[derive(Serialize, Deserialize)]
struct CorpusIndex {
    seed: u64,
    config: CorpusConfig,
    counts: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest<R> {
    stage: u8,
    split: String,
    domain: Option<DomainTag>,
    count: usize,
    items: Vec<ManifestItem<R>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItem<R> {
    #[serde(flatten)]
    record: R,
    files: Vec<String>,
}

impl Corpus {
    /// Synthesizes sources and every corpus split from `seed`.
    pub fn build(config: &CorpusConfig, seed: u64, oracle: &dyn PairOracle) -> Result<Self> {
        config.validate()?;
        let lab = &config.lab;
        let (ph, pw) = (lab.patch_height + config.source_margin, lab.patch_width + config.source_margin);
        let bank = |count, frames, tag| synthesize_bank(count, frames, ph, pw, config.hdr_fraction, derive_seed(seed, &[tag]));
        let patch_sources = SplitSources {
            train: bank(config.train_sources, lab.patch_frames + 4, 11)?,
            val: bank(config.val_sources, lab.patch_frames + 4, 12)?,
        };
        let video_sources = SplitSources {
            train: bank(config.train_sources, lab.mos_frames, 13)?,
            val: bank(config.val_sources, lab.mos_frames, 14)?,
        };

        let mut stage1 = Split::<BTreeMap<DomainTag, Vec<PairRecord>>>::default();
        for (&domain, &count) in &config.pairs_per_domain {
            stage1.train.insert(
                domain,
                generate_pair_records(&patch_sources.train, domain, count, derive_seed(seed, &[21]), lab, oracle)?,
            );
            if config.val_pairs_per_domain > 0 {
                stage1.val.insert(
                    domain,
                    generate_pair_records(
                        &patch_sources.val,
                        domain,
                        config.val_pairs_per_domain,
                        derive_seed(seed, &[22]),
                        lab,
                        oracle,
                    )?,
                );
            }
        }
        let stage2 = Split {
            train: if config.artifact_patches > 0 {
                generate_artifact_records(&patch_sources.train, config.artifact_patches, derive_seed(seed, &[31]), lab)?
            } else {
                Vec::new()
            },
            val: if config.val_artifact_patches > 0 {
                generate_artifact_records(&patch_sources.val, config.val_artifact_patches, derive_seed(seed, &[32]), lab)?
            } else {
                Vec::new()
            },
        };
        let stage3 = Split {
            train: generate_mos_records(&video_sources.train, config.mos_videos, derive_seed(seed, &[41]), lab)?,
            val: generate_mos_records(&video_sources.val, config.val_mos_videos, derive_seed(seed, &[42]), lab)?,
        };
        Ok(Self { config: config.clone(), seed, patch_sources, video_sources, stage1, stage2, stage3 })
    }

    /// Item counts keyed like `stage1/train/spatial`.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut c = BTreeMap::new();
        for (split, map) in [("train", &self.stage1.train), ("val", &self.stage1.val)] {
            for (d, v) in map {
                c.insert(format!("stage1/{split}/{d}"), v.len());
            }
        }
        c.insert("stage2/train".into(), self.stage2.train.len());
        c.insert("stage2/val".into(), self.stage2.val.len());
        c.insert("stage3/train".into(), self.stage3.train.len());
        c.insert("stage3/val".into(), self.stage3.val.len());
        c
    }

    /// Human-readable summary, one line per split.
    pub fn summary(&self) -> String {
        self.counts().iter().map(|(k, v)| format!("{k:<24} {v:>7}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let index = CorpusIndex { seed: self.seed, config: self.config.clone(), counts: self.counts() };
        write_json(&dir.join("corpus.json"), &index)?;
        for (kind, split) in [("patch", &self.patch_sources), ("video", &self.video_sources)] {
            for (name, bank) in [("train", &split.train), ("val", &split.val)] {
                let d = dir.join("sources").join(kind).join(name);
                fs::create_dir_all(&d)?;
                for (i, s) in bank.iter().enumerate() {
                    s.write_raw(&d.join(format!("src-{i:04}.raw")))?;
                }
            }
        }
        let kernels = &self.config.lab.kernels;
        let materialize = self.config.materialize_patches;

        let s1 = dir.join("stage1");
        fs::create_dir_all(&s1)?;
        for (split, map, sources) in [
            ("train", &self.stage1.train, &self.patch_sources.train),
            ("val", &self.stage1.val, &self.patch_sources.val),
        ] {
            for (domain, records) in map {
                let items = records
                    .iter()
                    .map(|r| {
                        let files = if materialize {
                            let (a, b, _) = r.materialize(sources, kernels)?;
                            vec![
                                write_patch(&s1, split, &format!("{}-a", r.id), &a)?,
                                write_patch(&s1, split, &format!("{}-b", r.id), &b)?,
                            ]
                        } else {
                            Vec::new()
                        };
                        Ok(ManifestItem { record: r.clone(), files })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let m = Manifest { stage: 1, split: split.into(), domain: Some(*domain), count: items.len(), items };
                write_json(&s1.join(format!("{split}-{domain}.json")), &m)?;
            }
        }

        let s2 = dir.join("stage2");
        fs::create_dir_all(&s2)?;
        for (split, records, sources) in [
            ("train", &self.stage2.train, &self.patch_sources.train),
            ("val", &self.stage2.val, &self.patch_sources.val),
        ] {
            let items = records
                .iter()
                .map(|r| {
                    let files = if materialize {
                        vec![write_patch(&s2, split, &r.id, &r.materialize(sources, kernels)?.0)?]
                    } else {
                        Vec::new()
                    };
                    Ok(ManifestItem { record: r.clone(), files })
                })
                .collect::<Result<Vec<_>>>()?;
            let m = Manifest { stage: 2, split: split.into(), domain: None, count: items.len(), items };
            write_json(&s2.join(format!("{split}.json")), &m)?;
        }

        let s3 = dir.join("stage3");
        fs::create_dir_all(&s3)?;
        for (split, records, sources) in [
            ("train", &self.stage3.train, &self.video_sources.train),
            ("val", &self.stage3.val, &self.video_sources.val),
        ] {
            let items = records
                .iter()
                .map(|r| {
                    let files = if materialize {
                        vec![write_patch(&s3, split, &r.id, &r.materialize(sources, kernels)?.1)?]
                    } else {
                        Vec::new()
                    };
                    Ok(ManifestItem { record: r.clone(), files })
                })
                .collect::<Result<Vec<_>>>()?;
            let m = Manifest { stage: 3, split: split.into(), domain: None, count: items.len(), items };
            write_json(&s3.join(format!("{split}.json")), &m)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let index: CorpusIndex = read_json(&dir.join("corpus.json"))?;
        let load_bank = |kind: &str, split: &str, count: usize| -> Result<Vec<FrameSequence>> {
            let d = dir.join("sources").join(kind).join(split);
            (0..count).map(|i| FrameSequence::read_raw(&d.join(format!("src-{i:04}.raw")))).collect()
        };
        let cfg = &index.config;
        let patch_sources = SplitSources {
            train: load_bank("patch", "train", cfg.train_sources)?,
            val: load_bank("patch", "val", cfg.val_sources)?,
        };
        let video_sources = SplitSources {
            train: load_bank("video", "train", cfg.train_sources)?,
            val: load_bank("video", "val", cfg.val_sources)?,
        };
        let mut stage1 = Split::<BTreeMap<DomainTag, Vec<PairRecord>>>::default();
        for (split, map) in [("train", &mut stage1.train), ("val", &mut stage1.val)] {
            for domain in DomainTag::ALL {
                let p = dir.join("stage1").join(format!("{split}-{domain}.json"));
                if p.exists() {
                    let m: Manifest<PairRecord> = read_json(&p)?;
                    map.insert(domain, m.items.into_iter().map(|i| i.record).collect());
                }
            }
        }
        let read_items = |stage: &str, split: &str| -> Result<Vec<serde_json::Value>> {
            let m: Manifest<serde_json::Value> = read_json(&dir.join(stage).join(format!("{split}.json")))?;
            Ok(m.items.into_iter().map(|i| i.record).collect())
        };
        let stage2 = Split { train: parse(read_items("stage2", "train")?)?, val: parse(read_items("stage2", "val")?)? };
        let stage3 = Split { train: parse(read_items("stage3", "train")?)?, val: parse(read_items("stage3", "val")?)? };
        Ok(Self { config: index.config, seed: index.seed, patch_sources, video_sources, stage1, stage2, stage3 })
    }
}

fn parse<T: for<'de> Deserialize<'de>>(v: Vec<serde_json::Value>) -> Result<Vec<T>> {
    v.into_iter().map(|x| serde_json::from_value(x).map_err(Error::from)).collect()
}

fn write_patch(stage_dir: &Path, split: &str, id: &str, seq: &FrameSequence) -> Result<String> {
    let rel = PathBuf::from("patches").join(split).join(format!("{id}.raw"));
    let path = stage_dir.join(&rel);
    fs::create_dir_all(path.parent().expect("has parent"))?;
    seq.write_raw(&path)?;
    Ok(rel.to_string_lossy().into_owned())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}
