use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::lab::{Corpus, DomainTag, PairRecord};
use crate::model::{AggregatorKind, ExpertLayout, Mode};
use crate::train::Stage;
use crate::video::RangeTag;

/// Ablation variants. Each maps to a fixed set of config deltas plus, for the
/// data-reduction rows, a Stage-1 corpus filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// One shared adapter of matched parameter count instead of three experts.
    #[serde(rename = "V1_single_expert")]
    V1SingleExpert,
    /// Temporal 1-D convolution aggregator instead of slow/fast.
    #[serde(rename = "V2_cnn_aggregator")]
    V2CnnAggregator,
    /// Quality only: artifact weight 0 and no Stage 2.
    #[serde(rename = "V3_no_udh")]
    V3NoUdh,
    /// Spatial expert trained on SDR-source spatial pairs only.
    #[serde(rename = "V4_spatial_hd_only")]
    V4SpatialHdOnly,
    /// Spatial expert with all spatial pairs.
    #[serde(rename = "V5_full_spatial_only")]
    V5FullSpatialOnly,
    /// Spatial and colour experts with their pairs.
    #[serde(rename = "V6_spatial_color")]
    V6SpatialColor,
    /// All three domains; identical to `full`.
    #[serde(rename = "V7_all_domains")]
    V7AllDomains,
    /// No-reference single expert.
    #[serde(rename = "NR_V1")]
    NrV1,
    /// No-reference with the convolutional temporal aggregator.
    #[serde(rename = "NR_V2")]
    NrV2,
    /// No-reference without the diagnostic head.
    #[serde(rename = "NR_V3")]
    NrV3,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::V1SingleExpert,
        Variant::V2CnnAggregator,
        Variant::V3NoUdh,
        Variant::V4SpatialHdOnly,
        Variant::V5FullSpatialOnly,
        Variant::V6SpatialColor,
        Variant::V7AllDomains,
        Variant::NrV1,
        Variant::NrV2,
        Variant::NrV3,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::V1SingleExpert => "V1_single_expert",
            Variant::V2CnnAggregator => "V2_cnn_aggregator",
            Variant::V3NoUdh => "V3_no_udh",
            Variant::V4SpatialHdOnly => "V4_spatial_hd_only",
            Variant::V5FullSpatialOnly => "V5_full_spatial_only",
            Variant::V6SpatialColor => "V6_spatial_color",
            Variant::V7AllDomains => "V7_all_domains",
            Variant::NrV1 => "NR_V1",
            Variant::NrV2 => "NR_V2",
            Variant::NrV3 => "NR_V3",
        }
    }

    fn no_reference(self) -> bool {
        matches!(self, Variant::NrV1 | Variant::NrV2 | Variant::NrV3)
    }

    fn single_expert(self) -> bool {
        matches!(self, Variant::V1SingleExpert | Variant::NrV1)
    }

    fn cnn(self) -> bool {
        matches!(self, Variant::V2CnnAggregator | Variant::NrV2)
    }

    /// Whether the diagnostic head is trained (Stage 2 runs).
    pub fn has_diagnostics(self) -> bool {
        !matches!(self, Variant::V3NoUdh | Variant::NrV3)
    }

    /// Stage-1 domains kept by the data-reduction rows.
    pub fn domains(self) -> Option<Vec<DomainTag>> {
        match self {
            Variant::V4SpatialHdOnly | Variant::V5FullSpatialOnly => Some(vec![DomainTag::Spatial]),
            Variant::V6SpatialColor => Some(vec![DomainTag::Spatial, DomainTag::Color]),
            _ => None,
        }
    }

    /// Training stages in order.
    pub fn stages(self) -> Vec<Stage> {
        if self.has_diagnostics() {
            vec![Stage::S1RankPretrain, Stage::S2Diagnostic, Stage::S3Joint]
        } else {
            vec![Stage::S1RankPretrain, Stage::S3Joint]
        }
    }

    /// Dotted config keys this variant changes; `apply` touches nothing else.
    pub fn deltas(self) -> Vec<&'static str> {
        let mut d = Vec::new();
        if self.no_reference() {
            d.push("model.mode");
        }
        if self.single_expert() {
            d.extend(["model.experts", "model.adapter_bottleneck"]);
        }
        if self.cnn() {
            d.push("model.aggregator");
        }
        if !self.has_diagnostics() {
            d.push("train.lambda_a");
        }
        if self.domains().is_some() {
            d.extend(["model.experts", "corpus.pairs_per_domain"]);
        }
        d
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.variant = self;
        if self.no_reference() {
            cfg.model.mode = Mode::Nr;
        }
        if self.single_expert() {
            let d = cfg.model.embed_dim;
            let experts = cfg.model.experts.num_experts();
            cfg.model.adapter_bottleneck = matched_bottleneck(d, cfg.model.adapter_bottleneck, experts);
            cfg.model.experts = ExpertLayout::Shared;
        }
        if self.cnn() {
            cfg.model.aggregator = AggregatorKind::Cnn;
        }
        if !self.has_diagnostics() {
            cfg.train.lambda_a = 0.0;
        }
        if let Some(domains) = self.domains() {
            cfg.model.experts = ExpertLayout::PerDomain { domains: domains.clone() };
            cfg.corpus.pairs_per_domain.retain(|d, _| domains.contains(d));
        }
        cfg
    }

    /// Restricts the Stage-1 corpus to this variant's data. Other stages are shared.
    pub fn restrict(self, corpus: &Corpus) -> Corpus {
        let Some(domains) = self.domains() else { return corpus.clone() };
        let sdr_only = self == Variant::V4SpatialHdOnly;
        let keep = |map: &BTreeMap<DomainTag, Vec<PairRecord>>, sources: &[crate::FrameSequence]| {
            map.iter()
                .filter(|(d, _)| domains.contains(d))
                .map(|(&d, recs)| {
                    let recs = recs.iter().filter(|r| !sdr_only || sources[r.source].range() == RangeTag::Sdr).cloned().collect();
                    (d, recs)
                })
                .collect()
        };
        let mut out = corpus.clone();
        out.stage1.train = keep(&corpus.stage1.train, &corpus.patch_sources.train);
        out.stage1.val = keep(&corpus.stage1.val, &corpus.patch_sources.val);
        out
    }
}

/// Bottleneck of one shared adapter whose parameter count is closest to, without
/// exceeding, `experts` adapters of bottleneck `b` (an adapter has `2db + b + d` parameters).
pub fn matched_bottleneck(d: usize, b: usize, experts: usize) -> usize {
    let budget = experts * (2 * d * b + b + d);
    ((budget - d) / (2 * d + 1)).max(1)
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of {}", Variant::ALL.map(|v| v.tag()).join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn leaves(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
        match v {
            serde_json::Value::Object(m) => m.iter().for_each(|(k, v)| leaves(&format!("{prefix}{k}."), v, out)),
            _ => {
                out.insert(prefix.trim_end_matches('.').to_string(), v.clone());
            }
        }
    }

    /// Top-level keys whose subtree differs between the two configs, at depth two.
    fn changed(a: &RunConfig, b: &RunConfig) -> Vec<String> {
        let (mut la, mut lb) = (BTreeMap::new(), BTreeMap::new());
        leaves("", &serde_json::to_value(a).unwrap(), &mut la);
        leaves("", &serde_json::to_value(b).unwrap(), &mut lb);
        let mut keys: Vec<String> = la
            .keys()
            .chain(lb.keys())
            .filter(|k| la.get(*k) != lb.get(*k))
            .map(|k| k.split('.').take(2).collect::<Vec<_>>().join("."))
            .filter(|k| k != "variant")
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }

    #[test]
    fn variants_differ_only_in_documented_deltas() {
        let base = RunConfig::desk();
        for v in Variant::ALL {
            let mut expected: Vec<String> = v.deltas().into_iter().map(String::from).collect();
            expected.sort();
            expected.dedup();
            assert_eq!(changed(&base, &v.apply(&base)), expected, "{v}");
        }
    }

    #[test]
    fn tags_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.tag()));
        }
        assert!("V8".parse::<Variant>().is_err());
    }

    #[test]
    fn single_expert_matches_parameter_count() {
        let base = RunConfig::desk();
        let nr = RunConfig { model: crate::model::ModelConfig { mode: Mode::Nr, ..base.model.clone() }, ..base.clone() };
        for (v, reference) in [(Variant::V1SingleExpert, &base), (Variant::NrV1, &nr)] {
            let cfg = v.apply(&base);
            assert_eq!(cfg.model.experts.num_experts(), 1);
            let params = |c: &crate::model::ModelConfig| Model::new(c.clone(), 1).unwrap().summarize(64, 64).total_params as f64;
            let ratio = params(&cfg.model) / params(&reference.model);
            assert!((ratio - 1.0).abs() < 0.05, "{v}: {ratio}");
        }
    }

    #[test]
    fn no_udh_drops_stage_two_and_the_artifact_weight() {
        let cfg = Variant::V3NoUdh.apply(&RunConfig::desk());
        assert_eq!(cfg.train.lambda_a, 0.0);
        assert_eq!(Variant::V3NoUdh.stages(), vec![Stage::S1RankPretrain, Stage::S3Joint]);
        assert_eq!(Variant::Full.stages().len(), 3);
    }

    #[test]
    fn all_domains_row_is_the_full_model() {
        let base = RunConfig::desk();
        let (a, b) = (Variant::Full.apply(&base), Variant::V7AllDomains.apply(&base));
        assert_eq!(a.model, b.model);
        assert_eq!(a.train, b.train);
        assert_eq!(a.corpus, b.corpus);
    }
}
