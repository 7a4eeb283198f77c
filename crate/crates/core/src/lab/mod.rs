//! Synthetic data laboratory: distortion kernels, proxy oracles, procedural
//! sources and the generators for all three training corpora.

pub mod corpus;
pub mod kernels;
pub mod proxy;
pub mod sources;
pub mod store;
pub mod taxonomy;

pub use corpus::{
    generate_artifact_patches, generate_artifact_records, generate_mos_dataset, generate_mos_records,
    generate_pair_records, generate_patch_pairs, label_pair, mos_jitter, synthetic_mos, ArtifactRecord, CropWindow,
    LabConfig, MosRecord, PairRecord, PatchPair, SyntheticMos,
};
pub use kernels::{apply_distortion, apply_distortion_with, apply_stack, KernelParams};
pub use proxy::{compute_proxy, BuiltinProxies, ExternalProxyScores, PairOracle, ProxyMetricRef};
pub use sources::{synthesize_bank, synthesize_source, SourceStyle};
pub use store::{Corpus, CorpusConfig};
pub use taxonomy::{DistortionKind, DistortionSpec, DomainTag, WeakLabelVector, ARTIFACTS, ARTIFACT_DIM};

/// Splittable seed derivation: a SplitMix64 chain over `master` and `parts`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}
