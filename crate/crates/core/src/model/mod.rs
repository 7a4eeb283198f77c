//! The network: shared extractor, fixed-role expert adapters, spatio-temporal
//! aggregator and the dual quality/artifact head.

mod checkpoint;
mod config;
mod input;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{AggregatorKind, ExpertLayout, Mode, ModelConfig};
pub use input::{assemble_input, ModelInput};
pub use layers::{position_code, Adapter, Aggregator, Extractor, Head};

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, Error, Result};
use crate::lab::DomainTag;
use crate::nn::{Param, Visit};
use layers::{AdapterCache, AggregatorCache, ExtractorCache, HeadCache};

pub const EXTRACTOR: &str = "extractor";
pub const AGGREGATOR: &str = "aggregator";
pub const HEAD_Q: &str = "head_Q";
pub const HEAD_A: &str = "head_A";

/// Which adapters run on the three feature streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    /// Training routing: only the expert of this domain runs, on its own stream.
    Domain(DomainTag),
    /// Inference routing: every expert runs on its stream.
    All,
}

/// Feature streams in `[spatial, color, temporal]` order, each `(frames * tokens) x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Streams {
    pub features: [Array2<f64>; 3],
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub q: f64,
    pub a: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub experts: Vec<Adapter>,
    pub aggregator: Aggregator,
    pub head_q: Head,
    pub head_a: Head,
    frozen: BTreeMap<String, bool>,
}

/// Caches of a stream computation, for backprop into extractor and experts.
#[derive(Clone, Debug)]
pub struct StreamCache {
    extractor: ExtractorCache,
    /// Adapter index per stream, `None` for raw extractor output.
    sources: [Option<usize>; 3],
    adapters: Vec<(usize, AdapterCache)>,
}

#[derive(Clone, Debug)]
pub struct FusionCache {
    aggregator: AggregatorCache,
    z: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct ClipCache {
    pub streams: StreamCache,
    pub fusion: FusionCache,
    pub heads: HeadsCache,
}

#[derive(Clone, Debug)]
pub struct HeadsCache {
    q: HeadCache,
    a: HeadCache,
}

impl Model {
    /// Fresh model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let extractor = Extractor::new(&config, &mut rng);
        let experts = (0..config.experts.num_experts()).map(|_| Adapter::new(d, config.adapter_bottleneck, &mut rng)).collect();
        let aggregator = Aggregator::new(&config, &mut rng);
        let z = config.fused_dim();
        let head_q = Head::new(z, config.head_hidden, 1, false, &mut rng);
        let head_a = Head::new(z, config.head_hidden, config.artifact_dim, true, &mut rng);
        let mut m = Self { config, extractor, experts, aggregator, head_q, head_a, frozen: BTreeMap::new() };
        for g in m.group_names() {
            m.frozen.insert(g, false);
        }
        Ok(m)
    }

    /// Parameter groups in a fixed order.
    pub fn group_names(&self) -> Vec<String> {
        let mut g = vec![EXTRACTOR.to_string()];
        g.extend((0..self.experts.len()).map(|i| self.config.experts.group_name(i)));
        g.extend([AGGREGATOR, HEAD_Q, HEAD_A].map(String::from));
        g
    }

    pub fn expert_groups(&self) -> Vec<String> {
        (0..self.experts.len()).map(|i| self.config.experts.group_name(i)).collect()
    }

    /// Visits every parameter with its group and name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &str, &Param)) {
        self.extractor.visit("", &mut |n, p| f(EXTRACTOR, n, p));
        for (i, e) in self.experts.iter().enumerate() {
            let g = self.config.experts.group_name(i);
            e.visit("", &mut |n, p| f(&g, n, p));
        }
        self.aggregator.visit("", &mut |n, p| f(AGGREGATOR, n, p));
        self.head_q.visit("", &mut |n, p| f(HEAD_Q, n, p));
        self.head_a.visit("", &mut |n, p| f(HEAD_A, n, p));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &str, &mut Param)) {
        self.extractor.visit_mut("", &mut |n, p| f(EXTRACTOR, n, p));
        for (i, e) in self.experts.iter_mut().enumerate() {
            let g = self.config.experts.group_name(i);
            e.visit_mut("", &mut |n, p| f(&g, n, p));
        }
        self.aggregator.visit_mut("", &mut |n, p| f(AGGREGATOR, n, p));
        self.head_q.visit_mut("", &mut |n, p| f(HEAD_Q, n, p));
        self.head_a.visit_mut("", &mut |n, p| f(HEAD_A, n, p));
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.get(group).copied().unwrap_or(false)
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        match self.frozen.get_mut(group) {
            Some(f) => {
                *f = frozen;
                Ok(())
            }
            None => arg(format!("unknown parameter group {group:?}")),
        }
    }

    pub fn frozen_flags(&self) -> &BTreeMap<String, bool> {
        &self.frozen
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, _, p| p.zero_grad());
    }

    /// Largest absolute gradient entry in `group`.
    pub fn max_abs_grad(&self, group: &str) -> f64 {
        let mut m: f64 = 0.0;
        self.visit(&mut |g, _, p| {
            if g == group {
                m = m.max(p.max_abs_grad());
            }
        });
        m
    }

    /// SHA-256 over the little-endian bytes of every value in `group`, in visit order.
    pub fn group_hash(&self, group: &str) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |g, n, p| {
            if g == group {
                h.update(n.as_bytes());
                for v in &p.value {
                    h.update(v.to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }

    /// Hash over all groups.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for g in self.group_names() {
            h.update(self.group_hash(&g).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn param_count(&self, group: &str) -> usize {
        let mut n = 0;
        self.visit(&mut |g, _, p| {
            if g == group {
                n += p.len();
            }
        });
        n
    }

    /// Extractor embeddings, `(frames * tokens) x D`.
    pub fn embed(&self, input: &ModelInput) -> Result<Array2<f64>> {
        Ok(self.embed_cached(input)?.0)
    }

    fn embed_cached(&self, input: &ModelInput) -> Result<(Array2<f64>, ExtractorCache, usize)> {
        let p = self.config.patch_size;
        if input.channels != self.config.mode.channels() {
            return arg(format!(
                "{} mode expects {} input channels, got {}",
                self.config.mode,
                self.config.mode.channels(),
                input.channels
            ));
        }
        if input.frames % self.config.slow_stride != 0 {
            return arg(format!("{} frames are not divisible by slow_stride {}", input.frames, self.config.slow_stride));
        }
        let patches = input.patches(p)?;
        let (gh, gw) = (input.height / p, input.width / p);
        let (e, cache) = self.extractor.forward(patches, gh, gw);
        Ok((e, cache, gh * gw))
    }

    /// Applies the adapter serving `domain`; identity when no expert covers it.
    pub fn route_expert(&self, e: &Array2<f64>, domain: DomainTag) -> Array2<f64> {
        match self.config.experts.expert_for(domain) {
            Some(i) => self.experts[i].forward(e).0,
            None => e.clone(),
        }
    }

    fn stream_sources(&self, routing: Routing) -> [Option<usize>; 3] {
        let layout = &self.config.experts;
        match (routing, layout) {
            (_, ExpertLayout::Shared) => [Some(0); 3],
            (Routing::All, _) => DomainTag::ALL.map(|d| layout.expert_for(d)),
            (Routing::Domain(dom), _) => DomainTag::ALL.map(|d| if d == dom { layout.expert_for(d) } else { None }),
        }
    }

    fn streams_from_embedding(&self, e: &Array2<f64>, routing: Routing) -> ([Array2<f64>; 3], [Option<usize>; 3], Vec<(usize, AdapterCache)>) {
        let sources = self.stream_sources(routing);
        let mut adapters: Vec<(usize, AdapterCache)> = Vec::new();
        let mut outs: Vec<(usize, Array2<f64>)> = Vec::new();
        for i in sources.iter().flatten() {
            if !adapters.iter().any(|(j, _)| j == i) {
                let (y, c) = self.experts[*i].forward(e);
                adapters.push((*i, c));
                outs.push((*i, y));
            }
        }
        let features = sources.map(|s| match s {
            Some(i) => outs.iter().find(|(j, _)| *j == i).expect("computed above").1.clone(),
            None => e.clone(),
        });
        (features, sources, adapters)
    }

    /// Extractor plus experts.
    pub fn streams(&self, input: &ModelInput, routing: Routing) -> Result<Streams> {
        Ok(self.streams_cached(input, routing)?.0)
    }

    pub fn streams_cached(&self, input: &ModelInput, routing: Routing) -> Result<(Streams, StreamCache)> {
        let (e, extractor, tokens) = self.embed_cached(input)?;
        let (features, sources, adapters) = self.streams_from_embedding(&e, routing);
        Ok((Streams { features, tokens }, StreamCache { extractor, sources, adapters }))
    }

    /// Streams from a precomputed embedding (see [`Model::embed`]); `tokens` per frame.
    pub fn streams_from(&self, e: &Array2<f64>, tokens: usize, routing: Routing) -> Streams {
        Streams { features: self.streams_from_embedding(e, routing).0, tokens }
    }

    /// Fused representation `z` (one row).
    pub fn fuse(&self, s: &Streams) -> Result<Array2<f64>> {
        Ok(self.fuse_cached(s)?.0)
    }

    pub fn fuse_cached(&self, s: &Streams) -> Result<(Array2<f64>, FusionCache)> {
        let [a, b, c] = &s.features;
        let d = self.config.embed_dim;
        if a.dim() != b.dim() || a.dim() != c.dim() || a.ncols() != d {
            return arg(format!("streams must share shape (n x {d}); got {:?}, {:?}, {:?}", a.dim(), b.dim(), c.dim()));
        }
        if s.tokens == 0 || a.nrows() % s.tokens != 0 || (a.nrows() / s.tokens) % self.config.slow_stride != 0 {
            return arg("stream rows do not form whole frames at the slow stride");
        }
        let (z, aggregator) = self.aggregator.forward([a, b, c], s.tokens);
        Ok((z.clone(), FusionCache { aggregator, z }))
    }

    /// Heads in evaluation mode.
    pub fn predict(&self, z: &Array2<f64>) -> Result<Vec<Prediction>> {
        Ok(self.predict_cached::<ChaCha8Rng>(z, None)?.0)
    }

    /// Heads over a batch of representations; `dropout` enables training-mode dropout.
    pub fn predict_cached<R: Rng>(&self, z: &Array2<f64>, mut dropout: Option<&mut R>) -> Result<(Vec<Prediction>, HeadsCache)> {
        if z.ncols() != self.config.fused_dim() {
            return arg(format!("representation width {} != {}", z.ncols(), self.config.fused_dim()));
        }
        let p = self.config.dropout;
        let (q, qc) = self.head_q.forward(z, dropout.as_mut().map(|r| (p, &mut **r)));
        let (a, ac) = self.head_a.forward(z, dropout.as_mut().map(|r| (p, &mut **r)));
        let preds = q
            .column(0)
            .iter()
            .zip(a.rows())
            .map(|(&q, a)| Prediction { q, a: a.to_vec() })
            .collect();
        Ok((preds, HeadsCache { q: qc, a: ac }))
    }

    /// Full evaluation-mode forward over one clip.
    pub fn forward(&self, input: &ModelInput, routing: Routing) -> Result<Prediction> {
        let s = self.streams(input, routing)?;
        let z = self.fuse(&s)?;
        Ok(self.predict(&z)?.remove(0))
    }

    /// Forward with every cache kept for `backward`.
    pub fn forward_train<R: Rng>(&self, input: &ModelInput, routing: Routing, dropout: Option<&mut R>) -> Result<(Prediction, ClipCache)> {
        let (s, streams) = self.streams_cached(input, routing)?;
        let (z, fusion) = self.fuse_cached(&s)?;
        let (mut p, heads) = self.predict_cached(&z, dropout)?;
        Ok((p.remove(0), ClipCache { streams, fusion, heads }))
    }

    /// Backprop from head outputs. `da` is the gradient with respect to the
    /// artifact probabilities; `None` leaves `head_A` out of the graph.
    pub fn backward(&mut self, cache: &ClipCache, dq: f64, da: Option<&[f64]>) {
        let dz = self.backward_heads(&cache.heads, &[dq], da.map(|a| vec![a.to_vec()]).as_deref());
        let ds = self.backward_fusion(&cache.fusion, &dz);
        self.backward_streams(&cache.streams, &ds);
    }

    /// Gradients into both heads for a batch; returns `dL/dz` per row.
    pub fn backward_heads(&mut self, cache: &HeadsCache, dq: &[f64], da: Option<&[Vec<f64>]>) -> Array2<f64> {
        let dqm = Array2::from_shape_vec((dq.len(), 1), dq.to_vec()).expect("column");
        let mut dz = self.head_q.backward(&cache.q, &dqm);
        if let Some(da) = da {
            let n = self.config.artifact_dim;
            let flat: Vec<f64> = da.iter().flatten().copied().collect();
            let dam = Array2::from_shape_vec((da.len(), n), flat).expect("artifact rows");
            dz += &self.head_a.backward(&cache.a, &dam);
        }
        dz
    }

    /// Gradients into `head_A` only.
    pub fn backward_head_a(&mut self, cache: &HeadsCache, da: &[Vec<f64>]) -> Array2<f64> {
        let n = self.config.artifact_dim;
        let flat: Vec<f64> = da.iter().flatten().copied().collect();
        let dam = Array2::from_shape_vec((da.len(), n), flat).expect("artifact rows");
        self.head_a.backward(&cache.a, &dam)
    }

    pub fn backward_fusion(&mut self, cache: &FusionCache, dz: &Array2<f64>) -> [Array2<f64>; 3] {
        debug_assert_eq!(dz.dim(), cache.z.dim());
        self.aggregator.backward(&cache.aggregator, dz)
    }

    pub fn backward_streams(&mut self, cache: &StreamCache, ds: &[Array2<f64>; 3]) {
        let mut de = Array2::<f64>::zeros(ds[0].raw_dim());
        let mut per_adapter: Vec<(usize, Array2<f64>)> = Vec::new();
        for (src, g) in cache.sources.iter().zip(ds) {
            match src {
                None => de += g,
                Some(i) => match per_adapter.iter_mut().find(|(j, _)| j == i) {
                    Some((_, acc)) => *acc += g,
                    None => per_adapter.push((*i, g.clone())),
                },
            }
        }
        for (i, g) in per_adapter {
            let (_, c) = cache.adapters.iter().find(|(j, _)| *j == i).expect("adapter cache");
            de += &self.experts[i].backward(c, &g);
        }
        self.extractor.backward(&cache.extractor, &de);
    }

    /// Parameter counts per group and an estimate of multiply-accumulates per clip.
    pub fn summarize(&self, height: usize, width: usize) -> ModelSummary {
        let groups: Vec<GroupSummary> = self
            .group_names()
            .into_iter()
            .map(|g| GroupSummary { params: self.param_count(&g), frozen: self.is_frozen(&g), hash: self.group_hash(&g), name: g })
            .collect();
        let total = groups.iter().map(|g| g.params).sum();
        let p = self.config.patch_size;
        let tokens = (height / p) * (width / p);
        let rows = self.config.clip_len * tokens;
        let macs = self.extractor.macs(rows, tokens)
            + self.experts.iter().map(|e| e.macs(rows)).sum::<u64>()
            + self.aggregator.macs(self.config.clip_len, tokens)
            + self.head_q.macs()
            + self.head_a.macs();
        ModelSummary { mode: self.config.mode, groups, total_params: total, macs_per_clip: macs, clip: [self.config.clip_len, height, width] }
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn load_values_from(&mut self, other: &Model) -> Result<()> {
        let mut values = BTreeMap::new();
        other.visit(&mut |g, n, p| {
            values.insert(format!("{g}/{n}"), p.value.clone());
        });
        let mut err = None;
        self.visit_mut(&mut |g, n, p| match values.remove(&format!("{g}/{n}")) {
            Some(v) if v.dim() == p.value.dim() => p.value = v,
            _ => err = Some(format!("{g}/{n}")),
        });
        match err {
            Some(name) => Err(Error::Config(format!("parameter {name} missing or mis-shaped"))),
            None => Ok(()),
        }
    }

    /// Forgets optimizer moments everywhere.
    pub fn reset_optimizer(&mut self) {
        self.visit_mut(&mut |_, _, p| p.reset_moments());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub params: usize,
    pub frozen: bool,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mode: Mode,
    pub groups: Vec<GroupSummary>,
    pub total_params: usize,
    pub macs_per_clip: u64,
    /// `[frames, height, width]` the MAC estimate refers to.
    pub clip: [usize; 3],
}

impl ModelSummary {
    pub fn render(&self) -> String {
        let mut out = format!("{:<16} {:>10}  frozen\n", "group", "params");
        for g in &self.groups {
            out.push_str(&format!("{:<16} {:>10}  {}\n", g.name, g.params, g.frozen));
        }
        out.push_str(&format!("{:<16} {:>10}\n", "total", self.total_params));
        let [t, h, w] = self.clip;
        out.push_str(&format!("MACs per {t}x{h}x{w} clip: {:.1} M\n", self.macs_per_clip as f64 / 1e6));
        out
    }
}

/// Mean of rows, used for video-level pooling of representations.
pub fn mean_row(x: &Array2<f64>) -> Array2<f64> {
    x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}

#[cfg(test)]
mod tests;
