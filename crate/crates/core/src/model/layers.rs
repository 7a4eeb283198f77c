//! Extractor, adapters, aggregators and heads.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::config::{AggregatorKind, Mode, ModelConfig};
use crate::nn::{
    dropout_mask, gelu_backward, gelu_forward, join, sigmoid, Block, BlockCache, LayerNorm, LayerNormCache, Linear,
    Param, Standardize, Visit,
};

/// Fixed 2-D sinusoidal position code: the first half of the width encodes the
/// patch row, the second half the patch column.
pub fn position_code(grid_h: usize, grid_w: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut pe = Array2::zeros((grid_h * grid_w, dim));
    for py in 0..grid_h {
        for px in 0..grid_w {
            let mut row = pe.row_mut(py * grid_w + px);
            for (offset, pos) in [(0, py as f64), (half, px as f64)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    row[offset + 2 * i] = (pos * freq).sin();
                    row[offset + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    pe
}

/// Patch projection, position code, pre-norm transformer blocks, final norm.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub proj: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    heads: usize,
}

#[derive(Clone, Debug)]
pub struct ExtractorCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Extractor {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let mut proj = Linear::new(cfg.patch_dim(), d, rng);
        if cfg.mode == Mode::Fr {
            let c = cfg.mode.channels();
            for (i, mut row) in proj.w.value.rows_mut().into_iter().enumerate() {
                if i % c >= 2 * c / 3 {
                    row *= cfg.residual_init_gain;
                }
            }
        }
        Self {
            proj,
            blocks: (0..cfg.extractor_depth).map(|_| Block::new(d, cfg.num_heads, cfg.mlp_ratio, rng)).collect(),
            norm: LayerNorm::new(d),
            heads: cfg.num_heads,
        }
    }

    /// `patches` holds `frames * grid_h * grid_w` rows in frame-major raster order.
    pub fn forward(&self, patches: Array2<f64>, grid_h: usize, grid_w: usize) -> (Array2<f64>, ExtractorCache) {
        let tokens = grid_h * grid_w;
        let frames = patches.nrows() / tokens;
        let pe = position_code(grid_h, grid_w, self.proj.outputs());
        let mut x = self.proj.forward(&patches);
        for t in 0..frames {
            let mut rows = x.slice_mut(s![t * tokens..(t + 1) * tokens, ..]);
            rows += &pe;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, tokens);
            x = y;
            caches.push(c);
        }
        let (y, norm) = self.norm.forward(&x);
        (y, ExtractorCache { patches, blocks: caches, norm })
    }

    pub fn backward(&mut self, cache: &ExtractorCache, dy: &Array2<f64>) {
        let mut dx = self.norm.backward(&cache.norm, dy);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = b.backward(c, &dx);
        }
        self.proj.backward_params(&cache.patches, &dx);
    }

    pub fn macs(&self, rows: usize, tokens: usize) -> u64 {
        self.proj.macs(rows) + self.blocks.iter().map(|b| b.macs(rows, tokens)).sum::<u64>()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

impl Visit for Extractor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit(&join(prefix, "proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Bottleneck residual adapter `x + up(gelu(down(x)))`; `up` starts at zero so
/// a fresh adapter is the identity.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub struct AdapterCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Adapter {
    pub fn new<R: Rng>(dim: usize, bottleneck: usize, rng: &mut R) -> Self {
        Self { down: Linear::new(dim, bottleneck, rng), up: Linear::zeros(bottleneck, dim) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AdapterCache) {
        let pre = self.down.forward(x);
        let act = gelu_forward(&pre);
        let y = x + &self.up.forward(&act);
        (y, AdapterCache { x: x.clone(), pre, act })
    }

    pub fn backward(&mut self, c: &AdapterCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = self.up.backward(&c.act, dy);
        let dpre = gelu_backward(&c.pre, &dact);
        dy + &self.down.backward(&c.x, &dpre)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.down.macs(rows) + self.up.macs(rows)
    }
}

impl Visit for Adapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.down.visit(&join(prefix, "down"), f);
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

/// Rows of every `stride`-th frame.
fn take_frames(x: &Array2<f64>, tokens: usize, stride: usize) -> Array2<f64> {
    if stride == 1 {
        return x.clone();
    }
    let frames = x.nrows() / tokens;
    let parts: Vec<_> = (0..frames).step_by(stride).map(|t| x.slice(s![t * tokens..(t + 1) * tokens, ..])).collect();
    concatenate(Axis(0), &parts).expect("equal widths")
}

/// Adjoint of `take_frames`.
fn scatter_frames(dx: &Array2<f64>, tokens: usize, stride: usize, frames: usize) -> Array2<f64> {
    if stride == 1 {
        return dx.clone();
    }
    let mut out = Array2::zeros((frames * tokens, dx.ncols()));
    for (j, t) in (0..frames).step_by(stride).enumerate() {
        out.slice_mut(s![t * tokens..(t + 1) * tokens, ..]).assign(&dx.slice(s![j * tokens..(j + 1) * tokens, ..]));
    }
    out
}

/// Kernel-3 temporal unfold with zero padding: row `(t, p)` becomes
/// `[x(t-1, p), x(t, p), x(t+1, p)]`.
fn unfold3(x: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let frames = n / tokens;
    let mut out = Array2::zeros((n, 3 * d));
    for t in 0..frames {
        let rows = t * tokens..(t + 1) * tokens;
        for (k, src) in [t.checked_sub(1), Some(t), (t + 1 < frames).then_some(t + 1)].into_iter().enumerate() {
            if let Some(u) = src {
                out.slice_mut(s![rows.clone(), k * d..(k + 1) * d]).assign(&x.slice(s![u * tokens..(u + 1) * tokens, ..]));
            }
        }
    }
    out
}

fn fold3(dx3: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let (n, d3) = dx3.dim();
    let d = d3 / 3;
    let frames = n / tokens;
    let mut out = Array2::zeros((n, d));
    for t in 0..frames {
        for (k, src) in [t.checked_sub(1), Some(t), (t + 1 < frames).then_some(t + 1)].into_iter().enumerate() {
            if let Some(u) = src {
                let mut dst = out.slice_mut(s![u * tokens..(u + 1) * tokens, ..]);
                dst += &dx3.slice(s![t * tokens..(t + 1) * tokens, k * d..(k + 1) * d]);
            }
        }
    }
    out
}

/// Mean over consecutive groups of `group` frames.
fn pool_frames(x: &Array2<f64>, tokens: usize, group: usize) -> Array2<f64> {
    let frames = x.nrows() / tokens;
    let mut out = Array2::zeros((frames / group * tokens, x.ncols()));
    for t in 0..frames / group * group {
        let mut dst = out.slice_mut(s![(t / group) * tokens..(t / group + 1) * tokens, ..]);
        dst.scaled_add(1.0 / group as f64, &x.slice(s![t * tokens..(t + 1) * tokens, ..]));
    }
    out
}

fn unpool_frames(dx: &Array2<f64>, tokens: usize, group: usize, frames: usize) -> Array2<f64> {
    let mut out = Array2::zeros((frames * tokens, dx.ncols()));
    for t in 0..frames / group * group {
        let src = dx.slice(s![(t / group) * tokens..(t / group + 1) * tokens, ..]);
        out.slice_mut(s![t * tokens..(t + 1) * tokens, ..]).assign(&(&src / group as f64));
    }
    out
}

fn mean_rows(x: &Array2<f64>) -> Array2<f64> {
    x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}

fn spread_rows(dz: &Array2<f64>, rows: usize) -> Array2<f64> {
    let row = dz / rows as f64;
    row.broadcast((rows, dz.ncols())).expect("single row").to_owned()
}

/// Two-pathway aggregator. The slow path sees spatial and colour streams at
/// `slow_stride`, the fast path the temporal stream at `fast_stride`; one lateral
/// link pools fast features to the slow rate and concatenates them mid-way.
#[derive(Clone, Debug)]
pub struct SlowFast {
    pub slow1: Linear,
    pub fast1: Linear,
    pub lateral: Linear,
    pub slow2: Linear,
    pub fast2: Linear,
    slow_stride: usize,
    fast_stride: usize,
}

#[derive(Clone, Debug)]
pub struct SlowFastCache {
    frames: usize,
    tokens: usize,
    slow_in: Array2<f64>,
    slow1_pre: Array2<f64>,
    fast_in3: Array2<f64>,
    fast1_pre: Array2<f64>,
    fast1: Array2<f64>,
    pooled: Array2<f64>,
    mid: Array2<f64>,
    slow2_pre: Array2<f64>,
    fast1_3: Array2<f64>,
    fast2_pre: Array2<f64>,
}

impl SlowFast {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let h = d / 2;
        Self {
            slow1: Linear::new(2 * d, d, rng),
            fast1: Linear::new(3 * d, h, rng),
            lateral: Linear::new(h, h, rng),
            slow2: Linear::new(d + h, 2 * d, rng),
            fast2: Linear::new(3 * h, h, rng),
            slow_stride: cfg.slow_stride,
            fast_stride: cfg.fast_stride,
        }
    }

    pub fn forward(&self, streams: [&Array2<f64>; 3], tokens: usize) -> (Array2<f64>, SlowFastCache) {
        let [sp, co, te] = streams;
        let frames = sp.nrows() / tokens;
        let slow_in = take_frames(&concatenate(Axis(1), &[sp.view(), co.view()]).expect("same rows"), tokens, self.slow_stride);
        let slow1_pre = self.slow1.forward(&slow_in);
        let slow1 = gelu_forward(&slow1_pre);

        let fast_in3 = unfold3(&take_frames(te, tokens, self.fast_stride), tokens);
        let fast1_pre = self.fast1.forward(&fast_in3);
        let fast1 = gelu_forward(&fast1_pre);

        let pooled = pool_frames(&fast1, tokens, self.slow_stride / self.fast_stride);
        let lat = self.lateral.forward(&pooled);
        let mid = concatenate(Axis(1), &[slow1.view(), lat.view()]).expect("same rows");
        let slow2_pre = self.slow2.forward(&mid);
        let slow2 = gelu_forward(&slow2_pre);

        let fast1_3 = unfold3(&fast1, tokens);
        let fast2_pre = self.fast2.forward(&fast1_3);
        let fast2 = gelu_forward(&fast2_pre);

        let z = concatenate(Axis(1), &[mean_rows(&slow2).view(), mean_rows(&fast2).view()]).expect("one row each");
        let cache =
            SlowFastCache { frames, tokens, slow_in, slow1_pre, fast_in3, fast1_pre, fast1, pooled, mid, slow2_pre, fast1_3, fast2_pre };
        (z, cache)
    }

    pub fn backward(&mut self, c: &SlowFastCache, dz: &Array2<f64>) -> [Array2<f64>; 3] {
        let d2 = self.slow2.outputs();
        let tokens = c.tokens;
        let dslow2 = spread_rows(&dz.slice(s![.., ..d2]).to_owned(), c.slow2_pre.nrows());
        let dfast2 = spread_rows(&dz.slice(s![.., d2..]).to_owned(), c.fast2_pre.nrows());

        let dfast1_3 = self.fast2.backward(&c.fast1_3, &gelu_backward(&c.fast2_pre, &dfast2));
        let mut dfast1 = fold3(&dfast1_3, tokens);

        let dmid = self.slow2.backward(&c.mid, &gelu_backward(&c.slow2_pre, &dslow2));
        let d1 = self.slow1.outputs();
        let dslow1 = dmid.slice(s![.., ..d1]).to_owned();
        let dlat = dmid.slice(s![.., d1..]).to_owned();
        let dpooled = self.lateral.backward(&c.pooled, &dlat);
        let fast_frames = c.fast1.nrows() / tokens;
        dfast1 += &unpool_frames(&dpooled, tokens, self.slow_stride / self.fast_stride, fast_frames);

        let dfast_in3 = self.fast1.backward(&c.fast_in3, &gelu_backward(&c.fast1_pre, &dfast1));
        let dte = scatter_frames(&fold3(&dfast_in3, tokens), tokens, self.fast_stride, c.frames);

        let dslow_in = self.slow1.backward(&c.slow_in, &gelu_backward(&c.slow1_pre, &dslow1));
        let dsc = scatter_frames(&dslow_in, tokens, self.slow_stride, c.frames);
        let d = dsc.ncols() / 2;
        [dsc.slice(s![.., ..d]).to_owned(), dsc.slice(s![.., d..]).to_owned(), dte]
    }

    fn macs(&self, frames: usize, tokens: usize) -> u64 {
        let slow_rows = frames / self.slow_stride * tokens;
        let fast_rows = frames / self.fast_stride * tokens;
        self.slow1.macs(slow_rows)
            + self.lateral.macs(slow_rows)
            + self.slow2.macs(slow_rows)
            + self.fast1.macs(fast_rows)
            + self.fast2.macs(fast_rows)
    }
}

impl Visit for SlowFast {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.slow1.visit(&join(prefix, "slow1"), f);
        self.fast1.visit(&join(prefix, "fast1"), f);
        self.lateral.visit(&join(prefix, "lateral"), f);
        self.slow2.visit(&join(prefix, "slow2"), f);
        self.fast2.visit(&join(prefix, "fast2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.slow1.visit_mut(&join(prefix, "slow1"), f);
        self.fast1.visit_mut(&join(prefix, "fast1"), f);
        self.lateral.visit_mut(&join(prefix, "lateral"), f);
        self.slow2.visit_mut(&join(prefix, "slow2"), f);
        self.fast2.visit_mut(&join(prefix, "fast2"), f);
    }
}

/// Convolutional baseline: frame-pooled concatenated streams, two kernel-3
/// temporal convolutions, then a temporal mean.
#[derive(Clone, Debug)]
pub struct CnnAggregator {
    pub conv1: Linear,
    pub conv2: Linear,
}

#[derive(Clone, Debug)]
pub struct CnnCache {
    frames: usize,
    tokens: usize,
    in3: Array2<f64>,
    pre1: Array2<f64>,
    h3: Array2<f64>,
    pre2: Array2<f64>,
}

impl CnnAggregator {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self { conv1: Linear::new(9 * d, d, rng), conv2: Linear::new(3 * d, cfg.fused_dim(), rng) }
    }

    pub fn forward(&self, streams: [&Array2<f64>; 3], tokens: usize) -> (Array2<f64>, CnnCache) {
        let frames = streams[0].nrows() / tokens;
        let cat = concatenate(Axis(1), &streams.map(|s| s.view())).expect("same rows");
        let per_frame = pool_rows(&cat, tokens);
        let in3 = unfold3(&per_frame, 1);
        let pre1 = self.conv1.forward(&in3);
        let h3 = unfold3(&gelu_forward(&pre1), 1);
        let pre2 = self.conv2.forward(&h3);
        let z = mean_rows(&gelu_forward(&pre2));
        (z, CnnCache { frames, tokens, in3, pre1, h3, pre2 })
    }

    pub fn backward(&mut self, c: &CnnCache, dz: &Array2<f64>) -> [Array2<f64>; 3] {
        let dpre2 = gelu_backward(&c.pre2, &spread_rows(dz, c.frames));
        let dh = fold3(&self.conv2.backward(&c.h3, &dpre2), 1);
        let dpre1 = gelu_backward(&c.pre1, &dh);
        let dper_frame = fold3(&self.conv1.backward(&c.in3, &dpre1), 1);
        let dcat = unpool_rows(&dper_frame, c.tokens);
        let d = dcat.ncols() / 3;
        [0, 1, 2].map(|k| dcat.slice(s![.., k * d..(k + 1) * d]).to_owned())
    }

    fn macs(&self, frames: usize) -> u64 {
        self.conv1.macs(frames) + self.conv2.macs(frames)
    }
}

/// Mean over each frame's tokens.
fn pool_rows(x: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let frames = x.nrows() / tokens;
    let mut out = Array2::zeros((frames, x.ncols()));
    for t in 0..frames {
        out.row_mut(t).assign(&x.slice(s![t * tokens..(t + 1) * tokens, ..]).mean_axis(Axis(0)).expect("non-empty"));
    }
    out
}

fn unpool_rows(dx: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let mut out = Array2::zeros((dx.nrows() * tokens, dx.ncols()));
    for t in 0..dx.nrows() {
        let row = &dx.row(t) / tokens as f64;
        for p in 0..tokens {
            out.row_mut(t * tokens + p).assign(&row);
        }
    }
    out
}

impl Visit for CnnAggregator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[derive(Clone, Debug)]
pub enum Aggregator {
    SlowFast(SlowFast),
    Cnn(CnnAggregator),
}

#[derive(Clone, Debug)]
pub enum AggregatorCache {
    SlowFast(SlowFastCache),
    Cnn(CnnCache),
}

impl Aggregator {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        match cfg.aggregator {
            AggregatorKind::SlowFast => Aggregator::SlowFast(SlowFast::new(cfg, rng)),
            AggregatorKind::Cnn => Aggregator::Cnn(CnnAggregator::new(cfg, rng)),
        }
    }

    pub fn forward(&self, streams: [&Array2<f64>; 3], tokens: usize) -> (Array2<f64>, AggregatorCache) {
        match self {
            Aggregator::SlowFast(a) => {
                let (z, c) = a.forward(streams, tokens);
                (z, AggregatorCache::SlowFast(c))
            }
            Aggregator::Cnn(a) => {
                let (z, c) = a.forward(streams, tokens);
                (z, AggregatorCache::Cnn(c))
            }
        }
    }

    pub fn backward(&mut self, cache: &AggregatorCache, dz: &Array2<f64>) -> [Array2<f64>; 3] {
        match (self, cache) {
            (Aggregator::SlowFast(a), AggregatorCache::SlowFast(c)) => a.backward(c, dz),
            (Aggregator::Cnn(a), AggregatorCache::Cnn(c)) => a.backward(c, dz),
            _ => unreachable!("cache produced by a different aggregator"),
        }
    }

    pub fn macs(&self, frames: usize, tokens: usize) -> u64 {
        match self {
            Aggregator::SlowFast(a) => a.macs(frames, tokens),
            Aggregator::Cnn(a) => a.macs(frames),
        }
    }
}

impl Visit for Aggregator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Aggregator::SlowFast(a) => a.visit(prefix, f),
            Aggregator::Cnn(a) => a.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Aggregator::SlowFast(a) => a.visit_mut(prefix, f),
            Aggregator::Cnn(a) => a.visit_mut(prefix, f),
        }
    }
}

/// MLP head with two GELU hidden layers and dropout after each.
#[derive(Clone, Debug)]
pub struct Head {
    pub input: Standardize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
    pub sigmoid: bool,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    z: Array2<f64>,
    zn: Array2<f64>,
    pre1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    h2: Array2<f64>,
    y: Array2<f64>,
}

impl Head {
    pub fn new<R: Rng>(inputs: usize, hidden: usize, outputs: usize, sigmoid: bool, rng: &mut R) -> Self {
        Self {
            input: Standardize::new(inputs),
            fc1: Linear::new(inputs, hidden, rng),
            fc2: Linear::new(hidden, hidden, rng),
            out: Linear::new(hidden, outputs, rng),
            sigmoid,
        }
    }

    /// `z` holds one representation per row. `dropout` carries the rate and an RNG in training.
    pub fn forward<R: Rng>(&self, z: &Array2<f64>, dropout: Option<(f64, &mut R)>) -> (Array2<f64>, HeadCache) {
        let (p, mut rng) = match dropout {
            Some((p, r)) if p > 0.0 => (p, Some(r)),
            _ => (0.0, None),
        };
        let mut mask = |x: &Array2<f64>| rng.as_mut().map(|r| dropout_mask(x.nrows(), x.ncols(), p, &mut **r));
        let zn = self.input.forward(z);
        let pre1 = self.fc1.forward(&zn);
        let mut h1 = gelu_forward(&pre1);
        let mask1 = mask(&h1);
        if let Some(m) = &mask1 {
            h1 *= m;
        }
        let pre2 = self.fc2.forward(&h1);
        let mut h2 = gelu_forward(&pre2);
        let mask2 = mask(&h2);
        if let Some(m) = &mask2 {
            h2 *= m;
        }
        let mut y = self.out.forward(&h2);
        if self.sigmoid {
            y.mapv_inplace(sigmoid);
        }
        (y.clone(), HeadCache { z: z.clone(), zn, pre1, mask1, h1, pre2, mask2, h2, y })
    }

    /// `dy` is the gradient with respect to the head output (after the sigmoid, if any).
    pub fn backward(&mut self, c: &HeadCache, dy: &Array2<f64>) -> Array2<f64> {
        let dout = if self.sigmoid { dy * &c.y.mapv(|s| s * (1.0 - s)) } else { dy.clone() };
        let mut dh2 = self.out.backward(&c.h2, &dout);
        if let Some(m) = &c.mask2 {
            dh2 *= m;
        }
        let mut dh1 = self.fc2.backward(&c.h1, &gelu_backward(&c.pre2, &dh2));
        if let Some(m) = &c.mask1 {
            dh1 *= m;
        }
        let dzn = self.fc1.backward(&c.zn, &gelu_backward(&c.pre1, &dh1));
        self.input.backward(&c.z, &dzn)
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs(1) + self.fc2.macs(1) + self.out.macs(1)
    }
}

impl Visit for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.input.visit(&join(prefix, "input"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Param::normal(12, 5, 1.0, &mut rng).value;
        let y = Param::normal(12, 15, 1.0, &mut rng).value;
        let lhs = (unfold3(&x, 3) * &y).sum();
        let rhs = (&x * &fold3(&y, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let yp = Param::normal(6, 5, 1.0, &mut rng).value;
        let lhs = (pool_frames(&x, 3, 2) * &yp).sum();
        let rhs = (&x * &unpool_frames(&yp, 3, 2, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lhs = (take_frames(&x, 3, 2) * &yp).sum();
        let rhs = (&x * &scatter_frames(&yp, 3, 2, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn position_code_is_distinct_per_patch() {
        let pe = position_code(4, 4, 16);
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(pe.row(i), pe.row(j));
            }
        }
    }
}
