//! Closed-form distortion kernels with a five-level severity ladder.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::taxonomy::{DistortionKind, DistortionSpec};
use crate::error::{arg, Result};
use crate::metrics::luma;
use crate::video::{FrameSequence, CHANNELS};

/// Per-severity strength tables. Index `s - 1` holds the value for severity `s`.
///
/// Amplitudes are given for 8-bit content and scaled by `max / 255` for 10-bit input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    /// DCT quantization step in sixteenths of an orthonormal 8x8 coefficient.
    /// At a step of 1 the reconstruction error stays below half a code value,
    /// so the block passes through bit-identical.
    pub blockiness_steps: [f64; 5],
    pub blur_sigma: [f64; 5],
    pub grain_sigma: [f64; 5],
    /// Blend weight toward point decimation by `aliasing_factor`.
    pub aliasing_strength: [f64; 5],
    pub aliasing_factor: usize,
    pub block_loss_fraction: [f64; 5],
    pub banding_levels: [u32; 5],
    pub tone_gamma: [f64; 5],
    pub chroma_gain: [f64; 5],
    pub dark_gain: [f64; 5],
    /// Fraction of odd-indexed frames replaced by their predecessor.
    pub judder_drop_fraction: [f64; 5],
    pub ghost_alpha: [f64; 5],
    /// Fraction of odd-indexed frames displaced by `jitter_px`.
    pub jitter_fraction: [f64; 5],
    pub jitter_px: usize,
    /// Number of even-indexed frames set to black.
    pub black_frames: [usize; 5],
    /// Blend weight toward a trailing box average of `motion_blur_window` frames.
    pub motion_blur_strength: [f64; 5],
    pub motion_blur_window: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            blockiness_steps: [256.0, 448.0, 704.0, 1024.0, 1536.0],
            blur_sigma: [0.6, 1.0, 1.5, 2.1, 3.0],
            grain_sigma: [2.0, 4.0, 7.0, 11.0, 16.0],
            aliasing_strength: [0.45, 0.6, 0.75, 0.9, 1.0],
            aliasing_factor: 3,
            block_loss_fraction: [0.03, 0.07, 0.12, 0.2, 0.3],
            banding_levels: [64, 45, 32, 23, 16],
            tone_gamma: [1.15, 1.3, 1.5, 1.75, 2.1],
            chroma_gain: [0.85, 0.7, 0.55, 0.4, 0.25],
            dark_gain: [0.8, 0.65, 0.5, 0.38, 0.25],
            judder_drop_fraction: [0.15, 0.3, 0.5, 0.65, 0.8],
            ghost_alpha: [0.15, 0.3, 0.45, 0.6, 0.75],
            jitter_fraction: [0.15, 0.3, 0.5, 0.65, 0.8],
            jitter_px: 3,
            black_frames: [1, 2, 3, 4, 5],
            motion_blur_strength: [0.2, 0.4, 0.6, 0.8, 1.0],
            motion_blur_window: 5,
        }
    }
}

const BLOCK: usize = 8;
const LOSS_BLOCK: usize = 16;

/// Applies one distortion with the default strength tables.
pub fn apply_distortion(src: &FrameSequence, spec: &DistortionSpec) -> Result<FrameSequence> {
    apply_distortion_with(src, spec, &KernelParams::default())
}

pub fn apply_distortion_with(src: &FrameSequence, spec: &DistortionSpec, p: &KernelParams) -> Result<FrameSequence> {
    if !(1..=5).contains(&spec.severity) {
        return arg(format!("severity {} outside 1..=5", spec.severity));
    }
    if src.frames() < spec.kind.min_frames() {
        return arg(format!("{} needs at least {} frames, got {}", spec.kind, spec.kind.min_frames(), src.frames()));
    }
    let s = usize::from(spec.severity - 1);
    let scale = src.max_value() / 255.0;
    let mut buf = Buffer::from_sequence(src);
    use DistortionKind::*;
    match spec.kind {
        Blockiness => buf.blockiness(p.blockiness_steps[s] / 16.0 * scale),
        GaussianBlur => buf.gaussian_blur(p.blur_sigma[s]),
        GrainNoise => buf.grain(p.grain_sigma[s] * scale, spec.seed),
        Aliasing => buf.aliasing(p.aliasing_strength[s], p.aliasing_factor),
        TransmissionBlockLoss => buf.block_loss(p.block_loss_fraction[s], spec.seed),
        Banding => buf.banding(p.banding_levels[s]),
        ToneError => buf.tone(p.tone_gamma[s]),
        ChromaGainError => buf.chroma_gain(p.chroma_gain[s]),
        DarkScene => buf.map(|v| v * p.dark_gain[s]),
        FrameDropJudder => buf.judder(p.judder_drop_fraction[s], spec.seed),
        GhostBlend => buf.ghost(p.ghost_alpha[s]),
        TemporalJitter => buf.jitter(p.jitter_fraction[s], p.jitter_px, spec.seed),
        BlackFrame => buf.black_frames(p.black_frames[s], spec.seed),
        MotionBlur => buf.motion_blur(p.motion_blur_strength[s], p.motion_blur_window),
    }
    buf.into_sequence(src)
}

/// Applies a stack of distortions in canonical order (black frames last).
pub fn apply_stack(src: &FrameSequence, specs: &[DistortionSpec], p: &KernelParams) -> Result<FrameSequence> {
    let mut ordered = specs.to_vec();
    ordered.sort_by_key(|s| s.kind.apply_rank());
    let mut out = src.clone();
    for spec in &ordered {
        out = apply_distortion_with(&out, spec, p)?;
    }
    Ok(out)
}

/// Working copy of the samples in floating point.
struct Buffer {
    t: usize,
    h: usize,
    w: usize,
    max: f64,
    v: Vec<f64>,
}

impl Buffer {
    fn from_sequence(s: &FrameSequence) -> Self {
        Self {
            t: s.frames(),
            h: s.height(),
            w: s.width(),
            max: s.max_value(),
            v: s.samples().iter().map(|&x| f64::from(x)).collect(),
        }
    }

    fn into_sequence(self, like: &FrameSequence) -> Result<FrameSequence> {
        let max = self.max;
        like.with_samples(self.v.into_iter().map(|x| x.round().clamp(0.0, max) as u16).collect())
    }

    #[inline]
    fn idx(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.h + y) * self.w + x) * CHANNELS + c
    }

    fn frame_len(&self) -> usize {
        self.h * self.w * CHANNELS
    }

    fn map(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.v {
            *v = f(*v);
        }
    }

    fn blockiness(&mut self, step: f64) {
        let basis = dct_basis();
        let mut block = [[0.0; BLOCK]; BLOCK];
        for t in 0..self.t {
            for by in 0..self.h / BLOCK {
                for bx in 0..self.w / BLOCK {
                    for c in 0..CHANNELS {
                        for (y, row) in block.iter_mut().enumerate() {
                            for (x, b) in row.iter_mut().enumerate() {
                                *b = self.v[self.idx(t, by * BLOCK + y, bx * BLOCK + x, c)];
                            }
                        }
                        let mut coef = transform(basis, &block, false);
                        for row in &mut coef {
                            for k in row.iter_mut() {
                                *k = (*k / step).round() * step;
                            }
                        }
                        let rec = transform(basis, &coef, true);
                        for (y, row) in rec.iter().enumerate() {
                            for (x, &r) in row.iter().enumerate() {
                                let i = self.idx(t, by * BLOCK + y, bx * BLOCK + x, c);
                                self.v[i] = r;
                            }
                        }
                    }
                }
            }
        }
    }

    fn gaussian_blur(&mut self, sigma: f64) {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (h, w) = (self.h as isize, self.w as isize);
        let mut tmp = vec![0.0; self.v.len()];
        for t in 0..self.t {
            for y in 0..self.h {
                for x in 0..self.w {
                    for c in 0..CHANNELS {
                        let mut acc = 0.0;
                        for (k, &wk) in kernel.iter().enumerate() {
                            let xx = (x as isize + k as isize - radius).clamp(0, w - 1) as usize;
                            acc += wk * self.v[self.idx(t, y, xx, c)];
                        }
                        tmp[self.idx(t, y, x, c)] = acc;
                    }
                }
            }
            for y in 0..self.h {
                for x in 0..self.w {
                    for c in 0..CHANNELS {
                        let mut acc = 0.0;
                        for (k, &wk) in kernel.iter().enumerate() {
                            let yy = (y as isize + k as isize - radius).clamp(0, h - 1) as usize;
                            acc += wk * tmp[self.idx(t, yy, x, c)];
                        }
                        let i = self.idx(t, y, x, c);
                        self.v[i] = acc;
                    }
                }
            }
        }
    }

    /// Monochrome Gaussian grain; one normal draw per pixel shared by all channels.
    fn grain(&mut self, sigma: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for px in self.v.chunks_exact_mut(CHANNELS) {
            let n: f64 = rng.sample(StandardNormal);
            for v in px {
                *v += sigma * n;
            }
        }
    }

    /// Point decimation by `factor` with nearest-neighbour upsampling and no prefilter,
    /// blended over the source with weight `strength`.
    fn aliasing(&mut self, strength: f64, factor: usize) {
        let src = self.v.clone();
        let f = factor.max(1);
        for t in 0..self.t {
            for y in 0..self.h {
                let sy = y - y % f;
                for x in 0..self.w {
                    let sx = x - x % f;
                    for c in 0..CHANNELS {
                        let i = self.idx(t, y, x, c);
                        self.v[i] = (1.0 - strength) * src[i] + strength * src[self.idx(t, sy, sx, c)];
                    }
                }
            }
        }
    }

    /// Replaces a nested, seed-ordered prefix of 16x16 blocks with mid grey.
    fn block_loss(&mut self, fraction: f64, seed: u64) {
        let (bh, bw) = (self.h.div_ceil(LOSS_BLOCK), self.w.div_ceil(LOSS_BLOCK));
        let mut blocks: Vec<(usize, usize, usize)> =
            (0..self.t).flat_map(|t| (0..bh).flat_map(move |by| (0..bw).map(move |bx| (t, by, bx)))).collect();
        blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let count = ((fraction * blocks.len() as f64).ceil() as usize).clamp(1, blocks.len());
        let grey = (self.max / 2.0).round();
        for &(t, by, bx) in &blocks[..count] {
            for y in by * LOSS_BLOCK..((by + 1) * LOSS_BLOCK).min(self.h) {
                for x in bx * LOSS_BLOCK..((bx + 1) * LOSS_BLOCK).min(self.w) {
                    for c in 0..CHANNELS {
                        let i = self.idx(t, y, x, c);
                        self.v[i] = grey;
                    }
                }
            }
        }
    }

    fn banding(&mut self, levels: u32) {
        let max = self.max;
        let l = f64::from(levels.max(2) - 1);
        self.map(|v| (v / max * l).round() / l * max);
    }

    fn tone(&mut self, gamma: f64) {
        let max = self.max;
        self.map(|v| max * (v / max).clamp(0.0, 1.0).powf(gamma));
    }

    /// Scales chroma toward luma; a convex blend, so it never leaves the gamut.
    fn chroma_gain(&mut self, gain: f64) {
        for px in self.v.chunks_exact_mut(CHANNELS) {
            let y = luma(px[0], px[1], px[2]);
            for v in px {
                *v = y + gain * (*v - y);
            }
        }
    }

    /// Nested, seed-ordered choice of `fraction` of the frames with the given index parity.
    ///
    /// Chosen frames are never adjacent, so each one adds its own error terms to
    /// successive-frame differences and a larger count is always strictly worse.
    fn isolated_frames(&self, parity: usize, fraction: f64, seed: u64) -> Vec<usize> {
        let mut slots: Vec<usize> = (parity..self.t).step_by(2).collect();
        slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let count = ((fraction * slots.len() as f64).round() as usize).clamp(1, slots.len());
        slots.truncate(count);
        slots
    }

    /// Drop-and-hold: each chosen frame repeats its predecessor.
    fn judder(&mut self, fraction: f64, seed: u64) {
        let n = self.frame_len();
        for t in self.isolated_frames(1, fraction, seed) {
            self.v.copy_within((t - 1) * n..t * n, t * n);
        }
    }

    fn ghost(&mut self, alpha: f64) {
        let n = self.frame_len();
        let src = self.v.clone();
        for t in 1..self.t {
            for i in 0..n {
                self.v[t * n + i] = (1.0 - alpha) * src[t * n + i] + alpha * src[(t - 1) * n + i];
            }
        }
    }

    /// Chosen frames are translated by `amplitude` pixels along a seeded direction; borders replicate.
    fn jitter(&mut self, fraction: f64, amplitude: usize, seed: u64) {
        const DIRS: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
        let src = self.v.clone();
        let a = amplitude as isize;
        for t in self.isolated_frames(1, fraction, seed) {
            let (dy, dx) = DIRS[rng.random_range(0..DIRS.len())];
            for y in 0..self.h {
                let sy = (y as isize + dy * a).clamp(0, self.h as isize - 1) as usize;
                for x in 0..self.w {
                    let sx = (x as isize + dx * a).clamp(0, self.w as isize - 1) as usize;
                    for c in 0..CHANNELS {
                        let i = self.idx(t, y, x, c);
                        self.v[i] = src[self.idx(t, sy, sx, c)];
                    }
                }
            }
        }
    }

    /// Blacks out a nested, seed-ordered set of even-indexed frames.
    fn black_frames(&mut self, count: usize, seed: u64) {
        let slots = self.t.div_ceil(2);
        let n = self.frame_len();
        for t in self.isolated_frames(0, count as f64 / slots as f64, seed) {
            self.v[t * n..(t + 1) * n].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Blends each frame toward the trailing box average over `window` frames.
    fn motion_blur(&mut self, strength: f64, window: usize) {
        let n = self.frame_len();
        let src = self.v.clone();
        for t in 0..self.t {
            let start = (t + 1).saturating_sub(window);
            let k = (t - start + 1) as f64;
            for i in 0..n {
                let mut acc = 0.0;
                for s in start..=t {
                    acc += src[s * n + i];
                }
                self.v[t * n + i] = (1.0 - strength) * src[t * n + i] + strength * acc / k;
            }
        }
    }
}

type Basis = [[f64; BLOCK]; BLOCK];

fn dct_basis() -> &'static Basis {
    static BASIS: OnceLock<Basis> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; BLOCK]; BLOCK];
        for (u, row) in m.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * x + 1) as f64 * u as f64 * PI / (2 * BLOCK) as f64).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D DCT-II (`M X M^T`) or its inverse (`M^T C M`).
fn transform(m: &Basis, input: &Basis, inverse: bool) -> Basis {
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    let mut out = [[0.0; BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            tmp[i][j] = (0..BLOCK).map(|k| if inverse { m[k][i] * input[k][j] } else { m[i][k] * input[k][j] }).sum();
        }
    }
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            out[i][j] = (0..BLOCK).map(|k| if inverse { tmp[i][k] * m[k][j] } else { tmp[i][k] * m[j][k] }).sum();
        }
    }
    out
}
