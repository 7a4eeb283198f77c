//! Procedural pristine content: colour gradients, oriented textures and moving discs
//! over a panning background, so every source has smooth regions, fine detail and motion.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::video::{FrameSequence, RangeTag};

/// Output format of a synthesized source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStyle {
    pub bit_depth: u8,
    pub range: RangeTag,
    pub frame_rate: f64,
}

impl SourceStyle {
    pub fn default_sdr() -> Self {
        Self { bit_depth: 8, range: RangeTag::Sdr, frame_rate: 30.0 }
    }

    /// 10-bit samples with an expanded transfer curve.
    pub fn default_hdr() -> Self {
        Self { bit_depth: 10, range: RangeTag::HdrLike, frame_rate: 60.0 }
    }
}

const HDR_EXPONENT: f64 = 1.4;

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
    weights: [f64; 3],
}

struct Disc {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    color: [f64; 3],
}

/// Renders one pristine source; a pure function of `seed` and geometry.
pub fn synthesize_source(seed: u64, frames: usize, height: usize, width: usize, style: SourceStyle) -> Result<FrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);

    let base: [[f64; 3]; 3] = std::array::from_fn(|_| {
        [rng.random_range(0.2..0.6), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]
    });
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let f = rng.random_range(0.03..0.3);
            let theta = rng.random_range(0.0..TAU);
            Wave {
                fx: f * theta.cos(),
                fy: f * theta.sin(),
                phase: rng.random_range(0.0..TAU),
                amp: rng.random_range(0.03..0.1),
                weights: std::array::from_fn(|_| rng.random_range(0.5..1.0)),
            }
        })
        .collect();
    let pan_speed = rng.random_range(0.7..2.0);
    let pan_dir = rng.random_range(0.0..TAU);
    let (pan_x, pan_y) = (pan_speed * pan_dir.cos(), pan_speed * pan_dir.sin());
    let discs: Vec<Disc> = (0..rng.random_range(1..=3))
        .map(|_| {
            let speed = rng.random_range(1.0..3.0);
            let dir = rng.random_range(0.0..TAU);
            Disc {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                vx: speed * dir.cos(),
                vy: speed * dir.sin(),
                radius: rng.random_range(0.1..0.22) * h.min(w),
                color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
            }
        })
        .collect();

    let max = f64::from((1u32 << style.bit_depth) - 1);
    let encode = |v: f64| {
        let v = v.clamp(0.02, 0.98);
        match style.range {
            RangeTag::Sdr => v * max,
            RangeTag::HdrLike => v.powf(HDR_EXPONENT) * max,
        }
    };

    FrameSequence::from_fn(frames, height, width, style.bit_depth, style.frame_rate, style.range, |t, y, x, c| {
        let tf = t as f64;
        let (bx, by) = (x as f64 - pan_x * tf, y as f64 - pan_y * tf);
        let [b0, gx, gy] = base[c];
        let mut v = b0 + gx * (bx / w) + gy * (by / h);
        for wave in &waves {
            v += wave.amp * wave.weights[c] * (TAU * (wave.fx * bx + wave.fy * by) + wave.phase).sin();
        }
        for d in &discs {
            let dx = wrap(x as f64 - (d.cx + d.vx * tf), w);
            let dy = wrap(y as f64 - (d.cy + d.vy * tf), h);
            let dist = (dx * dx + dy * dy).sqrt();
            let cover = ((d.radius + 0.75 - dist) / 1.5).clamp(0.0, 1.0);
            v = (1.0 - cover) * v + cover * d.color[c];
        }
        encode(v)
    })
}

/// Signed distance on a periodic axis of length `len`.
fn wrap(d: f64, len: f64) -> f64 {
    let r = d.rem_euclid(len);
    if r > len / 2.0 {
        r - len
    } else {
        r
    }
}

/// A bank of sources; a fixed fraction are rendered as 10-bit HDR-like content.
pub fn synthesize_bank(
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
    hdr_fraction: f64,
    seed: u64,
) -> Result<Vec<FrameSequence>> {
    let hdr_count = (hdr_fraction * count as f64).round() as usize;
    (0..count)
        .map(|i| {
            let style = if i < hdr_count { SourceStyle::default_hdr() } else { SourceStyle::default_sdr() };
            synthesize_source(super::derive_seed(seed, &[0x5eed, i as u64]), frames, height, width, style)
        })
        .collect()
}
