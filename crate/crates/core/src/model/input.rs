use ndarray::Array2;

use super::config::Mode;
use crate::error::{arg, Result};
use crate::video::{FrameSequence, CHANNELS};

/// Normalized network input, `frames x height x width x channels` row-major.
///
/// Picture channels are scaled to `[0, 1]`; the FR residual `dist - ref` is in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// NR passes the distorted clip through; FR stacks distorted, reference and residual.
pub fn assemble_input(dist: &FrameSequence, reference: Option<&FrameSequence>, mode: Mode) -> Result<ModelInput> {
    let max = dist.max_value();
    let (frames, height, width) = (dist.frames(), dist.height(), dist.width());
    match (mode, reference) {
        (Mode::Nr, None) => Ok(ModelInput {
            frames,
            height,
            width,
            channels: CHANNELS,
            data: dist.samples().iter().map(|&v| f64::from(v) / max).collect(),
        }),
        (Mode::Nr, Some(_)) => arg("NR input must not carry a reference"),
        (Mode::Fr, None) => arg("FR input needs a reference"),
        (Mode::Fr, Some(r)) => {
            dist.check_same_geometry(r)?;
            let mut data = Vec::with_capacity(dist.samples().len() * 3);
            for (d, r) in dist.samples().chunks_exact(CHANNELS).zip(r.samples().chunks_exact(CHANNELS)) {
                data.extend(d.iter().map(|&v| f64::from(v) / max));
                data.extend(r.iter().map(|&v| f64::from(v) / max));
                data.extend(d.iter().zip(r).map(|(&a, &b)| (f64::from(a) - f64::from(b)) / max));
            }
            Ok(ModelInput { frames, height, width, channels: 3 * CHANNELS, data })
        }
    }
}

impl ModelInput {
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Tokens per frame for a given patch size.
    pub fn tokens(&self, patch: usize) -> usize {
        (self.height / patch) * (self.width / patch)
    }

    /// Non-overlapping patches flattened to rows, frame-major then raster order;
    /// each row is `(dy, dx, c)` row-major.
    pub fn patches(&self, patch: usize) -> Result<Array2<f64>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return arg(format!("{}x{} frames are not divisible into {patch}-pixel patches", self.height, self.width));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let cols = patch * patch * self.channels;
        let mut out = Array2::zeros((self.frames * gh * gw, cols));
        for t in 0..self.frames {
            for py in 0..gh {
                for px in 0..gw {
                    let mut row = out.row_mut((t * gh + py) * gw + px);
                    let row = row.as_slice_mut().expect("standard layout");
                    for dy in 0..patch {
                        let start = ((t * self.height + py * patch + dy) * self.width + px * patch) * self.channels;
                        let len = patch * self.channels;
                        row[dy * len..(dy + 1) * len].copy_from_slice(&self.data[start..start + len]);
                    }
                }
            }
        }
        Ok(out)
    }
}
