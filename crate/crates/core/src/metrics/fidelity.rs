use crate::error::{arg, Result};
use crate::video::FrameSequence;

/// Window side used by [`ssim_baseline`].
pub const SSIM_WINDOW: usize = 8;

/// BT.601 luma of one RGB sample triple.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Mean squared error over every sample of two equally shaped sequences.
pub fn mse(reference: &FrameSequence, distorted: &FrameSequence) -> Result<f64> {
    reference.check_same_geometry(distorted)?;
    let sum: f64 = reference
        .samples()
        .iter()
        .zip(distorted.samples())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum / reference.samples().len() as f64)
}

/// Peak signal-to-noise ratio in dB over all samples.
///
/// Identical inputs return `f64::INFINITY`; no finite cap is applied.
pub fn psnr(reference: &FrameSequence, distorted: &FrameSequence) -> Result<f64> {
    let m = mse(reference, distorted)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let max = reference.max_value();
    Ok(10.0 * (max * max / m).log10())
}

/// Mean SSIM over non-overlapping 8x8 luma windows of every frame.
pub fn ssim_baseline(reference: &FrameSequence, distorted: &FrameSequence) -> Result<f64> {
    ssim_with_window(reference, distorted, SSIM_WINDOW)
}

pub fn ssim_with_window(reference: &FrameSequence, distorted: &FrameSequence, window: usize) -> Result<f64> {
    reference.check_same_geometry(distorted)?;
    if window == 0 || reference.height() < window || reference.width() < window {
        return arg(format!(
            "frame {}x{} smaller than the {window}x{window} window",
            reference.height(),
            reference.width()
        ));
    }
    let l = reference.max_value();
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let n = (window * window) as f64;
    let lum = |s: &FrameSequence, t, y, x| {
        luma(f64::from(s.get(t, y, x, 0)), f64::from(s.get(t, y, x, 1)), f64::from(s.get(t, y, x, 2)))
    };
    let (mut total, mut count) = (0.0, 0usize);
    for t in 0..reference.frames() {
        for by in 0..reference.height() / window {
            for bx in 0..reference.width() / window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in by * window..(by + 1) * window {
                    for x in bx * window..(bx + 1) * window {
                        let a = lum(reference, t, y, x);
                        let b = lum(distorted, t, y, x);
                        sa += a;
                        sb += b;
                        saa += a * a;
                        sbb += b * b;
                        sab += a * b;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
