//! Rank statistics, detection metrics and baseline fidelity measures.
//!
//! Everything here is a pure function over immutable inputs.

mod classification;
mod correlation;
mod fidelity;

pub use classification::{f1_accuracy_auc, BinaryOutcomes, DetectionScores};
pub use correlation::{average_ranks, normalize_scores, plcc, srocc, ScoreVector};
pub use fidelity::{luma, mse, psnr, ssim_baseline, ssim_with_window, SSIM_WINDOW};
