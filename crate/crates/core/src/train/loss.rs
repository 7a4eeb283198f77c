//! The four training objectives and their gradients with respect to model outputs.

use super::config::TrainConfig;
use crate::error::{arg, Result};
use crate::nn::sigmoid;

/// Clamps `p` to `[eps, 1 - eps]`; the flag tells whether clamping was active.
fn clamp(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, true)
    } else if p > 1.0 - eps {
        (1.0 - eps, true)
    } else {
        (p, false)
    }
}

fn bce(p: f64, v: f64) -> f64 {
    -(v * p.ln() + (1.0 - v) * (-p).ln_1p())
}

/// `ln(1 + e^x)` without overflow or cancellation.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Pairwise ranking loss: BCE of `sigmoid(q_a - q_b)` against `v`.
pub fn rank_loss(q_a: f64, q_b: f64, v: u8, eps: f64) -> f64 {
    rank_loss_grad(q_a, q_b, v, eps).0
}

/// Loss and its derivative with respect to `q_a` (the one for `q_b` is the negation).
pub fn rank_loss_grad(q_a: f64, q_b: f64, v: u8, eps: f64) -> (f64, f64) {
    let v = f64::from(v);
    let d = q_a - q_b;
    let p = sigmoid(d);
    let (pc, clamped) = clamp(p, eps);
    if clamped {
        // `sigmoid(-d)` rather than `1 - p` keeps the loss exactly symmetric under (d, v) -> (-d, 1 - v).
        let (qc, _) = clamp(sigmoid(-d), eps);
        return (-(v * pc.ln() + (1.0 - v) * qc.ln()), 0.0);
    }
    // -ln(sigmoid(d)) = softplus(-d), -ln(1 - sigmoid(d)) = softplus(d).
    (v * softplus(-d) + (1.0 - v) * softplus(d), p - v)
}

/// Mean element-wise BCE between artifact probabilities and weak labels.
pub fn artifact_loss(a: &[f64], labels: &[u8], eps: f64) -> Result<f64> {
    Ok(artifact_loss_grad(a, labels, eps)?.0)
}

/// Loss and its gradient with respect to each probability.
pub fn artifact_loss_grad(a: &[f64], labels: &[u8], eps: f64) -> Result<(f64, Vec<f64>)> {
    if a.len() != labels.len() || a.is_empty() {
        return arg(format!("artifact vector has {} entries, labels {}", a.len(), labels.len()));
    }
    let n = a.len() as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(labels)
        .map(|(&p, &v)| {
            let v = f64::from(v);
            let (pc, clamped) = clamp(p, eps);
            total += bce(pc, v);
            if clamped {
                0.0
            } else {
                (pc - v) / (pc * (1.0 - pc)) / n
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// `|(q_x - q_y) - (s_x - s_y)|`.
pub fn global_loss(q_x: f64, q_y: f64, s_x: f64, s_y: f64) -> f64 {
    ((q_x - q_y) - (s_x - s_y)).abs()
}

/// Loss and its derivative with respect to `q_x` (negated for `q_y`); zero at the kink.
pub fn global_loss_grad(q_x: f64, q_y: f64, s_x: f64, s_y: f64) -> (f64, f64) {
    let r = (q_x - q_y) - (s_x - s_y);
    (r.abs(), if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 })
}

pub fn total_loss(l_global: f64, l_artifact: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_g * l_global + cfg.lambda_a * l_artifact
}
