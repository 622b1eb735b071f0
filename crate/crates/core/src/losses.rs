//! Training objective: a region-weighted squared error, a soft Dice term and
//! their gradient-balanced sum, each with an analytic gradient w.r.t. the
//! prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label has {0} pixels but prediction has {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Hybrid,
    PlainMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of pixels whose label exceeds `t`.
    pub w1: f64,
    /// Weight of the remaining pixels.
    pub w2: f64,
    pub t: f64,
    /// Floor on the normalizers |l1|, |l2|.
    pub epsilon_norm: f64,
    /// Width of the linear ramp that softens the prediction mask.
    pub dice_smoothing: f64,
    pub dice_epsilon: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.2,
            t: 0.02,
            epsilon_norm: 1e-8,
            dice_smoothing: 0.01,
            dice_epsilon: 1e-8,
            mode: LossMode::Hybrid,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if !(self.w1 >= 0.0) {
            errs.push(("w1", format!("must be >= 0, got {}", self.w1)));
        }
        if !(self.w2 >= 0.0) {
            errs.push(("w2", format!("must be >= 0, got {}", self.w2)));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            errs.push(("t", format!("must lie in (0, 1), got {}", self.t)));
        }
        for (name, v) in [
            ("epsilon_norm", self.epsilon_norm),
            ("dice_smoothing", self.dice_smoothing),
            ("dice_epsilon", self.dice_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push((name, format!("must be positive, got {v}")));
            }
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn check(x: &[f64], xhat: &[f64]) -> Result<(), LossError> {
    if x.len() != xhat.len() {
        return Err(LossError::DimensionMismatch(x.len(), xhat.len()));
    }
    Ok(())
}

/// `(1/J) sum_j w(X_j) (X_j - Xhat_j)^2` with `w = w1` where `X_j > t` and
/// `w2` elsewhere.
pub fn shape_loss(x: &[f64], xhat: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>), LossError> {
    check(x, xhat)?;
    let inv_j = 1.0 / x.len() as f64;
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| {
            let w = if a > cfg.t { cfg.w1 } else { cfg.w2 };
            let d = a - b;
            loss += w * d * d;
            -2.0 * w * d * inv_j
        })
        .collect();
    Ok((loss * inv_j, grad))
}

/// Soft Dice loss `(S - 2I) / (S + eps)` with `S = sum a + sum b`,
/// `I = sum a b`, `a = [X > t]` and `b = clamp((Xhat - t) / s, 0, 1)`.
///
/// Equals `1 - dice` for crisp predictions and is 0 when both masks are empty.
pub fn dice_loss(x: &[f64], xhat: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>), LossError> {
    check(x, xhat)?;
    let s = cfg.dice_smoothing;
    let a: Vec<f64> = x.iter().map(|&v| if v > cfg.t { 1.0 } else { 0.0 }).collect();
    let r: Vec<f64> = xhat.iter().map(|&v| (v - cfg.t) / s).collect();
    let b: Vec<f64> = r.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let sum: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    let inter: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
    let den = sum + cfg.dice_epsilon;
    let num = sum - 2.0 * inter;
    let grad = a
        .iter()
        .zip(&r)
        .map(|(&aj, &rj)| {
            if rj > 0.0 && rj < 1.0 {
                ((1.0 - 2.0 * aj) * den - num) / (den * den) / s
            } else {
                0.0
            }
        })
        .collect();
    Ok((num / den, grad))
}

fn mse(x: &[f64], xhat: &[f64]) -> (f64, Vec<f64>) {
    let inv_j = 1.0 / x.len() as f64;
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| {
            loss += (a - b) * (a - b);
            2.0 * (b - a) * inv_j
        })
        .collect();
    (loss * inv_j, grad)
}

/// Single-sample objective. See [`hybrid_batch`].
pub fn hybrid_loss(x: &[f64], xhat: &[f64], cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>), LossError> {
    let (b, mut g) = hybrid_batch(&[x], &[xhat], cfg)?;
    Ok((b, g.pop().expect("one sample")))
}

/// Batch objective with per-sample gradients.
///
/// In hybrid mode `l1`, `l2` are batch means, `alpha = 1 / max(|l1|, eps)`
/// and `beta = 1 / max(|l2|, eps)` are held constant while differentiating,
/// so the gradient is `grad l1 / |l1| + grad l2 / |l2|`. Plain-MSE mode
/// reports the mean squared error as `l1` with `alpha = 1`, `beta = 0`.
pub fn hybrid_batch(
    xs: &[&[f64]],
    xhats: &[&[f64]],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>), LossError> {
    if xs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if xs.len() != xhats.len() {
        return Err(LossError::DimensionMismatch(xs.len(), xhats.len()));
    }
    for (x, xh) in xs.iter().zip(xhats) {
        check(x, xh)?;
    }
    let inv_b = 1.0 / xs.len() as f64;
    if cfg.mode == LossMode::PlainMse {
        let mut l1 = 0.0;
        let mut grads = Vec::with_capacity(xs.len());
        for (x, xh) in xs.iter().zip(xhats) {
            let (l, g) = mse(x, xh);
            l1 += l * inv_b;
            grads.push(g.into_iter().map(|v| v * inv_b).collect());
        }
        let b = LossBreakdown {
            l1,
            l2: 0.0,
            total: l1,
            alpha: 1.0,
            beta: 0.0,
        };
        return Ok((b, grads));
    }
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut parts = Vec::with_capacity(xs.len());
    for (x, xh) in xs.iter().zip(xhats) {
        let (a, ga) = shape_loss(x, xh, cfg)?;
        let (d, gd) = dice_loss(x, xh, cfg)?;
        l1 += a * inv_b;
        l2 += d * inv_b;
        parts.push((ga, gd));
    }
    let n1 = l1.abs().max(cfg.epsilon_norm);
    let n2 = l2.abs().max(cfg.epsilon_norm);
    let (alpha, beta) = (1.0 / n1, 1.0 / n2);
    let grads = parts
        .into_iter()
        .map(|(ga, gd)| {
            ga.iter()
                .zip(&gd)
                .map(|(p, q)| (p / n1 + q / n2) * inv_b)
                .collect()
        })
        .collect();
    let b = LossBreakdown {
        l1,
        l2,
        total: l1 / n1 + l2 / n2,
        alpha,
        beta,
    };
    Ok((b, grads))
}
