//! Multi-head self-attention restricted to fixed windows along the event
//! axis, optionally on a cyclically shifted sequence.
//!
//! The shift is applied by index arithmetic: position `p` of the rolled
//! sequence is token `(p + shift) mod L`. In the rolled frame the last window
//! straddles the wrap seam, and tokens on either side of the seam may not
//! attend to each other. Keys at padded tokens (index >= valid count) are
//! masked everywhere. A query left with no admissible key outputs exactly
//! zero, projection bias included, so a residual around the block passes it
//! through unchanged.

use crate::ops::{linear_bwd, linear_fwd};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub len: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// Cyclic shift applied before partitioning; 0 for plain windows.
    pub shift: usize,
    pub valid: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Token index of rolled position `p`.
    #[inline]
    fn token(&self, p: usize) -> usize {
        (p + self.shift) % self.len
    }

    /// Seam region of rolled position `p`.
    #[inline]
    fn region(&self, p: usize) -> u8 {
        if self.shift == 0 || p < self.len - self.window {
            0
        } else if p < self.len - self.shift {
            1
        } else {
            2
        }
    }

    #[inline]
    fn admissible(&self, p: usize, q: usize) -> bool {
        self.region(p) == self.region(q) && self.token(q) < self.valid
    }
}

/// Parameters of one attention block, borrowed from the parameter store.
pub struct AttnParams<'a, T> {
    pub qkv_w: &'a [T],
    pub qkv_b: &'a [T],
    pub proj_w: &'a [T],
    pub proj_b: &'a [T],
    /// `[heads, 2 * window - 1]`, indexed by key offset minus query offset.
    pub rel_bias: &'a [T],
}

pub struct AttnGrads<'a, T> {
    pub qkv_w: &'a mut [T],
    pub qkv_b: &'a mut [T],
    pub proj_w: &'a mut [T],
    pub proj_b: &'a mut [T],
    pub rel_bias: &'a mut [T],
}

#[derive(Debug, Clone, Default)]
pub struct AttnCache<T> {
    pub qkv: Vec<T>,
    /// `[heads, L, window]` probabilities by rolled query position.
    pub probs: Vec<T>,
    pub mixed: Vec<T>,
    /// Tokens without any admissible key.
    pub dead: Vec<bool>,
}

/// `x: [L, C]` -> `[L, C]`.
pub fn attention_fwd<T: Scalar>(s: &AttnShape, p: &AttnParams<'_, T>, x: &[T], y: &mut [T]) -> AttnCache<T> {
    let (l, c, w, nh, d) = (s.len, s.dim, s.window, s.heads, s.head_dim());
    let mut qkv = vec![T::zero(); l * 3 * c];
    linear_fwd(x, l, c, p.qkv_w, p.qkv_b, 3 * c, &mut qkv);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut probs = vec![T::zero(); nh * l * w];
    let mut mixed = vec![T::zero(); l * c];
    let mut scores = vec![T::zero(); w];
    let mut dead = vec![false; l];
    for h in 0..nh {
        let bias = &p.rel_bias[h * (2 * w - 1)..(h + 1) * (2 * w - 1)];
        for start in (0..l).step_by(w) {
            for i in 0..w {
                let pi = start + i;
                let ti = s.token(pi);
                let q = &qkv[ti * 3 * c + h * d..ti * 3 * c + h * d + d];
                let mut best = T::neg_infinity();
                for j in 0..w {
                    let pj = start + j;
                    if !s.admissible(pi, pj) {
                        scores[j] = T::neg_infinity();
                        continue;
                    }
                    let tj = s.token(pj);
                    let k = &qkv[tj * 3 * c + c + h * d..tj * 3 * c + c + h * d + d];
                    let dot: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                    scores[j] = dot * scale + bias[j + w - 1 - i];
                    best = best.max(scores[j]);
                }
                if best == T::neg_infinity() {
                    dead[ti] = true;
                    continue;
                }
                let row = &mut probs[(h * l + pi) * w..(h * l + pi + 1) * w];
                let mut z = T::zero();
                for j in 0..w {
                    if scores[j] > T::neg_infinity() {
                        row[j] = (scores[j] - best).exp();
                        z += row[j];
                    }
                }
                let out = &mut mixed[ti * c + h * d..ti * c + h * d + d];
                for j in 0..w {
                    row[j] /= z;
                    if row[j] == T::zero() {
                        continue;
                    }
                    let tj = s.token(start + j);
                    let v = &qkv[tj * 3 * c + 2 * c + h * d..tj * 3 * c + 2 * c + h * d + d];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += row[j] * vv;
                    }
                }
            }
        }
    }
    linear_fwd(&mixed, l, c, p.proj_w, p.proj_b, c, y);
    for (t, row) in y.chunks_exact_mut(c).enumerate() {
        if dead[t] {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    AttnCache {
        qkv,
        probs,
        mixed,
        dead,
    }
}

/// Accumulates parameter gradients and `dx`.
pub fn attention_bwd<T: Scalar>(
    s: &AttnShape,
    p: &AttnParams<'_, T>,
    x: &[T],
    cache: &AttnCache<T>,
    dy: &[T],
    dx: &mut [T],
    g: AttnGrads<'_, T>,
) {
    let (l, c, w, nh, d) = (s.len, s.dim, s.window, s.heads, s.head_dim());
    let mut dmixed = vec![T::zero(); l * c];
    let mut dy_live = dy.to_vec();
    for (t, row) in dy_live.chunks_exact_mut(c).enumerate() {
        if cache.dead[t] {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    linear_bwd(&cache.mixed, l, c, p.proj_w, c, &dy_live, Some(&mut dmixed), g.proj_w, g.proj_b);
    let qkv = &cache.qkv;
    let mut dqkv = vec![T::zero(); l * 3 * c];
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dp = vec![T::zero(); w];
    for h in 0..nh {
        let rel = h * (2 * w - 1);
        for start in (0..l).step_by(w) {
            for i in 0..w {
                let pi = start + i;
                let ti = s.token(pi);
                let row = &cache.probs[(h * l + pi) * w..(h * l + pi + 1) * w];
                let dout = &dmixed[ti * c + h * d..ti * c + h * d + d];
                let mut acc = T::zero();
                for j in 0..w {
                    dp[j] = T::zero();
                    if row[j] == T::zero() {
                        continue;
                    }
                    let tj = s.token(start + j);
                    let voff = tj * 3 * c + 2 * c + h * d;
                    let v = &qkv[voff..voff + d];
                    dp[j] = dout.iter().zip(v).map(|(&a, &b)| a * b).sum();
                    acc += row[j] * dp[j];
                    for k in 0..d {
                        dqkv[voff + k] += row[j] * dout[k];
                    }
                }
                let qoff = ti * 3 * c + h * d;
                for j in 0..w {
                    if row[j] == T::zero() {
                        continue;
                    }
                    let ds = row[j] * (dp[j] - acc);
                    g.rel_bias[rel + j + w - 1 - i] += ds;
                    let koff = s.token(start + j) * 3 * c + c + h * d;
                    for k in 0..d {
                        dqkv[qoff + k] += ds * scale * qkv[koff + k];
                        dqkv[koff + k] += ds * scale * qkv[qoff + k];
                    }
                }
            }
        }
    }
    linear_bwd(x, l, c, p.qkv_w, 3 * c, &dqkv, Some(dx), g.qkv_w, g.qkv_b);
}
