//! Gaussian cone kernel and the sparse list-mode system rows built from it.

use crate::geom::{dot, Vec3};
use crate::kinematics::ConeParams;

/// Kernel weights below this are dropped from system rows.
pub const DEFAULT_SPARSE_THRESHOLD: f64 = 1e-4;

/// `exp(-(psi - theta)^2 / (2 sigma^2))` where `psi` is the angle between
/// `omega` and the cone axis and `theta` the cone half-angle.
pub fn cone_kernel_weight(cone: &ConeParams, omega: Vec3, sigma: f64) -> f64 {
    let psi = dot(omega, cone.axis).clamp(-1.0, 1.0).acos();
    let d = psi - cone.half_angle();
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Event-by-pixel system matrix in compressed-row form. Row `i` holds the
/// kernel weights of event `i` above the sparsity threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub n_pixels: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

impl SparseSystem {
    pub fn from_rows(n_pixels: usize, rows: &[Vec<(u32, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for &(j, w) in row {
                debug_assert!((j as usize) < n_pixels);
                indices.push(j);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self {
            n_pixels,
            offsets,
            indices,
            weights,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.weights[a..b])
    }
}

/// Dense kernel row over precomputed pixel directions.
pub(crate) fn dense_row(cone: &ConeParams, directions: &[Vec3], sigma: f64, out: &mut [f64]) {
    let theta = cone.half_angle();
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (o, w) in out.iter_mut().zip(directions) {
        let psi = dot(*w, cone.axis).clamp(-1.0, 1.0).acos();
        let d = psi - theta;
        *o = (-d * d * inv).exp();
    }
}

pub(crate) fn sparse_row(cone: &ConeParams, directions: &[Vec3], sigma: f64, threshold: f64) -> Vec<(u32, f64)> {
    let theta = cone.half_angle();
    let inv = 1.0 / (2.0 * sigma * sigma);
    // |psi - theta| beyond this radius falls under the threshold
    let radius = sigma * (-2.0 * threshold.ln()).max(0.0).sqrt();
    let (lo, hi) = ((theta - radius).max(0.0), (theta + radius).min(std::f64::consts::PI));
    let (cos_hi, cos_lo) = (lo.cos(), hi.cos());
    let mut row = Vec::new();
    for (j, w) in directions.iter().enumerate() {
        let c = dot(*w, cone.axis).clamp(-1.0, 1.0);
        if c > cos_hi || c < cos_lo {
            continue;
        }
        let d = c.acos() - theta;
        let k = (-d * d * inv).exp();
        if k > threshold {
            row.push((j as u32, k));
        }
    }
    row
}
