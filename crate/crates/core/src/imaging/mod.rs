//! The angular image grid and the classical reconstructors.
//!
//! Column `u` of a `W x H` image covers azimuth `phi = pi (u + 0.5) / W`;
//! row `v` covers polar cosine `c = 1 - 2 (v + 0.5) / H`. The polar axis is
//! the camera +x axis and azimuth runs from +y toward +z, so the grid spans
//! the source-side hemisphere z > 0 with equal-area pixels.

mod format;
mod kernel;
mod recon;

pub use format::{decode_image, encode_image, to_pgm, IMAGE_MAGIC};
pub use kernel::{cone_kernel_weight, SparseSystem, DEFAULT_SPARSE_THRESHOLD};
pub use recon::{
    build_system, mlem, mlem_system, sbp, soe, soe_system, MlemTrace, ReconConfig, ReconError,
    ReconReport, SoeState,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Axis;
use crate::geom::{angles_from_direction, direction_from_angles, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("pixel ({u}, {v}) outside {width}x{height} grid")]
    OutOfBounds { u: usize, v: usize, width: usize, height: usize },
    #[error("image dimensions {0}x{1} differ from {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("grid must be at least 2x2, got {0}x{1}")]
    TooSmall(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self::square(256)
    }
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Result<Self, GridError> {
        if width < 2 || height < 2 {
            return Err(GridError::TooSmall(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn square(n: usize) -> Self {
        Self { width: n, height: n }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Angular size of a pixel, radians: the square root of its solid angle.
    pub fn pixel_angle(&self) -> f64 {
        (2.0 * PI / self.len() as f64).sqrt()
    }

    pub fn pixel_direction(&self, u: usize, v: usize) -> Result<Vec3, GridError> {
        pixel_direction(u, v, self.width, self.height)
    }

    /// Pixel directions in row-major order.
    pub fn directions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        for v in 0..self.height {
            for u in 0..self.width {
                out.push(center_direction(u, v, self.width, self.height));
            }
        }
        out
    }

    pub fn direction_to_pixel(&self, omega: Vec3) -> (usize, usize) {
        direction_to_pixel(omega, self.width, self.height)
    }
}

fn center_direction(u: usize, v: usize, width: usize, height: usize) -> Vec3 {
    let phi = PI * (u as f64 + 0.5) / width as f64;
    let c = 1.0 - 2.0 * (v as f64 + 0.5) / height as f64;
    direction_from_angles(phi, c)
}

pub fn pixel_direction(u: usize, v: usize, width: usize, height: usize) -> Result<Vec3, GridError> {
    if u >= width || v >= height {
        return Err(GridError::OutOfBounds { u, v, width, height });
    }
    Ok(center_direction(u, v, width, height))
}

/// Pixel containing `omega`. Directions outside the hemisphere are clamped
/// to the nearest border column.
pub fn direction_to_pixel(omega: Vec3, width: usize, height: usize) -> (usize, usize) {
    let (phi, c) = angles_from_direction(omega);
    let phi = if phi < 0.0 {
        if phi < -PI / 2.0 {
            PI
        } else {
            0.0
        }
    } else {
        phi
    };
    let u = ((phi / PI) * width as f64).floor().clamp(0.0, (width - 1) as f64) as usize;
    let v = ((1.0 - c) * 0.5 * height as f64)
        .floor()
        .clamp(0.0, (height - 1) as f64) as usize;
    (u, v)
}

/// Row-major image over the angular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl AngularImage {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            width: grid.width,
            height: grid.height,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::DimensionMismatch(values.len(), 1, grid.width, grid.height));
        }
        Ok(Self {
            width: grid.width,
            height: grid.height,
            values,
        })
    }

    pub fn grid(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.values[v * self.width + u] = value;
    }

    pub fn check_same_shape(&self, other: &AngularImage) -> Result<(), GridError> {
        if self.width != other.width || self.height != other.height {
            return Err(GridError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// First pixel holding the maximum value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Scales the image so its maximum is 1; an all-zero image is returned
    /// unchanged.
    pub fn normalized_to_peak(&self) -> Self {
        let m = self.max();
        let mut out = self.clone();
        if m > 0.0 && m.is_finite() {
            for v in &mut out.values {
                *v /= m;
            }
        }
        out
    }

    pub fn mirrored(&self, axis: Axis) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = self.clone();
        for v in 0..h {
            for u in 0..w {
                let (su, sv) = match axis {
                    Axis::X => (u, h - 1 - v),
                    Axis::Y => (w - 1 - u, v),
                };
                out.values[v * w + u] = self.values[sv * w + su];
            }
        }
        out
    }
}

/// Chebyshev distance between two pixels.
pub fn pixel_distance(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}
