//! Image-quality metrics: PSNR, global SSIM and thresholded Dice.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::imaging::{AngularImage, GridError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for MetricConstants {
    fn default() -> Self {
        Self { c1: 1e-4, c2: 1e-3 }
    }
}

/// PSNR in dB. Identical images have no finite value and are reported as
/// `Infinite`, serialized as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    /// Infinite maps to `f64::INFINITY`.
    pub fn as_f64(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// `20 log10(peak / rmse)` with `peak` the largest value in either image.
pub fn psnr(x: &AngularImage, xhat: &AngularImage) -> Result<Psnr, GridError> {
    x.check_same_shape(xhat)?;
    let sq: f64 = x.values.iter().zip(&xhat.values).map(|(a, b)| (a - b) * (a - b)).sum();
    if sq == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let rmse = (sq / x.len() as f64).sqrt();
    let peak = x.max().max(xhat.max());
    Ok(Psnr::Finite(20.0 * (peak / rmse).log10()))
}

/// Single-window SSIM over all pixels, with population moments.
pub fn ssim_with(x: &AngularImage, y: &AngularImage, k: MetricConstants) -> Result<f64, GridError> {
    x.check_same_shape(y)?;
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.values.iter().zip(&y.values) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    Ok(((2.0 * mx * my + k.c1) * (2.0 * cxy + k.c2)) / ((mx * mx + my * my + k.c1) * (vx + vy + k.c2)))
}

pub fn ssim(x: &AngularImage, y: &AngularImage) -> Result<f64, GridError> {
    ssim_with(x, y, MetricConstants::default())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl BinaryImage {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `[X > t]`.
pub fn binarize(x: &AngularImage, t: f64) -> BinaryImage {
    BinaryImage {
        width: x.width,
        height: x.height,
        mask: x.values.iter().map(|&v| v > t).collect(),
    }
}

/// `2 |A n B| / (|A| + |B|)`, and 1 when both sets are empty.
pub fn dice_coefficient(a: &BinaryImage, b: &BinaryImage) -> Result<f64, GridError> {
    if a.width != b.width || a.height != b.height {
        return Err(GridError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let inter = a.mask.iter().zip(&b.mask).filter(|(&p, &q)| p && q).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Psnr,
    pub ssim: f64,
    pub dice_at_t: f64,
}

pub fn evaluate(x: &AngularImage, xhat: &AngularImage, t: f64) -> Result<MetricReport, GridError> {
    Ok(MetricReport {
        psnr_db: psnr(x, xhat)?,
        ssim: ssim(x, xhat)?,
        dice_at_t: dice_coefficient(&binarize(x, t), &binarize(xhat, t))?,
    })
}
