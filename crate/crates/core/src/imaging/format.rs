//! CCIM image files and PGM export.
//!
//! CCIM layout (little endian): magic `CCIM`, u16 version = 1, u16 reserved,
//! u32 width, u32 height, then `width * height` f32 values row-major with
//! row 0 first.

use crate::codec::{FormatError, FormatErrorKind, Reader};

use super::AngularImage;

pub const IMAGE_MAGIC: &[u8; 4] = b"CCIM";
const IMAGE_VERSION: u16 = 1;

pub fn encode_image(img: &AngularImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for &v in &img.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<AngularImage, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != IMAGE_MAGIC {
        return Err(FormatError::new(0, FormatErrorKind::BadMagic));
    }
    let version = r.u16()?;
    if version != IMAGE_VERSION {
        return Err(FormatError::new(4, FormatErrorKind::UnsupportedVersion(version)));
    }
    r.u16()?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let n = width
        .checked_mul(height)
        .ok_or(FormatError::new(8, FormatErrorKind::Csv("image dimensions overflow".into())))?;
    let mut values = Vec::with_capacity(n.min(1 << 26));
    for _ in 0..n {
        let at = r.pos();
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(FormatError::new(at, FormatErrorKind::NonFinite("pixel")));
        }
        values.push(v as f64);
    }
    r.finish()?;
    Ok(AngularImage { width, height, values })
}

/// Binary 8-bit PGM with linear min-max scaling.
pub fn to_pgm(img: &AngularImage) -> Vec<u8> {
    let lo = img.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.values
            .iter()
            .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}
