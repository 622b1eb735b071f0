//! Named parameter tensors and the CCWT1 weights file.
//!
//! File layout: u32 little-endian header length, a JSON header
//! `{format: "CCWT1", tensors: [{name, shape, dtype: "f32", offset}], config}`,
//! then the packed little-endian f32 data. Offsets are bytes from the start
//! of the data section.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::NetworkConfig;
use crate::scalar::Scalar;

pub const WEIGHTS_FORMAT: &str = "CCWT1";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weights file truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("weights header: {0}")]
    Header(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("network config: {field}: {message}")]
    Config { field: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named tensors. Gradients and optimizer moments use
/// the same structure as the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name, shape, data });
        self.tensors.len() - 1
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    /// Flat view: `(tensor, element)` of scalar number `k`.
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.data.len() {
                return Some((i, k));
            }
            k -= t.data.len();
        }
        None
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    tensors: Vec<TensorEntry>,
    config: NetworkConfig,
}

pub fn encode_weights(params: &Params<f32>, config: &NetworkConfig) -> Vec<u8> {
    let mut offset = 0;
    let tensors = params
        .tensors
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
            };
            offset += 4 * t.data.len();
            e
        })
        .collect();
    let header = Header {
        format: WEIGHTS_FORMAT.into(),
        tensors,
        config: config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<(Params<f32>, NetworkConfig), WeightsError> {
    let truncated = |need: usize| WeightsError::Truncated {
        need,
        have: bytes.len(),
    };
    let len_bytes: [u8; 4] = bytes.get(..4).ok_or(truncated(4))?.try_into().expect("4 bytes");
    let hlen = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(4..4 + hlen).ok_or(truncated(4 + hlen))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| WeightsError::Header(e.to_string()))?;
    if header.format != WEIGHTS_FORMAT {
        return Err(WeightsError::Header(format!(
            "format {:?}, expected {WEIGHTS_FORMAT:?}",
            header.format
        )));
    }
    let data = &bytes[4 + hlen..];
    let mut params = Params::default();
    let mut expected_offset = 0;
    for e in header.tensors {
        let bad = |message: String| WeightsError::Tensor {
            name: e.name.clone(),
            message,
        };
        if e.dtype != "f32" {
            return Err(bad(format!("dtype {:?} is not f32", e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(bad(format!("offset {} but tensors must be packed at {expected_offset}", e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let raw = data.get(e.offset..end).ok_or(WeightsError::Truncated {
            need: 4 + hlen + end,
            have: bytes.len(),
        })?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value at element {k}")));
        }
        expected_offset = end;
        params.push(e.name, e.shape, values);
    }
    if expected_offset != data.len() {
        return Err(WeightsError::Header(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_offset
        )));
    }
    if let Some((field, message)) = header.config.validate().into_iter().next() {
        return Err(WeightsError::Config { field, message });
    }
    Ok((params, header.config))
}
