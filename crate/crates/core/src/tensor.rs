//! Dense row-major tensors holding either raw fixed-point words or `f32`.

use std::fmt;

use thiserror::Error;

use crate::numerics::{quantize_raw, QFormat};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("coordinates {coords:?} out of bounds for shape {shape}")]
    OutOfBounds { coords: Vec<usize>, shape: Shape },
    #[error("shape {shape} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: extents must be positive and rank at most 4")]
    InvalidShape(Vec<usize>),
    #[error("expected a {expected} tensor")]
    WrongKind { expected: &'static str },
    #[error("tensor contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK || dims.contains(&0) {
            return Err(TensorError::InvalidShape(dims));
        }
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major offset of `coords`.
    pub fn offset(&self, coords: &[usize]) -> Result<usize, TensorError> {
        if coords.len() != self.0.len() || coords.iter().zip(&self.0).any(|(&c, &d)| c >= d) {
            return Err(TensorError::OutOfBounds {
                coords: coords.to_vec(),
                shape: self.clone(),
            });
        }
        Ok(coords
            .iter()
            .zip(&self.0)
            .fold(0, |acc, (&c, &d)| acc * d + c))
    }

    /// Inverse of [`Shape::offset`].
    pub fn coords(&self, mut offset: usize) -> Vec<usize> {
        let mut out = vec![0; self.0.len()];
        for (slot, &d) in out.iter_mut().zip(&self.0).rev() {
            *slot = offset % d;
            offset /= d;
        }
        out
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("×"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Fixed { raw: Vec<i32>, format: QFormat },
}

/// A scalar read out of a tensor, already scaled to real units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Element {
    F32(f32),
    Fixed(i32),
}

/// Shape + storage + per-tensor scale.
///
/// For fixed tensors the real value of an element is `raw / 2^f · scale`.
/// Float tensors carry `scale = 1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: TensorData,
    scale: f32,
}

impl Tensor {
    pub fn from_f32(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::F32(data),
            scale: 1.0,
        })
    }

    pub fn from_raw(
        shape: Shape,
        raw: Vec<i32>,
        format: QFormat,
        scale: f32,
    ) -> Result<Self, TensorError> {
        check_len(&shape, raw.len())?;
        debug_assert!(scale > 0.0);
        Ok(Self {
            shape,
            data: TensorData::Fixed { raw, format },
            scale,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn format(&self) -> Option<QFormat> {
        match &self.data {
            TensorData::F32(_) => None,
            TensorData::Fixed { format, .. } => Some(*format),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(TensorError::WrongKind { expected: "float" }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32], TensorError> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(TensorError::WrongKind { expected: "float" }),
        }
    }

    pub fn as_raw(&self) -> Result<&[i32], TensorError> {
        match &self.data {
            TensorData::Fixed { raw, .. } => Ok(raw),
            _ => Err(TensorError::WrongKind {
                expected: "fixed-point",
            }),
        }
    }

    pub fn as_raw_mut(&mut self) -> Result<&mut [i32], TensorError> {
        match &mut self.data {
            TensorData::Fixed { raw, .. } => Ok(raw),
            _ => Err(TensorError::WrongKind {
                expected: "fixed-point",
            }),
        }
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self, TensorError> {
        check_len(&shape, self.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn index(&self, coords: &[usize]) -> Result<Element, TensorError> {
        let at = self.shape.offset(coords)?;
        Ok(match &self.data {
            TensorData::F32(v) => Element::F32(v[at]),
            TensorData::Fixed { raw, .. } => Element::Fixed(raw[at]),
        })
    }

    /// Real value at a flat offset.
    pub fn real_at(&self, at: usize) -> f32 {
        match &self.data {
            TensorData::F32(v) => v[at],
            TensorData::Fixed { raw, format } => {
                (raw[at] as f64 / format.one() * self.scale as f64) as f32
            }
        }
    }

    /// Real-valued copy of the data.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.real_at(i)).collect()
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::F32(self.to_f32_vec()),
            scale: 1.0,
        }
    }

    /// Index of the largest element (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.len() {
            let better = match &self.data {
                TensorData::F32(v) => v[i] > v[best],
                TensorData::Fixed { raw, .. } => raw[i] > raw[best],
            };
            if better {
                best = i;
            }
        }
        best
    }
}

fn check_len(shape: &Shape, actual: usize) -> Result<(), TensorError> {
    if shape.len() != actual {
        return Err(TensorError::LengthMismatch {
            shape: shape.clone(),
            expected: shape.len(),
            actual,
        });
    }
    Ok(())
}

/// Symmetric per-tensor scale mapping `max_abs` onto the largest raw value.
pub fn symmetric_scale(max_abs: f32, fmt: QFormat) -> f32 {
    if max_abs > 0.0 && max_abs.is_finite() {
        (max_abs as f64 / fmt.max_value()) as f32
    } else {
        1.0
    }
}

/// Quantize `values` under an explicit scale.
pub fn quantize_with_scale(values: &[f32], scale: f32, fmt: QFormat) -> Vec<i32> {
    let k = fmt.one() / scale as f64;
    values.iter().map(|&v| quantize_raw(v as f64 * k, fmt)).collect()
}

/// Symmetric per-tensor quantization of a float tensor.
///
/// An all-zero tensor gets scale 1.0 and all-zero raws.
pub fn quantize_tensor(t: &Tensor, fmt: QFormat) -> Result<Tensor, TensorError> {
    let values = t.as_f32()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite);
    }
    let max_abs = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    let scale = symmetric_scale(max_abs, fmt);
    let raw = quantize_with_scale(values, scale, fmt);
    Tensor::from_raw(t.shape.clone(), raw, fmt, scale)
}
