//! Dense row-major `f64` tensors.
//!
//! Image batches use NCHW layout throughout so that each channel plane is
//! contiguous, which keeps the im2col lowering a sequence of strided copies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Batch geometry of an NCHW image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::DegenerateShape(vec![n, c, h, w]));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn numel(self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::DegenerateShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Row-major strides: each stride is the product of the trailing dimensions.
/// Transposes an `r×c` row-major slice into a `c×r` buffer, in square blocks.
pub(crate) fn transpose_slice(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    const BLOCK: usize = 32;
    debug_assert_eq!(src.len(), r * c);
    let mut out = vec![0.0; r * c];
    for i0 in (0..r).step_by(BLOCK) {
        let i1 = (i0 + BLOCK).min(r);
        for j0 in (0..c).step_by(BLOCK) {
            let j1 = (j0 + BLOCK).min(c);
            for i in i0..i1 {
                let row = &src[i * c..(i + 1) * c];
                for j in j0..j1 {
                    out[j * r + i] = row[j];
                }
            }
        }
    }
    out
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(Error::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// Builds a tensor by evaluating `f` at every flat offset.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut offset = 0;
        for ((&i, &dim), stride) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= dim {
                return None;
            }
            offset += i * stride;
        }
        Some(offset)
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        self.offset(index).map(|o| self.data[o])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, new_shape: &[usize]) -> Result<Self> {
        let count = check_shape(new_shape)?;
        if count != self.data.len() {
            return Err(Error::ReshapeMismatch {
                from: self.shape,
                to: new_shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    pub fn reshaped(&self, new_shape: &[usize]) -> Result<Self> {
        self.clone().reshape(new_shape)
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn shape4(&self) -> Result<Shape4> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Shape4::new(n, c, h, w),
            _ => Err(Error::Geometry(format!(
                "expected an NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.dims2()?;
        Tensor::new(vec![c, r], transpose_slice(&self.data, r, c))
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [r, c] => Ok([r, c]),
            _ => Err(Error::DimensionMismatch(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
