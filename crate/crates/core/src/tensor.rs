//! Dense row-major tensors, 64-bit throughout.
//!
//! This is deliberately small: shapes are validated at the API boundary, the
//! hot paths work on flat `&[f64]` slices, and anything that can produce a
//! non-finite value has a checked variant.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of rows when viewed as a matrix `(rows, row_len)`; a 1-D tensor
    /// is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Last extent: the feature/channel width.
    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Reinterpret as `(rows, row_len)` without copying.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn require_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn require_finite(&self, what: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Numeric(format!("{what}: non-finite value")));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sq_norm(&self) -> f64 {
        self.dot(self)
    }

    /// Sum of squared differences, weighing every element equally.
    pub fn sq_dist(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }

    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Concatenate along the last axis; both must have the same row count.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::Shape(format!(
                "row count mismatch: {} vs {}",
                self.rows(),
                other.rows()
            )));
        }
        let (wa, wb) = (self.row_len(), other.row_len());
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for i in 0..rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        let mut shape = if self.shape.len() <= 1 { vec![] } else { self.shape[..self.shape.len() - 1].to_vec() };
        shape.push(wa + wb);
        Tensor::new(shape, data)
    }
}

/// Euclidean distance between two equal-length slices.
pub fn slice_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn slice_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn slice_norm(a: &[f64]) -> f64 {
    slice_dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rows_and_concat() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let c = a.concat_rows(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.require_finite("t").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.require_finite("t").is_err());
    }
}
