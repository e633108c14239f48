//! Dense row-major `f64` arrays of rank 1 to 4.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(!shape.is_empty() && shape.len() <= 4, "tensor rank must be 1..=4, got {}", shape.len());
        ensure!(shape.iter().all(|&d| d > 0), "tensor extents must be positive: {:?}", shape);
        let numel: usize = shape.iter().product();
        ensure!(numel == data.len(), "shape {:?} needs {} values, got {}", shape, numel, data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite tensor entry".into()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a tensor without validation. Callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(numel == self.data.len(), "cannot reshape {:?} to {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(start < end && end <= self.shape[0], "row range {}..{} out of bounds", start, end);
        let row = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(shape, self.data[start * row..end * row].to_vec()))
    }

    /// Gathers the listed rows along the leading axis, in order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        ensure!(!rows.is_empty(), "gather_rows needs at least one row");
        let row = self.numel() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            ensure!(r < self.shape[0], "row {} out of bounds ({})", r, self.shape[0]);
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self::from_parts(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Contract(_))));
        assert!(matches!(Tensor::new(&[0], vec![]), Err(Error::Contract(_))));
        assert!(matches!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(Tensor::new(&[1], vec![f64::NAN]), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn gather_rows_keeps_trailing_shape() {
        let t = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
    }
}
