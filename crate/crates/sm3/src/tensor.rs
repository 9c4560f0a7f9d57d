//! Dense row-major tensors.
//!
//! All internal computation runs in f64; the on-disk blob formats store f32
//! (see [`crate::artifact`]).

use crate::error::{Error, Result};

/// Dense n-dimensional real array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix from a flat slice.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    /// Number of rows when interpreted as a matrix (1 for vectors/scalars).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Number of columns when interpreted as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Norm guard used wherever a vector norm appears in a denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Cosine similarity with a zero-norm guard.
///
/// Returns `(value, degenerate)` where `degenerate` flags that at least one
/// input had norm below [`NORM_EPS`] and the result was defined as 0.
pub fn cosine_similarity_checked(u: &[f64], v: &[f64]) -> (f64, bool) {
    assert_eq!(u.len(), v.len(), "cosine_similarity: length mismatch");
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < NORM_EPS || nv < NORM_EPS {
        (0.0, true)
    } else {
        (dot / (nu * nv), false)
    }
}

/// `uᵀv / (‖u‖‖v‖)`, 0 when either norm vanishes.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    cosine_similarity_checked(u, v).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identical_unit_vectors() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn cosine_orthogonal() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn cosine_45_degrees() {
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]);
        assert!((v - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn cosine_zero_norm_flagged() {
        let (v, flag) = cosine_similarity_checked(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(v, 0.0);
        assert!(flag);
    }

    #[test]
    fn cosine_symmetric_and_bounded() {
        let u = [0.3, -1.2, 4.0];
        let v = [2.0, 0.5, -0.1];
        assert_eq!(cosine_similarity(&u, &v), cosine_similarity(&v, &u));
        assert!(cosine_similarity(&u, &v).abs() <= 1.0 + 1e-9);
        assert!((cosine_similarity(&u, &u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }
}
