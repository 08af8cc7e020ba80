//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! All differentiable computation in this crate is expressed through [`Tape`]
//! operations. Training math runs in 64-bit so central-difference gradient
//! checks are meaningful; 32-bit floats appear only in file formats. Non-finite
//! values are a hard error at every forward and backward step.

mod check;
mod optim;
mod store;
mod tape;

pub use check::{grad_check, numeric_gradient};
pub use optim::{adamw_step, lr_at, OptState, Schedule};
pub use store::{Binding, ParamId, ParamStore};
pub use tape::{Tape, Var, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![x], requires_grad: false, grad: None }
    }

    /// A 1 x n row matrix.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![1, n], data, requires_grad: false, grad: None }
    }

    /// A rank-1 vector of length n.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    /// Truncated normal init: N(0, std^2) resampled outside two standard deviations.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for a true scalar).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as [rows, last_dim].
    pub fn leading(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.last_dim()
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        check_finite_slice(&self.data, context)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!("expected scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }
}

pub(crate) fn check_finite_slice(data: &[f64], context: &str) -> Result<()> {
    for &x in data {
        if !x.is_finite() {
            return Err(Error::Numerical(format!("non-finite value in {context}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::from_vec(&[2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn trunc_normal_bounded_and_seeded() {
        let mut rng = stream_rng(3, "init");
        let t = Tensor::trunc_normal(&[64, 64], 0.02, &mut rng);
        assert!(t.data.iter().all(|x| x.abs() <= 0.04));
        let mut rng2 = stream_rng(3, "init");
        let t2 = Tensor::trunc_normal(&[64, 64], 0.02, &mut rng2);
        assert_eq!(t.data, t2.data);
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut t = Tensor::zeros(&[2, 2]);
        t.data[3] = f64::NAN;
        assert!(matches!(t.check_finite("test"), Err(Error::Numerical(_))));
    }
}
