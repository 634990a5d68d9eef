//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.

mod gradcheck;
mod graph;
pub mod kernels;
pub mod scan;

pub use gradcheck::check_gradient;
pub use graph::{Graph, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("positive shape")
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar shape")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z * std)
            })
            .collect();
        Self::from_vec(shape, data).expect("positive shape")
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of last-axis slices.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    /// Row-major linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(Error::shape("offset", &self.shape, index));
        }
        Ok(index.iter().zip(self.strides()).map(|(i, s)| i * s).sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<F> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k, n) = matmul_dims(self.shape(), rhs.shape())?;
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::from_vec(&[m, n], out)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Tensor<F>> {
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("NaN input to softmax"));
        }
        let mut out = vec![F::zero(); self.numel()];
        kernels::softmax_rows(&self.data, &mut out, self.cols());
        Tensor::from_vec(&self.shape, out)
    }

    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let d = self.cols();
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::shape("layer_norm", &self.shape, gain.shape()));
        }
        let mut out = vec![F::zero(); self.numel()];
        let mut xhat = vec![F::zero(); self.numel()];
        let mut inv = vec![F::zero(); self.rows()];
        kernels::layer_norm_rows(
            &self.data, &gain.data, &bias.data, eps, &mut out, &mut xhat, &mut inv,
        );
        Tensor::from_vec(&self.shape, out)
    }

    pub fn bitwise_eq(&self, other: &Tensor<F>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((a[0], a[1], b[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_column() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let ones = t(&[2, 1], &[1., 1.]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn matmul_zero_and_mismatch() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let b = t(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>());
        let c = z.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| v == 0.0));
        let err = b.matmul(&z).unwrap_err();
        assert!(err.to_string().contains("[3, 4]") && err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0., 0.]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[2f64.ln(), 0.]).softmax().unwrap();
        assert!((s.data()[0] - 2. / 3.).abs() < 1e-15);
        assert!((s.data()[1] - 1. / 3.).abs() < 1e-15);
        let s = t(&[2], &[1000., 0.]).softmax().unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.).abs() < 1e-15 && s.data()[1] < 1e-300);
        assert!(matches!(
            t(&[2], &[f64::NAN, 0.]).softmax(),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[3], &[1., 1., 1.]);
        let zero = t(&[3], &[0., 0., 0.]);
        let out = t(&[3], &[5., 5., 5.])
            .layer_norm(&one, &zero, 1e-5)
            .unwrap();
        assert_eq!(out.data(), &[0., 0., 0.]);

        let g = t(&[2], &[1., 1.]);
        let b = t(&[2], &[0., 0.]);
        let out = t(&[2], &[1., -1.]).layer_norm(&g, &b, 1e-300).unwrap();
        assert!((out.data()[0] - 1.).abs() < 1e-12 && (out.data()[1] + 1.).abs() < 1e-12);

        let x = t(&[4], &[0.3, -1.7, 2.2, 0.9]);
        let g = t(&[4], &[1.; 4]);
        let b = t(&[4], &[0.; 4]);
        let out = x.layer_norm(&g, &b, 1e-5).unwrap();
        // direct recomputation
        let mean: f64 = out.data().iter().sum::<f64>() / 4.;
        let var: f64 = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.).abs() < 1e-4);
    }

    #[test]
    fn offsets_are_row_major() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(x.strides(), vec![12, 4, 1]);
        assert_eq!(x.offset(&[1, 2, 3]).unwrap(), 23);
        assert!(x.offset(&[2, 0, 0]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(&[0, 2], vec![]).is_err());
    }
}
