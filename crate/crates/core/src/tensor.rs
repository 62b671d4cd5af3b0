//! Dense row-major tensors.
//!
//! Shapes are explicit everywhere: the only broadcast this crate performs is
//! the row-wise bias add inside the tape. Matrix kernels accumulate in a
//! fixed order (ikj), so results are deterministic for a given input.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with contiguous row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Marks the tensor as a trainable leaf when inserted into a tape.
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n], requires_grad: false }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "ragged rows: expected width {}, got {}",
                    d,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, d], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[S] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let d = self.cols();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Maximum absolute difference, for tests and checks. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), |acc, v| if v > acc { v } else { acc })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Lossy element-wise cast between scalar types (f64 <-> f32).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::cast(v.as_f64())).collect(),
            requires_grad: false,
        }
    }
}

/// c[m x n] = a[m x p] . b[p x n]
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::ShapeMismatch("matmul expects rank-2 tensors".into()));
    }
    let (m, p) = (a.shape()[0], a.shape()[1]);
    let (p2, n) = (b.shape()[0], b.shape()[1]);
    if p != p2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims {} vs {}",
            p, p2
        )));
    }
    let mut c = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = ad[i * p + k];
            let brow = &bd[k * n..(k + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

/// c[m x n] = a[m x d] . b[n x d]^T — similarity-matrix layout.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "matmul_nt shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, _d) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            c[i * n + j] = dot(arow, b.row(j));
        }
    }
    Tensor::new(vec![m, n], c)
}

/// c[p x n] = a[m x p]^T . b[m x n]
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul_tn shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, p) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut c = vec![S::zero(); p * n];
    for i in 0..m {
        let brow = &b.data()[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a.data()[i * p + k];
            let crow = &mut c[k * n..(k + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    Tensor::new(vec![p, n], c)
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// L2-normalize a vector in place. Errors if the norm is (near) zero.
pub fn normalize<S: Scalar>(v: &mut [S], context: &str) -> Result<()> {
    let n = norm2(v);
    if n <= S::cast(1e-12) {
        return Err(Error::ZeroVector(context.to_string()));
    }
    let inv = S::one() / n;
    for x in v.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = matmul(&i2, &i2).unwrap();
        assert_eq!(c.data(), i2.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Rng::new(42);
        let a =
            Tensor::new(vec![5, 7], (0..35).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let b =
            Tensor::new(vec![7, 3], (0..21).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let c = matmul(&a, &b).unwrap();
        // Naive triple loop, (i, j, k) order.
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let mut rng = crate::rng::Rng::new(1);
        let a =
            Tensor::new(vec![4, 6], (0..24).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let b =
            Tensor::new(vec![5, 6], (0..30).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        // b transposed by hand
        let mut bt = Tensor::zeros(vec![6, 5]);
        for i in 0..5 {
            for j in 0..6 {
                bt.data_mut()[j * 5 + i] = b.data()[i * 6 + j];
            }
        }
        let via = matmul(&a, &bt).unwrap();
        assert!(nt.max_abs_diff(&via) < 1e-12);

        let c =
            Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let tn = matmul_tn(&a, &c).unwrap();
        let mut at = Tensor::zeros(vec![6, 4]);
        for i in 0..4 {
            for j in 0..6 {
                at.data_mut()[j * 4 + i] = a.data()[i * 6 + j];
            }
        }
        let via2 = matmul(&at, &c).unwrap();
        assert!(tn.max_abs_diff(&via2) < 1e-12);
    }

    #[test]
    fn works_at_f32_too() {
        let a = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0f32, 7.0]);
        let mut v = vec![3.0f32, 4.0];
        normalize(&mut v, "test").unwrap();
        assert!((norm2(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        let mut v = vec![0.0f64; 4];
        assert!(normalize(&mut v, "test").is_err());
    }
}
