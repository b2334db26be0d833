//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is plain data: a shape, a flat buffer, and an optional
//! gradient buffer used by parameter tensors. Differentiable computation goes
//! through [`crate::autodiff::Tape`], which records operations on copies of
//! the values and hands gradients back by name.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Norms of a 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Norms {
    pub frobenius: f64,
    /// Largest Euclidean norm over rows.
    pub inf2: f64,
    /// Squared Euclidean norm of every row.
    pub row_sq: Tensor,
    /// Squared Euclidean norm of every column.
    pub col_sq: Tensor,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid_shape("tensor", &shape, "extents must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                &shape,
                format!("expected {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Entries drawn i.i.d. from `Normal(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Entries drawn i.i.d. from `Uniform[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data)
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

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert_eq!(self.ndim(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(Error::invalid_shape(op, &self.shape, "expected a 2-D matrix"));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_2d("transpose")?;
        Ok(Self::from_parts(vec![c, r], transpose_buf(&self.data, r, c)))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        if self.ndim() != 2 || rhs.ndim() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn norms(&self) -> Result<Norms> {
        let (r, c) = self.require_2d("norms")?;
        let row_sq: Vec<f64> = (0..r).map(|i| self.row(i).iter().map(|v| v * v).sum()).collect();
        let mut col_sq = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in col_sq.iter_mut().zip(self.row(i)) {
                *acc += v * v;
            }
        }
        let frobenius = row_sq.iter().sum::<f64>().sqrt();
        let inf2 = row_sq.iter().fold(0.0_f64, |m, &v| m.max(v)).sqrt();
        Ok(Norms {
            frobenius,
            inf2,
            row_sq: Self::from_parts(vec![r], row_sq),
            col_sq: Self::from_parts(vec![c], col_sq),
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    // -- gradient buffer -------------------------------------------------

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        if g.shape != self.shape {
            return Err(Error::shape("accumulate_grad", &self.shape, &g.shape));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (acc, v) in buf.iter_mut().zip(&g.data) {
            *acc += v;
        }
        Ok(())
    }

    /// Value-only copy (drops the gradient buffer and flag).
    pub fn detached(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

pub(crate) fn transpose_buf(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, 7.0], &[0.0, 1.0, -1.0]]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn gemm_variants_agree() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0, 0.0], &[2.0, -1.0], &[0.5, 3.0]]).unwrap();
        let direct = a.matmul(&b).unwrap();
        let bt = b.transpose().unwrap();
        let mut via_bt = vec![0.0; 4];
        gemm_bt(a.data(), bt.data(), &mut via_bt, 2, 3, 2);
        let at = a.transpose().unwrap();
        let mut via_at = vec![0.0; 4];
        gemm_at(at.data(), b.data(), &mut via_at, 2, 3, 2);
        assert_eq!(direct.data(), &via_bt[..]);
        assert_eq!(direct.data(), &via_at[..]);
    }

    #[test]
    fn norms_examples() {
        let m = Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 1.0]]).unwrap();
        let n = m.norms().unwrap();
        assert_eq!(n.inf2, 5.0);
        assert_eq!(n.row_sq.data(), &[25.0, 1.0]);
        assert_eq!(n.col_sq.data(), &[9.0, 17.0]);
        assert!((n.frobenius - 26f64.sqrt()).abs() < 1e-15);

        let z = Tensor::zeros(&[3, 2]).norms().unwrap();
        assert_eq!((z.frobenius, z.inf2), (0.0, 0.0));
        assert!(z.row_sq.data().iter().chain(z.col_sq.data()).all(|&v| v == 0.0));

        assert!((Tensor::eye(5).norms().unwrap().frobenius - 5f64.sqrt()).abs() < 1e-15);
        assert!(Tensor::zeros(&[2, 2, 2]).norms().is_err());
    }

    #[test]
    fn grad_buffer_accumulates_and_zeroes() {
        let mut t = Tensor::zeros(&[2]).with_requires_grad(true);
        let g = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&g).unwrap();
        t.accumulate_grad(&g).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        assert!(t.accumulate_grad(&Tensor::zeros(&[3])).is_err());
    }
}
