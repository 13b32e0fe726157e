use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar type of the models: `f32` for training and inference, `f64` for
/// gradient verification.
pub trait Real: Float + FromPrimitive + Sum + Send + Sync + Debug + Display + Default + 'static {
    const NAME: &'static str;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap()
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor2<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T> Debug for Tensor2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor2({}x{})", self.rows, self.cols)
    }
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    pub fn scalar(&self) -> T {
        self.data[0]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Tensor2<U> {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · w`.
    pub fn matmul(&self, w: &Self) -> Self {
        let mut out = Self::zeros(self.rows, w.cols);
        matmul_into(self, w, &mut out);
        out
    }

    /// `self · wᵀ`.
    pub fn matmul_nt(&self, w: &Self) -> Self {
        debug_assert_eq!(self.cols, w.cols);
        let mut out = Self::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(a, w.row(j));
            }
        }
        out
    }

    /// `acc += selfᵀ · g`.
    pub fn add_tn_into(&self, g: &Self, acc: &mut Self) {
        debug_assert_eq!(self.rows, g.rows);
        debug_assert_eq!(acc.shape(), (self.cols, g.cols));
        for r in 0..self.rows {
            let x = self.row(r);
            let gr = g.row(r);
            for (k, &xk) in x.iter().enumerate() {
                if xk == T::zero() {
                    continue;
                }
                axpy(xk, gr, acc.row_mut(k));
            }
        }
    }

    /// Column sums accumulated into a `1 x cols` tensor.
    pub fn add_colsum_into(&self, acc: &mut Self) {
        debug_assert_eq!(acc.len(), self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for (a, &v) in acc.data.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
    }
}

/// `out = x · w` (out must be zeroed or hold an accumulator).
pub fn matmul_into<T: Real>(x: &Tensor2<T>, w: &Tensor2<T>, out: &mut Tensor2<T>) {
    debug_assert_eq!(x.cols, w.rows);
    debug_assert_eq!(out.shape(), (x.rows, w.cols));
    for i in 0..x.rows {
        let xr = x.row(i);
        let o = &mut out.data[i * w.cols..(i + 1) * w.cols];
        for (k, &xk) in xr.iter().enumerate() {
            if xk == T::zero() {
                continue;
            }
            axpy(xk, w.row(k), o);
        }
    }
}

/// `y += a · x`.
#[inline]
pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// `x · w` for a single row vector.
pub fn vecmat<T: Real>(x: &[T], w: &Tensor2<T>) -> Vec<T> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = vec![T::zero(); w.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk != T::zero() {
            axpy(xk, w.row(k), &mut out);
        }
    }
    out
}

/// `w · g` for a row gradient `g` (i.e. `g · wᵀ`).
pub fn mat_vec_t<T: Real>(w: &Tensor2<T>, g: &[T]) -> Vec<T> {
    debug_assert_eq!(g.len(), w.cols);
    (0..w.rows).map(|k| dot(w.row(k), g)).collect()
}

/// `acc += xᵀ g` for row vectors.
pub fn outer_add<T: Real>(x: &[T], g: &[T], acc: &mut Tensor2<T>) {
    debug_assert_eq!(acc.shape(), (x.len(), g.len()));
    for (k, &xk) in x.iter().enumerate() {
        if xk != T::zero() {
            axpy(xk, g, acc.row_mut(k));
        }
    }
}
