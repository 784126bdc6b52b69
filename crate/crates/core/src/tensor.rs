//! Dense row-major matrices and the handful of vector kernels the losses need.
//!
//! Every reduction runs sequentially in index order so results are bitwise
//! reproducible for a fixed input.

use sha2::{Digest, Sha256};

use crate::error::{PandError, Result};
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PandError::Shape {
                context: "matrix payload",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(PandError::Shape {
                    context: "matrix row",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            rows,
            cols,
            data: rng::gaussian_vec(rng, rows * cols, std),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        check_dim("matmul_t inner dimension", self.cols, other.cols)?;
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        check_dim("t_matmul inner dimension", self.rows, other.rows)?;
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == T::zero() {
                    continue;
                }
                for (oj, &bkj) in out.row_mut(i).iter_mut().zip(b) {
                    *oj += aki * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        check_dim("matvec", self.cols, v.len())?;
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[T]) -> Result<Vec<T>> {
        check_dim("t_matvec", self.rows, v.len())?;
        let mut out = vec![T::zero(); self.cols];
        for (r, &vi) in self.row_iter().zip(v) {
            axpy(&mut out, vi, r);
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        check_dim("elementwise add rows", self.rows, other.rows)?;
        check_dim("elementwise add cols", self.cols, other.cols)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: T, other: &Self) -> Result<()> {
        check_dim("scaled add rows", self.rows, other.rows)?;
        check_dim("scaled add cols", self.cols, other.cols)?;
        axpy(&mut self.data, s, &other.data);
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum over rows, giving a `1 × cols` matrix.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in self.row_iter() {
            axpy(&mut out.data, T::one(), r);
        }
        out
    }

    /// Feed the exact element bit patterns to a hasher.
    pub fn hash_into(&self, h: &mut Sha256) {
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        hash_slice(h, &self.data);
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn hash_slice<T: Scalar>(h: &mut Sha256, xs: &[T]) {
    for &x in xs {
        h.update(x.as_f64().to_bits().to_le_bytes());
    }
}

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(PandError::Shape {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += a * x`.
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Unit-normalize `v`; `None` when the norm is zero or not finite.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let n = l2_norm(v);
    if !(n > T::zero()) || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| x / n).collect())
}

/// Backward pass of `u = r / ‖r‖`: maps `∂L/∂u` to `∂L/∂r`.
pub fn l2_normalize_backward<T: Scalar>(unit: &[T], norm: T, grad_unit: &[T]) -> Vec<T> {
    let proj = dot(unit, grad_unit);
    unit.iter()
        .zip(grad_unit)
        .map(|(&u, &g)| (g - u * proj) / norm)
        .collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
    z.iter().map(|&x| x - lse).collect()
}

/// Softmax with max-subtraction.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate().skip(1) {
        if x > z[best] {
            best = i;
        }
    }
    best
}

/// Solve `A x = B` for symmetric positive definite `A` via Cholesky.
pub fn solve_spd<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    check_dim("cholesky square", n, a.cols())?;
    check_dim("cholesky rhs", n, b.rows())?;
    let mut l = Matrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > T::zero()) {
                    return Err(PandError::numeric(
                        "cholesky",
                        format!("matrix not positive definite at pivot {i}"),
                    ));
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}
