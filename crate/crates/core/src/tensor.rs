//! Dense row-major matrices and the handful of GEMM shapes the model needs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::float::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::ZERO; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Truncated normal (two standard deviations) with the given std.
    pub fn truncated_normal<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break F::of(z * std);
                }
            })
            .collect();
        Matrix { rows, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix<F>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| G::of(x.to_f64())).collect(),
        }
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn(F::ONE, self, other, F::ZERO, &mut out);
        out
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm_nt(F::ONE, self, other, F::ZERO, &mut out);
        out
    }
}

/// `c <- alpha * a * b + beta * c`
pub fn gemm_nn<F: Scalar>(alpha: F, a: &Matrix<F>, b: &Matrix<F>, beta: F, c: &mut Matrix<F>) {
    assert_eq!(a.cols, b.rows, "gemm_nn inner dimension");
    assert_eq!((a.rows, b.cols), c.shape(), "gemm_nn output shape");
    raw_gemm(
        a.rows,
        a.cols,
        b.cols,
        alpha,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        beta,
        &mut c.data,
    );
}

/// `c <- alpha * a * b^T + beta * c`
pub fn gemm_nt<F: Scalar>(alpha: F, a: &Matrix<F>, b: &Matrix<F>, beta: F, c: &mut Matrix<F>) {
    assert_eq!(a.cols, b.cols, "gemm_nt inner dimension");
    assert_eq!((a.rows, b.rows), c.shape(), "gemm_nt output shape");
    raw_gemm(
        a.rows,
        a.cols,
        b.rows,
        alpha,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        beta,
        &mut c.data,
    );
}

/// `c <- alpha * a^T * b + beta * c`
pub fn gemm_tn<F: Scalar>(alpha: F, a: &Matrix<F>, b: &Matrix<F>, beta: F, c: &mut Matrix<F>) {
    assert_eq!(a.rows, b.rows, "gemm_tn inner dimension");
    assert_eq!((a.cols, b.cols), c.shape(), "gemm_tn output shape");
    raw_gemm(
        a.cols,
        a.rows,
        b.cols,
        alpha,
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        beta,
        &mut c.data,
    );
}

#[allow(clippy::too_many_arguments)]
fn raw_gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    rsa: isize,
    csa: isize,
    b: &[F],
    rsb: isize,
    csb: isize,
    beta: F,
    c: &mut [F],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the public wrappers assert that every dimension matches the
    // backing buffers, and the strides describe a dense row-major layout.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y += x * w` for a single row vector `x`.
pub fn row_times_matrix_acc<F: Scalar>(x: &[F], w: &Matrix<F>, y: &mut [F]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(y.len(), w.cols());
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::ZERO {
            continue;
        }
        for (yj, &wij) in y.iter_mut().zip(w.row(i)) {
            *yj += xi * wij;
        }
    }
}

/// `out[i] = sum_j w[i][j] * y[j]`, i.e. `y * w^T` for a row vector `y`.
pub fn row_times_matrix_t<F: Scalar>(y: &[F], w: &Matrix<F>, out: &mut [F]) {
    debug_assert_eq!(y.len(), w.cols());
    debug_assert_eq!(out.len(), w.rows());
    for (i, o) in out.iter_mut().enumerate() {
        *o = w.row(i).iter().zip(y).map(|(&a, &b)| a * b).sum();
    }
}

/// `w += x^T y` (rank-one update).
pub fn outer_acc<F: Scalar>(x: &[F], y: &[F], w: &mut Matrix<F>) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(y.len(), w.cols());
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::ZERO {
            continue;
        }
        for (wij, &yj) in w.row_mut(i).iter_mut().zip(y) {
            *wij += xi * yj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn transpose(a: &Matrix<f64>) -> Matrix<f64> {
        let mut t = Matrix::zeros(a.cols(), a.rows());
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                t.set(j, i, a.get(i, j));
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive() {
        let a = Matrix::from_vec(3, 4, (0..12).map(|x| x as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Matrix::from_vec(4, 2, (0..8).map(|x| (x as f64).sin()).collect()).unwrap();
        let expected = naive(&a, &b);
        let mut c = Matrix::zeros(3, 2);
        gemm_tn(1.0, &transpose(&a), &b, 0.0, &mut c);
        for got in [a.matmul(&b), a.matmul_t(&transpose(&b)), c] {
            for (x, y) in got.as_slice().iter().zip(expected.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = Matrix::from_vec(1, 1, vec![2.0f64]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0f64]).unwrap();
        let mut c = Matrix::from_vec(1, 1, vec![1.0f64]).unwrap();
        gemm_nn(1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c.get(0, 0), 7.0);
    }

    #[test]
    fn row_helpers_match_matmul() {
        let w = Matrix::from_vec(3, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = [1.0, -1.0, 2.0];
        let mut y = [0.0; 2];
        row_times_matrix_acc(&x, &w, &mut y);
        assert_eq!(y, [8.0, 10.0]);
        let mut back = [0.0; 3];
        row_times_matrix_t(&y, &w, &mut back);
        assert_eq!(back, [28.0, 64.0, 100.0]);
        let mut g = Matrix::zeros(3, 2);
        outer_acc(&x, &y, &mut g);
        assert_eq!(g.row(2), &[16.0, 20.0]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
