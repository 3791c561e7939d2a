//! Row-major dense matrices and a safe wrapper around `matrixmultiply::dgemm`.

use serde::{Deserialize, Serialize};

/// Floating-point element types with a GEMM kernel.
pub trait Scalar: Copy + Default + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn add(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    /// `C = alpha * A * B + beta * C`; see [`gemm`].
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self], sc: (usize, usize));
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! scalar_impl {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn add(self, o: Self) -> Self {
                self + o
            }
            fn mul(self, o: Self) -> Self {
                self * o
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                beta: Self,
                c: &mut [Self],
                sc: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= span(m, k, sa), "gemm: A too short");
                assert!(b.len() >= span(k, n, sb), "gemm: B too short");
                assert!(c.len() >= span(m, n, sc), "gemm: C too short");
                // SAFETY: the asserts above bound every element the kernel
                // touches; C does not alias A or B because it is borrowed
                // mutably.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
                    );
                }
            }
        }
    };
}

scalar_impl!(f64, matrixmultiply::dgemm);
scalar_impl!(f32, matrixmultiply::sgemm);

/// `C = alpha * A(m x k) * B(k x n) + beta * C` with explicit
/// `(row, column)` strides, so transposes are free.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(m: usize, k: usize, n: usize, alpha: S, a: &[S], sa: (usize, usize), b: &[S], sb: (usize, usize), beta: S, c: &mut [S], sc: (usize, usize)) {
    S::gemm(m, k, n, alpha, a, sa, b, sb, beta, c, sc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: wrong length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul: inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            (self.cols, 1),
            &other.data,
            (other.cols, 1),
            0.0,
            &mut out.data,
            (other.cols, 1),
        );
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t: inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            1.0,
            &self.data,
            (self.cols, 1),
            &other.data,
            (1, other.cols),
            0.0,
            &mut out.data,
            (other.rows, 1),
        );
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add: shapes differ");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, k: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * k).collect() }
    }

    pub fn vstack(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "vstack: column counts differ");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Mat { rows: self.rows + other.rows, cols: self.cols, data }
    }

    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Numerical rank by Gaussian elimination with partial pivoting.
    pub fn rank(&self, tol: f64) -> usize {
        let mut a = self.clone();
        let (m, n) = (a.rows, a.cols);
        let mut rank = 0;
        for col in 0..n {
            if rank == m {
                break;
            }
            let pivot = (rank..m)
                .max_by(|&i, &j| a.at(i, col).abs().total_cmp(&a.at(j, col).abs()))
                .unwrap();
            if a.at(pivot, col).abs() <= tol {
                continue;
            }
            for j in 0..n {
                a.data.swap(rank * n + j, pivot * n + j);
            }
            for i in rank + 1..m {
                let f = a.at(i, col) / a.at(rank, col);
                for j in col..n {
                    a.data[i * n + j] -= f * a.data[rank * n + j];
                }
            }
            rank += 1;
        }
        rank
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_loops() {
        let a = Mat::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.1 - 0.7);
        let b = Mat::from_fn(5, 4, |i, j| ((i + 2 * j) % 7) as f64 - 3.0);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..4 {
                let s: f64 = (0..5).map(|k| a.at(i, k) * b.at(k, j)).sum();
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
        let bt = Mat::from_fn(4, 5, |i, j| b.at(j, i));
        assert_eq!(a.matmul_t(&bt), c);
    }

    #[test]
    fn rank_of_outer_products() {
        let u = Mat::from_fn(6, 2, |i, j| (i as f64 + 1.0).powi(j as i32 + 1));
        let v = Mat::from_fn(2, 6, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        assert_eq!(u.matmul(&v).rank(1e-9), 2);
        assert_eq!(Mat::zeros(4, 4).rank(1e-9), 0);
        let eye = Mat::from_fn(4, 4, |i, j| f64::from(u8::from(i == j)));
        assert_eq!(eye.rank(1e-9), 4);
    }
}
