use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type of the engine. Implemented for `f32` (training) and `f64`
/// (gradient checking and tests).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().unwrap()
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: out too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents checked above; c does not alias a or b.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix. Rows are frames, columns are feature dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![R::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: size mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = R::one();
        }
        m
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    pub fn cast<S: Real>(&self) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| S::from_f64c(v.to_f64c())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!(self.cols, other.rows, "matmul: inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        R::gemm(
            self.rows, self.cols, other.cols, R::one(),
            &self.data, self.cols, 1,
            &other.data, other.cols, 1,
            R::zero(), &mut out.data, other.cols, 1,
        );
        out
    }

    /// Rows concatenated vertically.
    pub fn vstack(parts: &[&Mat<R>]) -> Mat<R> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack: column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Mat { rows, cols, data }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt()
    }
}

/// Per-row time neighbourhoods: each row belongs to a contiguous segment
/// (an utterance or a training chunk), and time offsets are clamped to the
/// segment edges (edge replication).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lo: Vec<u32>,
    hi: Vec<u32>,
}

impl Segments {
    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn from_lengths(lens: &[usize]) -> Self {
        let total: usize = lens.iter().sum();
        let mut lo = Vec::with_capacity(total);
        let mut hi = Vec::with_capacity(total);
        let mut start = 0u32;
        for &l in lens {
            let end = start + l as u32;
            for _ in 0..l {
                lo.push(start);
                hi.push(end - 1);
            }
            start = end;
        }
        Segments { lo, hi }
    }

    pub fn rows(&self) -> usize {
        self.lo.len()
    }

    /// Row index of `row + offset`, clamped to the row's segment.
    #[inline]
    pub fn shift(&self, row: usize, offset: i32) -> usize {
        let t = row as i64 + offset as i64;
        t.clamp(self.lo[row] as i64, self.hi[row] as i64) as usize
    }
}
