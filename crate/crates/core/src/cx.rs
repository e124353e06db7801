//! Complex scalars and dense complex matrices.
//!
//! Self-contained double-precision complex algebra for the physics, protocol,
//! and estimator paths. Values are `(re, im)` pairs; matrices are row-major.
//! Includes LU inversion, a real-embedding symmetric Jacobi eigensolver (for
//! rank/condition checks), and modified Gram-Schmidt QR (used by the channel
//! correlation diagnostics).

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C64 {
    pub re: f64,
    pub im: f64,
}

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const J: C64 = C64 { re: 0.0, im: 1.0 };

impl C64 {
    #[inline]
    pub fn new(re: f64, im: f64) -> Self {
        C64 { re, im }
    }

    #[inline]
    pub fn real(re: f64) -> Self {
        C64 { re, im: 0.0 }
    }

    /// exp(j·theta)
    #[inline]
    pub fn cis(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        C64 { re: c, im: s }
    }

    #[inline]
    pub fn conj(self) -> Self {
        C64 { re: self.re, im: -self.im }
    }

    #[inline]
    pub fn abs2(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    #[inline]
    pub fn abs(self) -> f64 {
        self.abs2().sqrt()
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        C64 { re: self.re * s, im: self.im * s }
    }

    #[inline]
    pub fn div(self, rhs: C64) -> Self {
        let d = rhs.abs2();
        C64 {
            re: (self.re * rhs.re + self.im * rhs.im) / d,
            im: (self.im * rhs.re - self.re * rhs.im) / d,
        }
    }
}

impl Add for C64 {
    type Output = C64;
    #[inline]
    fn add(self, rhs: C64) -> C64 {
        C64 { re: self.re + rhs.re, im: self.im + rhs.im }
    }
}

impl AddAssign for C64 {
    #[inline]
    fn add_assign(&mut self, rhs: C64) {
        self.re += rhs.re;
        self.im += rhs.im;
    }
}

impl Sub for C64 {
    type Output = C64;
    #[inline]
    fn sub(self, rhs: C64) -> C64 {
        C64 { re: self.re - rhs.re, im: self.im - rhs.im }
    }
}

impl Mul for C64 {
    type Output = C64;
    #[inline]
    fn mul(self, rhs: C64) -> C64 {
        C64 {
            re: self.re * rhs.re - self.im * rhs.im,
            im: self.re * rhs.im + self.im * rhs.re,
        }
    }
}

impl Neg for C64 {
    type Output = C64;
    #[inline]
    fn neg(self) -> C64 {
        C64 { re: -self.re, im: -self.im }
    }
}

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    /// Pivot below tolerance during LU factorization.
    Singular,
    /// Operand dimensions incompatible with the operation.
    Shape(String),
}

impl std::fmt::Display for LinalgError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LinalgError::Singular => write!(f, "matrix is singular within pivot tolerance"),
            LinalgError::Shape(s) => write!(f, "shape mismatch: {s}"),
        }
    }
}

impl std::error::Error for LinalgError {}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CMat { rows, cols, data }
    }

    /// Matrix from separate real/imag row-major buffers.
    pub fn from_re_im(rows: usize, cols: usize, re: &[f64], im: &[f64]) -> Self {
        assert_eq!(re.len(), rows * cols);
        assert_eq!(im.len(), rows * cols);
        let data = re.iter().zip(im).map(|(&r, &i)| C64::new(r, i)).collect();
        CMat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, rhs: &CMat) -> CMat {
        assert_eq!(self.cols, rhs.rows, "matmul inner dims {}x{} . {}x{}", self.rows, self.cols, rhs.rows, rhs.cols);
        let mut out = CMat::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * n..(k + 1) * n];
                let crow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self.at(j, i).conj())
    }

    pub fn transpose(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    pub fn conj(&self) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn add(&self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: C64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn scale_re(&self, s: f64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a.scale(s)).collect(),
        }
    }

    pub fn frob_norm2(&self) -> f64 {
        self.data.iter().map(|z| z.abs2()).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm2().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.abs()).fold(0.0, f64::max)
    }

    /// Copies a rectangular block `(r0..r0+h, c0..c0+w)`.
    pub fn block(&self, r0: usize, c0: usize, h: usize, w: usize) -> CMat {
        assert!(r0 + h <= self.rows && c0 + w <= self.cols);
        CMat::from_fn(h, w, |i, j| self.at(r0 + i, c0 + j))
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &CMat) {
        assert!(r0 + b.rows <= self.rows && c0 + b.cols <= self.cols);
        for i in 0..b.rows {
            for j in 0..b.cols {
                self[(r0 + i, c0 + j)] = b.at(i, j);
            }
        }
    }

    pub fn col(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    /// Column-major vectorization as an (rows*cols)x1 matrix.
    pub fn vec_col_major(&self) -> CMat {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.at(i, j));
            }
        }
        CMat { rows: self.rows * self.cols, cols: 1, data }
    }

    /// Inverse of column-major vectorization: an n·m vector into an n x m matrix.
    pub fn unvec_col_major(v: &[C64], rows: usize, cols: usize) -> CMat {
        assert_eq!(v.len(), rows * cols);
        CMat::from_fn(rows, cols, |i, j| v[j * rows + i])
    }

    /// Inverse via LU with partial pivoting. Pivot tolerance is relative to
    /// the largest initial magnitude.
    pub fn inverse(&self) -> Result<CMat, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::Shape(format!("inverse of {}x{}", self.rows, self.cols)));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut inv = CMat::identity(n);
        let scale = self.max_abs().max(1.0);
        let tol = 1e-12 * scale;
        for col in 0..n {
            // partial pivot
            let mut piv = col;
            let mut best = a[col * n + col].abs();
            for r in (col + 1)..n {
                let m = a[r * n + col].abs();
                if m > best {
                    best = m;
                    piv = r;
                }
            }
            if best <= tol {
                return Err(LinalgError::Singular);
            }
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                    inv.data.swap(col * n + j, piv * n + j);
                }
            }
            let d = a[col * n + col];
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col].div(d);
                if f.re == 0.0 && f.im == 0.0 {
                    continue;
                }
                for j in col..n {
                    let v = a[col * n + j];
                    a[r * n + j] = a[r * n + j] - f * v;
                }
                for j in 0..n {
                    let v = inv.data[col * n + j];
                    inv.data[r * n + j] = inv.data[r * n + j] - f * v;
                }
            }
        }
        for r in 0..n {
            let d = a[r * n + r];
            for j in 0..n {
                inv.data[r * n + j] = inv.data[r * n + j].div(d);
            }
        }
        Ok(inv)
    }

    /// Eigenvalues of a Hermitian matrix, ascending.
    ///
    /// Works on the real symmetric 2n x 2n embedding [[Re,-Im],[Im,Re]], whose
    /// spectrum is that of the Hermitian matrix with each value doubled.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let m = 2 * n;
        let mut a = vec![0.0f64; m * m];
        for i in 0..n {
            for j in 0..n {
                let z = self.at(i, j);
                a[i * m + j] = z.re;
                a[i * m + (n + j)] = -z.im;
                a[(n + i) * m + j] = z.im;
                a[(n + i) * m + (n + j)] = z.re;
            }
        }
        let mut vals = symmetric_jacobi_eigenvalues(&mut a, m);
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // keep every other value: each eigenvalue appears twice
        vals.into_iter().step_by(2).collect()
    }

    /// Singular values, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let g = if self.rows <= self.cols {
            self.matmul(&self.hermitian())
        } else {
            self.hermitian().matmul(self)
        };
        let mut vals: Vec<f64> = g
            .hermitian_eigenvalues()
            .into_iter()
            .map(|l| l.max(0.0).sqrt())
            .collect();
        vals.reverse();
        vals
    }

    /// Orthonormal basis of the column space via modified Gram-Schmidt.
    /// Columns with norm below `tol` after projection are dropped.
    pub fn orthonormal_columns(&self, tol: f64) -> CMat {
        let mut cols: Vec<Vec<C64>> = Vec::new();
        for j in 0..self.cols {
            let mut v = self.col(j);
            for q in &cols {
                // v -= <q, v> q
                let mut dot = ZERO;
                for (qi, vi) in q.iter().zip(&v) {
                    dot += qi.conj() * *vi;
                }
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi = *vi - dot * *qi;
                }
            }
            let norm = v.iter().map(|z| z.abs2()).sum::<f64>().sqrt();
            if norm > tol {
                for z in &mut v {
                    *z = z.scale(1.0 / norm);
                }
                cols.push(v);
            }
        }
        let rank = cols.len();
        CMat::from_fn(self.rows, rank, |i, j| cols[j][i])
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Cyclic Jacobi sweeps on a real symmetric matrix stored row-major in `a`.
/// Returns the diagonal after convergence.
fn symmetric_jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(a)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rows/cols p and q rotate
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
