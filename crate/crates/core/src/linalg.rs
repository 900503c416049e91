//! Dense linear algebra for small matrices: matrix exponential, controllability
//! Gramians, Lyapunov solves and Gaussian log-densities.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Matrix<T: Real = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> From<Matrix<T>> for Vec<Vec<f64>> {
    fn from(m: Matrix<T>) -> Self {
        m.to_rows().into_iter().map(|r| r.into_iter().map(Real::as_f64).collect()).collect()
    }
}

impl<T: Real> TryFrom<Vec<Vec<f64>>> for Matrix<T> {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows.into_iter().map(|r| r.into_iter().map(T::lit).collect()).collect();
        Matrix::from_rows(&rows)
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Builds a `rows x cols` matrix from a generator `f(i, j)`.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| crate::scalar::dot(self.row(i), x)).collect()
    }

    /// `self^T * y`.
    pub fn tr_matvec(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&a| a * a).sum::<T>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> T {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `(self + self^T) / 2`.
    pub fn symmetrized(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| half * (self[(i, j)] + self[(j, i)]))
    }

    /// Copies the block starting at `(r0, c0)` of the given size.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Self) {
        for i in 0..b.rows {
            for j in 0..b.cols {
                self[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
    }

    /// Solves `self * X = rhs` by LU with partial pivoting.
    pub fn solve(&self, rhs: &Self) -> Result<Self> {
        if !self.is_square() || rhs.rows != self.rows {
            return Err(Error::Dimension(format!(
                "solve needs square lhs matching rhs rows ({}x{} vs {}x{})",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut b = rhs.clone();
        let scale = self.max_abs().max(T::min_positive_value());
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, a[(i, k)].abs()))
                .fold((k, T::neg_infinity()), |acc, c| if c.1 > acc.1 { c } else { acc });
            if pv <= T::epsilon() * scale * T::lit(1e-3) {
                return Err(Error::Domain("singular matrix in linear solve".into()));
            }
            if p != k {
                for j in 0..n {
                    a.data.swap(k * n + j, p * n + j);
                }
                for j in 0..b.cols {
                    b.data.swap(k * b.cols + j, p * b.cols + j);
                }
            }
            let piv = a[(k, k)];
            for i in (k + 1)..n {
                let f = a[(i, k)] / piv;
                if f == T::zero() {
                    continue;
                }
                a[(i, k)] = T::zero();
                for j in (k + 1)..n {
                    let v = a[(k, j)];
                    a[(i, j)] -= f * v;
                }
                for j in 0..b.cols {
                    let v = b[(k, j)];
                    b[(i, j)] -= f * v;
                }
            }
        }
        for k in (0..n).rev() {
            for j in 0..b.cols {
                let mut s = b[(k, j)];
                for c in (k + 1)..n {
                    s -= a[(k, c)] * b[(c, j)];
                }
                b[(k, j)] = s / a[(k, k)];
            }
        }
        Ok(b)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.solve(&Self::identity(self.rows))
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect() }
    }
}

/// Symmetric positive-definite matrix together with its lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct SpdMatrix<T: Real = f64> {
    base: Matrix<T>,
    factor: Matrix<T>,
}

impl<T: Real> SpdMatrix<T> {
    /// Factorizes `m`. Fails when `m` is not square, not symmetric to 1e-12
    /// relative, or when a pivot falls below `1e-14 * trace`.
    pub fn new(m: Matrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!("SPD matrix must be square, got {}x{}", m.rows, m.cols)));
        }
        let n = m.rows;
        let scale = m.max_abs();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > T::lit(1e-12) * scale.max(T::min_positive_value()) {
                    return Err(Error::Domain(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        let tol = T::lit(1e-14) * m.trace().abs();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > tol) || d <= T::zero() {
                return Err(Error::Factorization { index: j, pivot: d.as_f64() });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { base: m, factor: l })
    }

    pub fn identity(n: usize) -> Self {
        Self { base: Matrix::identity(n), factor: Matrix::identity(n) }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.base.rows
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.base
    }

    pub fn factor(&self) -> &Matrix<T> {
        &self.factor
    }

    /// Solves `L z = b`.
    pub fn forward_sub(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let l = &self.factor;
        let mut z = vec![T::zero(); n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)];
        }
        z
    }

    /// Solves `L^T x = z`.
    pub fn backward_sub(&self, z: &[T]) -> Vec<T> {
        let n = self.dim();
        let l = &self.factor;
        let mut x = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    /// Solves `self * x = b`.
    pub fn solve_vec(&self, b: &[T]) -> Vec<T> {
        self.backward_sub(&self.forward_sub(b))
    }

    pub fn log_det(&self) -> T {
        (0..self.dim()).map(|i| self.factor[(i, i)].ln()).sum::<T>() * T::lit(2.0)
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve_vec(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrized()
    }

    /// `L * z`, mapping standard normal draws to this covariance.
    pub fn factor_mul(&self, z: &[T]) -> Vec<T> {
        self.factor.matvec(z)
    }
}

// Padé [13/13] coefficients.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// `exp(M t)` by scaling and squaring with a degree-13 Padé approximant.
pub fn mat_exp<T: Real>(m: &Matrix<T>, t: T) -> Result<Matrix<T>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("mat_exp needs a square matrix, got {}x{}", m.rows, m.cols)));
    }
    if !t.is_finite() {
        return Err(Error::Domain("mat_exp time must be finite".into()));
    }
    let n = m.rows;
    let a = m.scale(t);
    let norm = a.norm_one().as_f64();
    let s = if norm > THETA13 { (norm / THETA13).log2().ceil() as i32 } else { 0 };
    let a = a.scale(T::lit(0.5f64.powi(s)));
    let b: Vec<T> = PADE13.iter().map(|&c| T::lit(c)).collect();
    let id = Matrix::identity(n);
    let a2 = a.matmul(&a)?;
    let a4 = a2.matmul(&a2)?;
    let a6 = a4.matmul(&a2)?;
    let lin = |c: [(T, &Matrix<T>); 4]| -> Matrix<T> {
        let mut out = Matrix::zeros(n, n);
        for (coef, mat) in c {
            for (o, &v) in out.data.iter_mut().zip(&mat.data) {
                *o += coef * v;
            }
        }
        out
    };
    let zero = Matrix::zeros(n, n);
    let u_inner = a6.matmul(&lin([(b[13], &a6), (b[11], &a4), (b[9], &a2), (T::zero(), &zero)]))?;
    let u_inner = u_inner.add(&lin([(b[7], &a6), (b[5], &a4), (b[3], &a2), (b[1], &id)]))?;
    let u = a.matmul(&u_inner)?;
    let v = a6.matmul(&lin([(b[12], &a6), (b[10], &a4), (b[8], &a2), (T::zero(), &zero)]))?;
    let v = v.add(&lin([(b[6], &a6), (b[4], &a4), (b[2], &a2), (b[0], &id)]))?;
    let p = v.add(&u)?;
    let q = v.sub(&u)?;
    let mut r = q.solve(&p)?;
    for _ in 0..s {
        r = r.matmul(&r)?;
    }
    Ok(r)
}

/// Finite-horizon controllability Gramian `int_0^t e^{A s} B B^T e^{A^T s} ds`,
/// returned as a symmetric (possibly singular) matrix.
pub fn gramian_psd<T: Real>(a: &Matrix<T>, b: &Matrix<T>, t: T) -> Result<Matrix<T>> {
    if !(t > T::zero()) {
        return Err(Error::Domain(format!("Gramian horizon must be positive, got {t}")));
    }
    if !a.is_square() {
        return Err(Error::Dimension("Gramian needs square A".into()));
    }
    if b.rows != a.rows {
        return Err(Error::Dimension(format!("B has {} rows, A is {}x{}", b.rows, a.rows, a.cols)));
    }
    let n = a.rows;
    let bbt = b.matmul(&b.transpose())?;
    // Van Loan on a short base step h = t / 2^k, then doubling
    // Q(2h) = Q(h) + E(h) Q(h) E(h)^T; the block exponential alone loses
    // precision once e^{-At} and e^{A^T t} differ by many orders of magnitude.
    let norm = a.norm_one().as_f64() * t.as_f64();
    let k = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let h = t * T::lit(0.5f64.powi(k));
    let mut c = Matrix::zeros(2 * n, 2 * n);
    c.set_block(0, 0, &a.scale(-T::one()));
    c.set_block(0, n, &bbt);
    c.set_block(n, n, &a.transpose());
    let e = mat_exp(&c, h)?;
    let f12 = e.block(0, n, n, n);
    let f22 = e.block(n, n, n, n);
    let mut q = f22.transpose().matmul(&f12)?.symmetrized();
    let mut eh = f22.transpose();
    for _ in 0..k {
        q = q.add(&eh.matmul(&q)?.matmul(&eh.transpose())?)?.symmetrized();
        eh = eh.matmul(&eh)?;
    }
    Ok(q)
}

/// Finite-horizon controllability Gramian as a factorized SPD matrix.
pub fn gramian<T: Real>(a: &Matrix<T>, b: &Matrix<T>, t: T) -> Result<SpdMatrix<T>> {
    SpdMatrix::new(gramian_psd(a, b, t)?)
}

/// Eigenvalues `(re, im)` of a general real square matrix.
///
/// Reduction to Hessenberg form by stabilized elimination followed by the
/// Francis double-shift QR iteration. Intended for the small matrices used
/// here.
pub fn eigenvalues<T: Real>(m: &Matrix<T>) -> Result<Vec<(f64, f64)>> {
    if !m.is_square() {
        return Err(Error::Dimension("eigenvalues need a square matrix".into()));
    }
    let n = m.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based working copy.
    let mut a = vec![vec![0.0f64; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            a[i + 1][j + 1] = m[(i, j)].as_f64();
        }
    }
    elmhes(&mut a, n);
    for i in 1..=n {
        for j in 1..=n {
            if i > j + 1 {
                a[i][j] = 0.0;
            }
        }
    }
    hqr(&mut a, n)
}

fn elmhes(a: &mut [Vec<f64>], n: usize) {
    for m in 2..n {
        let mut x = 0.0f64;
        let mut i = m;
        for j in m..=n {
            if a[j][m - 1].abs() > x.abs() {
                x = a[j][m - 1];
                i = j;
            }
        }
        if i != m {
            for j in (m - 1)..=n {
                let tmp = a[i][j];
                a[i][j] = a[m][j];
                a[m][j] = tmp;
            }
            for row in a.iter_mut().take(n + 1).skip(1) {
                row.swap(i, m);
            }
        }
        if x != 0.0 {
            for i in (m + 1)..=n {
                let mut y = a[i][m - 1];
                if y != 0.0 {
                    y /= x;
                    a[i][m - 1] = y;
                    for j in m..=n {
                        a[i][j] -= y * a[m][j];
                    }
                    for j in 1..=n {
                        a[j][m] += y * a[j][i];
                    }
                }
            }
        }
    }
}

#[allow(unused_assignments)]
fn hqr(a: &mut [Vec<f64>], n: usize) -> Result<Vec<(f64, f64)>> {
    let mut wr = vec![0.0; n + 1];
    let mut wi = vec![0.0; n + 1];
    let mut anorm = 0.0;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm += a[i][j].abs();
        }
    }
    let mut nn = n as isize;
    let mut t = 0.0;
    let (mut p, mut q, mut r) = (0.0f64, 0.0f64, 0.0f64);
    let (mut x, mut y, mut z, mut w) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    while nn >= 1 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 2 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            x = a[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
            } else {
                y = a[nu - 1][nu - 1];
                w = a[nu][nu - 1] * a[nu - 1][nu];
                if l == nu - 1 {
                    p = 0.5 * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + z.copysign(p);
                        wr[nu - 1] = x + z;
                        wr[nu] = x + z;
                        if z != 0.0 {
                            wr[nu] = x - w / z;
                        }
                        wi[nu - 1] = 0.0;
                        wi[nu] = 0.0;
                    } else {
                        wr[nu - 1] = x + p;
                        wr[nu] = x + p;
                        wi[nu - 1] = -z;
                        wi[nu] = z;
                    }
                    nn -= 2;
                } else {
                    if its == 60 {
                        return Err(Error::Domain("eigenvalue iteration did not converge".into()));
                    }
                    if its == 10 || its == 20 {
                        t += x;
                        for i in 1..=nu {
                            a[i][i] -= x;
                        }
                        let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    let mut m = nu - 2;
                    loop {
                        z = a[m][m];
                        r = x - z;
                        let s0 = y - z;
                        p = (r * s0 - w) / a[m + 1][m] + a[m][m + 1];
                        q = a[m + 1][m + 1] - z - r - s0;
                        r = a[m + 2][m + 1];
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in (m + 2)..=nu {
                        a[i][i - 2] = 0.0;
                        if i != m + 2 {
                            a[i][i - 3] = 0.0;
                        }
                    }
                    let mut k = m;
                    while k + 1 <= nu {
                        if k != m {
                            p = a[k][k - 1];
                            q = a[k + 1][k - 1];
                            r = 0.0;
                            if k != nu - 1 {
                                r = a[k + 2][k - 1];
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = (p * p + q * q + r * r).sqrt().copysign(p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a[k][k - 1] = -a[k][k - 1];
                                }
                            } else {
                                a[k][k - 1] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nu {
                                p = a[k][j] + q * a[k + 1][j];
                                if k != nu - 1 {
                                    p += r * a[k + 2][j];
                                    a[k + 2][j] -= p * z;
                                }
                                a[k + 1][j] -= p * y;
                                a[k][j] -= p * x;
                            }
                            let mmin = if nu < k + 3 { nu } else { k + 3 };
                            for i in l..=mmin {
                                p = x * a[i][k] + y * a[i][k + 1];
                                if k != nu - 1 {
                                    p += z * a[i][k + 2];
                                    a[i][k + 2] -= p * r;
                                }
                                a[i][k + 1] -= p * q;
                                a[i][k] -= p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn < 1 || l + 1 >= nn as usize {
                break;
            }
        }
    }
    Ok((1..=n).map(|i| (wr[i], wi[i])).collect())
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues<T: Real>(m: &Matrix<T>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension("symmetric eigenvalues need a square matrix".into()));
    }
    let n = m.rows;
    let mut a: Vec<f64> = m.symmetrized().data.iter().map(|v| v.as_f64()).collect();
    let idx = |i: usize, j: usize| i * n + j;
    let total: f64 = a.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[idx(i, j)].powi(2)).sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[idx(i, i)]).collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    Ok(ev)
}

/// Largest singular value.
pub fn operator_norm<T: Real>(m: &Matrix<T>) -> f64 {
    let mtm = m.transpose().matmul(m).expect("shapes agree");
    symmetric_eigenvalues(&mtm).map_or(f64::NAN, |ev| ev.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Checks that every eigenvalue of `a` has real part below `-margin`.
pub fn check_hurwitz<T: Real>(a: &Matrix<T>, margin: f64) -> Result<()> {
    for (re, im) in eigenvalues(a)? {
        if re >= -margin {
            return Err(Error::Stability { re, im, margin });
        }
    }
    Ok(())
}

/// Infinite-horizon Gramian solving `A Q + Q A^T + B B^T = 0` for Hurwitz `A`.
pub fn gramian_inf<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<SpdMatrix<T>> {
    gramian_inf_with_margin(a, b, 1e-9)
}

pub fn gramian_inf_with_margin<T: Real>(a: &Matrix<T>, b: &Matrix<T>, margin: f64) -> Result<SpdMatrix<T>> {
    if !a.is_square() {
        return Err(Error::Dimension("Lyapunov solve needs square A".into()));
    }
    if b.rows != a.rows {
        return Err(Error::Dimension(format!("B has {} rows, A is {}x{}", b.rows, a.rows, a.cols)));
    }
    check_hurwitz(a, margin)?;
    let n = a.rows;
    let bbt = b.matmul(&b.transpose())?;
    // (I (x) A + A (x) I) vec(Q) = -vec(BB^T), row-major vec.
    let mut k = Matrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for c in 0..n {
                k[(row, c * n + j)] += a[(i, c)];
                k[(row, i * n + c)] += a[(j, c)];
            }
        }
    }
    let rhs = Matrix::from_fn(n * n, 1, |r, _| -bbt.data[r]);
    let sol = k.solve(&rhs)?;
    let q = Matrix { rows: n, cols: n, data: sol.data }.symmetrized();
    SpdMatrix::new(q)
}

/// Lyapunov residual `||A Q + Q A^T + B B^T||_F`.
pub fn lyapunov_residual<T: Real>(a: &Matrix<T>, b: &Matrix<T>, q: &Matrix<T>) -> Result<T> {
    let aq = a.matmul(q)?;
    let qat = q.matmul(&a.transpose())?;
    let bbt = b.matmul(&b.transpose())?;
    Ok(aq.add(&qat)?.add(&bbt)?.frobenius_norm())
}

/// Log-density of `N(mean, cov)` at `x` and its gradient `-cov^{-1}(x - mean)`.
pub fn gaussian_logpdf_grad<T: Real>(x: &[T], mean: &[T], cov: &SpdMatrix<T>) -> Result<(T, Vec<T>)> {
    let d = cov.dim();
    if x.len() != d || mean.len() != d {
        return Err(Error::Dimension(format!("x has {}, mean {}, cov {d}", x.len(), mean.len())));
    }
    let diff: Vec<T> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let z = cov.forward_sub(&diff);
    let quad: T = z.iter().map(|&v| v * v).sum();
    let two_pi = T::lit(2.0) * T::PI();
    let logp = -T::lit(0.5) * (T::from_usize_lossy(d) * two_pi.ln() + cov.log_det() + quad);
    let grad = cov.backward_sub(&z).into_iter().map(|v| -v).collect();
    Ok((logp, grad))
}
