//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdctl_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps this independent of rand_distr.
    let u1: f64 = r.random::<f64>().max(1e-300);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| scale * normal(r)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Stable matrix -(M M^T + margin I) + S with S skew-symmetric: its symmetric
/// part is negative definite, so every eigenvalue has real part <= -margin.
pub fn random_stable(r: &mut ChaCha8Rng, n: usize, margin: f64) -> Matrix {
    let m = random_matrix(r, n, n, 0.5);
    let s = random_matrix(r, n, n, 0.7);
    let mmt = m.matmul(&m.transpose()).unwrap();
    Matrix::from_fn(n, n, |i, j| {
        let id = if i == j { margin } else { 0.0 };
        -(mmt[(i, j)] + id) + 0.5 * (s[(i, j)] - s[(j, i)])
    })
}

/// Direct Taylor series of exp(M t).
pub fn taylor_exp(m: &Matrix, t: f64, terms: usize) -> Matrix {
    let n = m.rows();
    let mt = m.scale(t);
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..terms {
        term = term.matmul(&mt).unwrap().scale(1.0 / k as f64);
        sum = sum.add(&term).unwrap();
    }
    sum
}

/// Exp via Taylor with repeated halving so the series converges quickly.
pub fn taylor_exp_scaled(m: &Matrix, t: f64) -> Matrix {
    let norm = m.scale(t).max_abs() * m.rows() as f64;
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let mut e = taylor_exp(m, t / 2f64.powi(s), 30);
    for _ in 0..s {
        e = e.matmul(&e).unwrap();
    }
    e
}

fn gramian_integrand(a: &Matrix, bbt: &Matrix, tau: f64) -> Matrix {
    let e = taylor_exp_scaled(a, tau);
    e.matmul(bbt).unwrap().matmul(&e.transpose()).unwrap()
}

/// Adaptive Simpson quadrature of the Gramian integrand, entrywise tolerance `tol`.
pub fn gramian_quadrature(a: &Matrix, b: &Matrix, t: f64, tol: f64) -> Matrix {
    let bbt = b.matmul(&b.transpose()).unwrap();
    let f = |tau: f64| gramian_integrand(a, &bbt, tau);
    let fa = f(0.0);
    let fm = f(t / 2.0);
    let fb = f(t);
    let whole = simpson(&fa, &fm, &fb, t);
    adapt(&f, 0.0, t, &fa, &fm, &fb, &whole, tol, 40)
}

fn simpson(fa: &Matrix, fm: &Matrix, fb: &Matrix, h: f64) -> Matrix {
    fa.add(&fm.scale(4.0)).unwrap().add(fb).unwrap().scale(h / 6.0)
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    f: &dyn Fn(f64) -> Matrix,
    lo: f64,
    hi: f64,
    fa: &Matrix,
    fm: &Matrix,
    fb: &Matrix,
    whole: &Matrix,
    tol: f64,
    depth: usize,
) -> Matrix {
    let mid = 0.5 * (lo + hi);
    let flm = f(0.5 * (lo + mid));
    let frm = f(0.5 * (mid + hi));
    let left = simpson(fa, &flm, fm, mid - lo);
    let right = simpson(fm, &frm, fb, hi - mid);
    let both = left.add(&right).unwrap();
    let err = both.sub(whole).unwrap().max_abs();
    if depth == 0 || err <= 15.0 * tol {
        return both.add(&both.sub(whole).unwrap().scale(1.0 / 15.0)).unwrap();
    }
    let l = adapt(f, lo, mid, fa, &flm, fm, &left, tol / 2.0, depth - 1);
    let r = adapt(f, mid, hi, fm, &frm, fb, &right, tol / 2.0, depth - 1);
    l.add(&r).unwrap()
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let x0 = xp[i];
        xp[i] = x0 + h;
        let fp = f(&xp);
        xp[i] = x0 - h;
        let fm = f(&xp);
        xp[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error between two vectors with an absolute floor.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// The 4x4 reverse-time matrices of the bistable linear experiment.
pub fn bistable_ab() -> (Matrix, Matrix) {
    let a = Matrix::from_rows(&[
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ])
    .unwrap();
    let b = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
    (a, b)
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error about 1e-9).
pub fn probit(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Mixture log-density up to a constant, from quadrature covariance, Taylor
/// means and a Gauss-Jordan inverse.
pub struct MixtureOracle {
    means: Vec<Vec<f64>>,
    log_w: Vec<f64>,
    prec: Matrix,
}

impl MixtureOracle {
    pub fn new(af: &Matrix, bf: &Matrix, s: f64, points: &[Vec<f64>], weights: &[f64], t: f64) -> Self {
        let cov = gramian_quadrature(af, bf, t, 1e-13).scale(s * s);
        let e = taylor_exp_scaled(af, t);
        Self {
            means: points.iter().map(|p| e.matvec(p)).collect(),
            log_w: weights.iter().map(|w| w.ln()).collect(),
            prec: cov.inverse().unwrap(),
        }
    }

    pub fn log_unnormalized(&self, y: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_w)
            .map(|(m, lw)| {
                let r: Vec<f64> = y.iter().zip(m).map(|(a, b)| a - b).collect();
                let pr = self.prec.matvec(&r);
                lw - 0.5 * r.iter().zip(&pr).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
    }
}
