//! Control-affine systems `x' = g0(x) + sum_i g_i(x) u_i` and their channel
//! calculus.
//!
//! The built-in driftless systems (unicycle, five-dimensional chained form)
//! satisfy the bracket-generating condition; this is not checked at runtime.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gramian_psd, symmetric_eigenvalues, Matrix};
use crate::scalar::Real;

/// A control-affine system with analytic derivatives.
pub trait ControlAffine<T: Real>: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn is_driftless(&self) -> bool {
        true
    }

    /// Writes `g0(x)` into `out`.
    fn drift(&self, _x: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
    }

    /// Writes `d g0 / dx` into the `d x d` matrix `out`.
    fn drift_jacobian(&self, _x: &[T], out: &mut Matrix<T>) {
        out.fill(T::zero());
    }

    /// Writes `G(x)` (column `i` is `g_i(x)`) into the `d x m` matrix `out`.
    fn channels(&self, x: &[T], out: &mut Matrix<T>);

    /// Writes the Jacobian of channel `i` into the `d x d` matrix `out`.
    fn channel_jacobian(&self, x: &[T], i: usize, out: &mut Matrix<T>);

    fn channel_matrix(&self, x: &[T]) -> Matrix<T> {
        let mut g = Matrix::zeros(self.state_dim(), self.input_dim());
        self.channels(x, &mut g);
        g
    }

    fn channel_jacobians(&self, x: &[T]) -> Vec<Matrix<T>> {
        let d = self.state_dim();
        (0..self.input_dim())
            .map(|i| {
                let mut j = Matrix::zeros(d, d);
                self.channel_jacobian(x, i, &mut j);
                j
            })
            .collect()
    }

    /// `g0(x) + G(x) u`.
    fn velocity(&self, x: &[T], u: &[T], out: &mut [T]) {
        self.drift(x, out);
        let g = self.channel_matrix(x);
        for (k, o) in out.iter_mut().enumerate() {
            *o += crate::scalar::dot(g.row(k), u);
        }
    }
}

/// Shared handle to a system used by the f64 pipeline.
pub type System = Arc<dyn ControlAffine<f64>>;

/// `x1' = u1 cos x3, x2' = u1 sin x3, x3' = u2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Unicycle;

impl<T: Real> ControlAffine<T> for Unicycle {
    fn name(&self) -> &str {
        "unicycle"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn channels(&self, x: &[T], out: &mut Matrix<T>) {
        out.fill(T::zero());
        out[(0, 0)] = x[2].cos();
        out[(1, 0)] = x[2].sin();
        out[(2, 1)] = T::one();
    }
    fn channel_jacobian(&self, x: &[T], i: usize, out: &mut Matrix<T>) {
        out.fill(T::zero());
        if i == 0 {
            out[(0, 2)] = -x[2].sin();
            out[(1, 2)] = x[2].cos();
        }
    }
}

/// Five-dimensional chained form: `x1' = u1, x2' = u2, x3' = x2 u1,
/// x4' = x3 u1, x5' = x4 u1`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Chained5;

impl<T: Real> ControlAffine<T> for Chained5 {
    fn name(&self) -> &str {
        "chained5"
    }
    fn state_dim(&self) -> usize {
        5
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn channels(&self, x: &[T], out: &mut Matrix<T>) {
        out.fill(T::zero());
        out[(0, 0)] = T::one();
        out[(2, 0)] = x[1];
        out[(3, 0)] = x[2];
        out[(4, 0)] = x[3];
        out[(1, 1)] = T::one();
    }
    fn channel_jacobian(&self, _x: &[T], i: usize, out: &mut Matrix<T>) {
        out.fill(T::zero());
        if i == 0 {
            out[(2, 1)] = T::one();
            out[(3, 2)] = T::one();
            out[(4, 3)] = T::one();
        }
    }
}

/// `G = I_d`, no drift.
#[derive(Clone, Copy, Debug)]
pub struct FullyActuated {
    pub dim: usize,
}

impl<T: Real> ControlAffine<T> for FullyActuated {
    fn name(&self) -> &str {
        "fully_actuated"
    }
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn channels(&self, _x: &[T], out: &mut Matrix<T>) {
        out.fill(T::zero());
        for i in 0..self.dim {
            out[(i, i)] = T::one();
        }
    }
    fn channel_jacobian(&self, _x: &[T], _i: usize, out: &mut Matrix<T>) {
        out.fill(T::zero());
    }
}

/// Linear time-invariant system `x' = A x + B u`.
#[derive(Clone, Debug)]
pub struct Lti<T: Real = f64> {
    a: Matrix<T>,
    b: Matrix<T>,
}

impl<T: Real> Lti<T> {
    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }
    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }
}

impl<T: Real> ControlAffine<T> for Lti<T> {
    fn name(&self) -> &str {
        "lti"
    }
    fn state_dim(&self) -> usize {
        self.a.rows()
    }
    fn input_dim(&self) -> usize {
        self.b.cols()
    }
    fn is_driftless(&self) -> bool {
        self.a.max_abs() == T::zero()
    }
    fn drift(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::scalar::dot(self.a.row(i), x);
        }
    }
    fn drift_jacobian(&self, _x: &[T], out: &mut Matrix<T>) {
        *out = self.a.clone();
    }
    fn channels(&self, _x: &[T], out: &mut Matrix<T>) {
        *out = self.b.clone();
    }
    fn channel_jacobian(&self, _x: &[T], _i: usize, out: &mut Matrix<T>) {
        out.fill(T::zero());
    }
    fn velocity(&self, x: &[T], u: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::scalar::dot(self.a.row(i), x) + crate::scalar::dot(self.b.row(i), u);
        }
    }
}

pub fn make_unicycle() -> Unicycle {
    Unicycle
}

pub fn make_chained5() -> Chained5 {
    Chained5
}

/// Builds `x' = A x + B u`, rejecting pairs whose Gramian over `[0, 1]` is
/// singular.
pub fn make_lti<T: Real>(a: Matrix<T>, b: Matrix<T>) -> Result<Lti<T>> {
    if !a.is_square() || b.rows() != a.rows() {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let q = gramian_psd(&a, &b, T::one())?;
    let ev = symmetric_eigenvalues(&q)?;
    let (lo, hi) = (ev[0], *ev.last().unwrap());
    if !(lo > 1e-12 * hi.max(f64::MIN_POSITIVE)) || hi <= 0.0 {
        return Err(Error::Controllability { min_eig: lo });
    }
    Ok(Lti { a, b })
}

/// `(Y_1 f, ..., Y_m f) = G(x)^T grad_f`.
pub fn nonholonomic_gradient<T: Real>(sys: &dyn ControlAffine<T>, x: &[T], grad_f: &[T]) -> Result<Vec<T>> {
    let d = sys.state_dim();
    if x.len() != d || grad_f.len() != d {
        return Err(Error::Dimension(format!(
            "system has d = {d}, got x of {} and gradient of {}",
            x.len(),
            grad_f.len()
        )));
    }
    Ok(sys.channel_matrix(x).tr_matvec(grad_f))
}

/// Component `i` is `div g_i(x)`, the trace of the channel Jacobian.
pub fn channel_divergence<T: Real>(sys: &dyn ControlAffine<T>, x: &[T]) -> Vec<T> {
    sys.channel_jacobians(x).iter().map(Matrix::trace).collect()
}

/// Forward noise-shaping coefficients `v_i = div g_i + g_i . grad log p_n`,
/// which make `p_n` stationary for the driftless channel diffusion.
pub fn noise_shaping_control<T: Real>(
    sys: &dyn ControlAffine<T>,
    pn_score: &dyn Fn(&[T]) -> Vec<T>,
    x: &[T],
) -> Vec<T> {
    let g = sys.channel_matrix(x);
    let proj = g.tr_matvec(&pn_score(x));
    channel_divergence(sys, x).into_iter().zip(proj).map(|(a, b)| a + b).collect()
}

/// System selection as it appears in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SystemSpec {
    Unicycle,
    Chained5,
    Lti { a: Matrix, b: Matrix },
    FullyActuated { dim: usize },
}

impl SystemSpec {
    pub fn build(&self) -> Result<System> {
        Ok(match self {
            SystemSpec::Unicycle => Arc::new(Unicycle),
            SystemSpec::Chained5 => Arc::new(Chained5),
            SystemSpec::Lti { a, b } => Arc::new(make_lti(a.clone(), b.clone())?),
            SystemSpec::FullyActuated { dim } => Arc::new(FullyActuated { dim: *dim }),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            SystemSpec::Unicycle => "unicycle",
            SystemSpec::Chained5 => "chained5",
            SystemSpec::Lti { .. } => "lti",
            SystemSpec::FullyActuated { .. } => "fully_actuated",
        }
    }
}
