//! Analytic densities, particle ensembles, Gaussian product-kernel density
//! estimates of log-densities and scores, and the plug-in KL estimator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_logpdf_grad, Matrix, SpdMatrix};
use crate::scalar::{log_sum_exp, Real};

/// JSON form of a density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DensitySpec {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    DiracMixture { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl DensitySpec {
    pub fn gaussian_iso(mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        let cov = (0..d).map(|i| (0..d).map(|j| if i == j { var } else { 0.0 }).collect()).collect();
        DensitySpec::Gaussian { mean, cov }
    }

    pub fn uniform_cube(d: usize, half_width: f64) -> Self {
        DensitySpec::UniformBox { lo: vec![-half_width; d], hi: vec![half_width; d] }
    }

    pub fn dim(&self) -> usize {
        match self {
            DensitySpec::Gaussian { mean, .. } => mean.len(),
            DensitySpec::UniformBox { lo, .. } => lo.len(),
            DensitySpec::DiracMixture { points, .. } => points.first().map_or(0, Vec::len),
        }
    }

    pub fn build(&self) -> Result<Density> {
        Density::try_from(self)
    }
}

/// Validated density with cached factorizations.
#[derive(Clone, Debug)]
pub enum Density {
    Gaussian { mean: Vec<f64>, cov: SpdMatrix },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    DiracMixture { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl TryFrom<&DensitySpec> for Density {
    type Error = Error;

    fn try_from(spec: &DensitySpec) -> Result<Self> {
        match spec {
            DensitySpec::Gaussian { mean, cov } => {
                let m = Matrix::try_from(cov.clone())?;
                if m.rows() != mean.len() {
                    return Err(Error::Dimension(format!(
                        "Gaussian mean has {} entries, covariance is {}x{}",
                        mean.len(),
                        m.rows(),
                        m.cols()
                    )));
                }
                Ok(Density::Gaussian { mean: mean.clone(), cov: SpdMatrix::new(m)? })
            }
            DensitySpec::UniformBox { lo, hi } => {
                if lo.len() != hi.len() || lo.is_empty() {
                    return Err(Error::Dimension("box bounds must be nonempty and of equal length".into()));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return Err(Error::Domain("box needs lo < hi componentwise".into()));
                }
                Ok(Density::UniformBox { lo: lo.clone(), hi: hi.clone() })
            }
            DensitySpec::DiracMixture { points, weights } => {
                let d = spec.dim();
                if points.is_empty() || points.len() != weights.len() || points.iter().any(|p| p.len() != d) {
                    return Err(Error::Dimension("mixture needs one weight per point and equal dimensions".into()));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("mixture weights must be nonnegative and sum to 1, got {total}")));
                }
                Ok(Density::DiracMixture { points: points.clone(), weights: weights.clone() })
            }
        }
    }
}

impl Density {
    pub fn dim(&self) -> usize {
        match self {
            Density::Gaussian { mean, .. } => mean.len(),
            Density::UniformBox { lo, .. } => lo.len(),
            Density::DiracMixture { points, .. } => points[0].len(),
        }
    }

    pub fn spec(&self) -> DensitySpec {
        match self {
            Density::Gaussian { mean, cov } => {
                DensitySpec::Gaussian { mean: mean.clone(), cov: cov.matrix().clone().into() }
            }
            Density::UniformBox { lo, hi } => DensitySpec::UniformBox { lo: lo.clone(), hi: hi.clone() },
            Density::DiracMixture { points, weights } => {
                DensitySpec::DiracMixture { points: points.clone(), weights: weights.clone() }
            }
        }
    }

    /// One i.i.d. draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Density::Gaussian { mean, cov } => {
                let z: Vec<f64> = (0..mean.len()).map(|_| StandardNormal.sample(rng)).collect();
                cov.factor_mul(&z).into_iter().zip(mean).map(|(a, m)| a + m).collect()
            }
            Density::UniformBox { lo, hi } => lo.iter().zip(hi).map(|(&a, &b)| rng.random_range(a..b)).collect(),
            Density::DiracMixture { points, weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (p, w) in points.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return p.clone();
                    }
                }
                points.last().unwrap().clone()
            }
        }
    }

    /// `n` i.i.d. draws as an ensemble at time 0.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ParticleEnsemble {
        let d = self.dim();
        let mut states = Vec::with_capacity(n * d);
        for _ in 0..n {
            states.extend(self.draw(rng));
        }
        ParticleEnsemble { time: 0.0, dim: d, states }
    }

    /// `grad log p(x)` for Gaussians and the interior of boxes.
    pub fn analytic_score(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("density has d = {}, query has {}", self.dim(), x.len())));
        }
        match self {
            Density::Gaussian { mean, cov } => Ok(gaussian_logpdf_grad(x, mean, cov)?.1),
            Density::UniformBox { lo, hi } => {
                if x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| v > a && v < b) {
                    Ok(vec![0.0; x.len()])
                } else {
                    Err(Error::Domain("uniform-box score is only defined in the open interior".into()))
                }
            }
            Density::DiracMixture { .. } => Err(Error::UnsupportedSpec("Dirac mixtures have no score".into())),
        }
    }

    /// Log-density for the absolutely continuous variants.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            Density::Gaussian { mean, cov } => Ok(gaussian_logpdf_grad(x, mean, cov)?.0),
            Density::UniformBox { lo, hi } => {
                let inside = x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| v >= a && v <= b);
                let vol: f64 = lo.iter().zip(hi).map(|(a, b)| (b - a).ln()).sum();
                Ok(if inside { -vol } else { f64::NEG_INFINITY })
            }
            Density::DiracMixture { .. } => Err(Error::UnsupportedSpec("Dirac mixtures have no density".into())),
        }
    }
}

/// `n` states of dimension `d` at one time, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble<T: Real = f64> {
    pub time: f64,
    dim: usize,
    states: Vec<T>,
}

impl<T: Real> ParticleEnsemble<T> {
    pub fn new(time: f64, dim: usize, states: Vec<T>) -> Result<Self> {
        if dim == 0 || states.is_empty() || states.len() % dim != 0 {
            return Err(Error::Dimension(format!("{} values do not form rows of dimension {dim}", states.len())));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("ensemble states must be finite".into()));
        }
        Ok(Self { time, dim, states })
    }

    pub fn from_rows(time: f64, rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged ensemble rows".into()));
        }
        Self::new(time, d, rows.concat())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.states
    }

    pub fn into_states(self) -> Vec<T> {
        self.states
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    /// Sub-ensemble with the given row indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut states = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            states.extend_from_slice(self.row(i));
        }
        Self { time: self.time, dim: self.dim, states }
    }
}

/// Per-dimension kernel standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Bandwidth<T: Real = f64> {
    pub per_dim: Vec<T>,
}

impl<T: Real> Bandwidth<T> {
    pub fn new(per_dim: Vec<T>) -> Result<Self> {
        if per_dim.is_empty() || per_dim.iter().any(|&h| !(h > T::zero()) || !h.is_finite()) {
            return Err(Error::Domain("bandwidth entries must be positive and finite".into()));
        }
        Ok(Self { per_dim })
    }

    pub fn uniform(d: usize, h: T) -> Result<Self> {
        Self::new(vec![h; d])
    }
}

/// Silverman's rule `h_j = sigma_j (4 / ((d + 2) n))^{1/(d+4)}` with a floor of
/// `1e-3 (range_j + 1e-12)`.
pub fn silverman_bandwidth<T: Real>(e: &ParticleEnsemble<T>) -> Result<Bandwidth<T>> {
    let n = e.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: n });
    }
    let d = e.dim();
    let (nt, dt) = (T::from_usize_lossy(n), T::from_usize_lossy(d));
    let factor = (T::lit(4.0) / ((dt + T::lit(2.0)) * nt)).powf(T::one() / (dt + T::lit(4.0)));
    let mut h = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<T> = e.rows().map(|r| r[j]).collect();
        let mean = col.iter().copied().sum::<T>() / nt;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (nt - T::one());
        let (lo, hi) = col.iter().fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
        let floor = T::lit(1e-3) * (hi - lo + T::lit(1e-12));
        h.push((var.sqrt() * factor).max(floor));
    }
    Ok(Bandwidth { per_dim: h })
}

/// Kernel log-weights `-1/2 sum_j ((x_j - p_j) / h_j)^2` for every particle,
/// with `skip` excluded (set to `-inf`).
fn kernel_log_weights<T: Real>(points: &[T], inv_h2: &[T], x: &[T], skip: Option<usize>) -> Vec<T> {
    let half = T::lit(0.5);
    points
        .chunks_exact(x.len())
        .enumerate()
        .map(|(i, p)| {
            if Some(i) == skip {
                return T::neg_infinity();
            }
            let mut s = T::zero();
            for ((&pj, &xj), &c) in p.iter().zip(x).zip(inv_h2) {
                let diff = xj - pj;
                s += diff * diff * c;
            }
            -half * s
        })
        .collect()
}

fn inv_sq<T: Real>(h: &Bandwidth<T>) -> Vec<T> {
    h.per_dim.iter().map(|&v| T::one() / (v * v)).collect()
}

fn kernel_log_norm<T: Real>(h: &Bandwidth<T>) -> T {
    let two_pi = T::lit(2.0) * T::PI();
    h.per_dim.iter().map(|&v| (v * two_pi.sqrt()).ln()).sum()
}

fn check_dims<T: Real>(e: &ParticleEnsemble<T>, h: &Bandwidth<T>, x: &[T]) {
    assert!(
        e.dim() == h.per_dim.len() && e.dim() == x.len(),
        "KDE dimension mismatch: ensemble {}, bandwidth {}, query {}",
        e.dim(),
        h.per_dim.len(),
        x.len()
    );
}

fn kde_logdensity_skip<T: Real>(e: &ParticleEnsemble<T>, h: &Bandwidth<T>, x: &[T], skip: Option<usize>) -> T {
    let lw = kernel_log_weights(e.as_slice(), &inv_sq(h), x, skip);
    let count = e.len() - usize::from(skip.is_some());
    log_sum_exp(&lw) - T::from_usize_lossy(count).ln() - kernel_log_norm(h)
}

/// `log (1/n) sum_i prod_j N(x_j; e_ij, h_j^2)` via log-sum-exp.
pub fn kde_logdensity<T: Real>(e: &ParticleEnsemble<T>, h: &Bandwidth<T>, x: &[T]) -> T {
    check_dims(e, h, x);
    kde_logdensity_skip(e, h, x, None)
}

/// Gradient of [`kde_logdensity`]: softmax-weighted `(e_i - x) / h^2`.
pub fn kde_score<T: Real>(e: &ParticleEnsemble<T>, h: &Bandwidth<T>, x: &[T]) -> Vec<T> {
    check_dims(e, h, x);
    let inv_h2 = inv_sq(h);
    let lw = kernel_log_weights(e.as_slice(), &inv_h2, x, None);
    let lse = log_sum_exp(&lw);
    let mut acc = vec![T::zero(); x.len()];
    for (p, &l) in e.rows().zip(&lw) {
        let w = (l - lse).exp();
        if w == T::zero() {
            continue;
        }
        for (a, (&pj, &xj)) in acc.iter_mut().zip(p.iter().zip(x)) {
            *a += w * (pj - xj);
        }
    }
    acc.iter().zip(&inv_h2).map(|(&a, &c)| a * c).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct KlOptions {
    /// Evaluate the first density at its own samples with the self-kernel
    /// removed.
    pub leave_one_out: bool,
}

impl Default for KlOptions {
    fn default() -> Self {
        Self { leave_one_out: true }
    }
}

/// Plug-in estimate of `KL(P | Q)` from samples, shared bandwidth `h`,
/// leave-one-out on `P`.
pub fn kl_estimate<T: Real>(p: &ParticleEnsemble<T>, q: &ParticleEnsemble<T>, h: &Bandwidth<T>) -> T {
    kl_estimate_with(p, q, h, KlOptions::default())
}

pub fn kl_estimate_with<T: Real>(
    p: &ParticleEnsemble<T>,
    q: &ParticleEnsemble<T>,
    h: &Bandwidth<T>,
    opts: KlOptions,
) -> T {
    assert_eq!(p.dim(), q.dim(), "KL estimate needs equal dimensions");
    let loo = opts.leave_one_out && p.len() >= 2;
    let n = p.len();
    let total: T = (0..n)
        .map(|i| {
            let x = p.row(i);
            let lp = kde_logdensity_skip(p, h, x, loo.then_some(i));
            let lq = kde_logdensity_skip(q, h, x, None);
            lp - lq
        })
        .sum();
    total / T::from_usize_lossy(n)
}

/// Sample mean and unbiased covariance.
pub fn empirical_moments<T: Real>(e: &ParticleEnsemble<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let n = e.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: n });
    }
    let d = e.dim();
    let nt = T::from_usize_lossy(n);
    let mut mean = vec![T::zero(); d];
    for r in e.rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nt);
    let mut cov = Matrix::zeros(d, d);
    for r in e.rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    Ok((mean, cov.scale(T::one() / (nt - T::one()))))
}
