//! Scores of forward marginals: the closed-form Gaussian-mixture marginal of
//! a linear forward process, and kernel estimates from snapshot stores.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::density::{kde_score, silverman_bandwidth, Bandwidth, Density, DensitySpec};
use crate::error::{Error, Result};
use crate::forward::SnapshotStore;
use crate::linalg::{gramian_psd, mat_exp, operator_norm, Matrix, SpdMatrix};
use crate::mlp::Mlp;
use crate::scalar::{log_sum_exp, norm2};
use crate::systems::{nonholonomic_gradient, ControlAffine};

pub const DEFAULT_T_MIN: f64 = 1e-4;

/// Forward marginal at one time: Gaussian components with shared covariance.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub cov: SpdMatrix,
    pub exp_at: Matrix,
    prec: Matrix,
}

impl GaussianMixture {
    fn whitened(&self, y: &[f64]) -> Vec<Vec<f64>> {
        self.means
            .iter()
            .map(|m| {
                let r: Vec<f64> = y.iter().zip(m).map(|(a, b)| a - b).collect();
                self.cov.forward_sub(&r)
            })
            .collect()
    }

    fn component_logs(&self, z: &[Vec<f64>]) -> Vec<f64> {
        z.iter().zip(&self.log_weights).map(|(zk, lw)| lw - 0.5 * zk.iter().map(|v| v * v).sum::<f64>()).collect()
    }

    pub fn logpdf(&self, y: &[f64]) -> f64 {
        let d = y.len() as f64;
        let lc = self.component_logs(&self.whitened(y));
        log_sum_exp(&lc) - 0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * self.cov.log_det()
    }

    /// `grad log p(y) = -Sigma^{-1} (y - sum_k r_k m_k)` with softmax
    /// responsibilities `r_k`.
    pub fn score(&self, y: &[f64]) -> Vec<f64> {
        if let [m] = self.means.as_slice() {
            let r: Vec<f64> = y.iter().zip(m).map(|(a, b)| b - a).collect();
            return self.prec.matvec(&r);
        }
        let lc = self.component_logs(&self.whitened(y));
        let lse = log_sum_exp(&lc);
        let mut r = y.to_vec();
        for (m, l) in self.means.iter().zip(&lc) {
            let w = (l - lse).exp();
            for (ri, mi) in r.iter_mut().zip(m) {
                *ri -= w * mi;
            }
        }
        self.prec.matvec(&r).into_iter().map(|v| -v).collect()
    }

    pub fn precision(&self) -> &Matrix {
        &self.prec
    }
}

/// Closed-form forward marginals of `dx = A_f x dt + s B_f dW` started from
/// a Dirac mixture or a Gaussian.
#[derive(Debug)]
pub struct LtiForwardModel {
    a_f: Matrix,
    b_f: Matrix,
    noise_scale: f64,
    p0: Density,
    points: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    support_radius: Option<f64>,
    t_min: f64,
    cache: Mutex<HashMap<u64, Arc<GaussianMixture>>>,
}

impl LtiForwardModel {
    pub fn new(a_f: Matrix, b_f: Matrix, noise_scale: f64, p0: &DensitySpec) -> Result<Self> {
        let d = a_f.rows();
        if !a_f.is_square() || b_f.rows() != d {
            return Err(Error::Dimension(format!(
                "A_f is {}x{}, B_f is {}x{}",
                a_f.rows(),
                a_f.cols(),
                b_f.rows(),
                b_f.cols()
            )));
        }
        let p0 = p0.build()?;
        if p0.dim() != d {
            return Err(Error::Dimension(format!("p0 has d = {}, system has {d}", p0.dim())));
        }
        let (points, weights, support_radius) = match &p0 {
            Density::DiracMixture { points, weights } => {
                let r = points.iter().map(|p| norm2(p)).fold(0.0, f64::max);
                (points.clone(), weights.clone(), Some(r))
            }
            Density::Gaussian { mean, .. } => (vec![mean.clone()], vec![1.0], None),
            Density::UniformBox { .. } => {
                return Err(Error::UnsupportedSpec("closed-form marginals need a Dirac or Gaussian start".into()))
            }
        };
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            a_f,
            b_f,
            noise_scale,
            p0,
            points,
            log_weights,
            support_radius,
            t_min: DEFAULT_T_MIN,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_t_min(mut self, t_min: f64) -> Self {
        self.t_min = t_min;
        self
    }

    pub fn a_f(&self) -> &Matrix {
        &self.a_f
    }

    pub fn b_f(&self) -> &Matrix {
        &self.b_f
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn dim(&self) -> usize {
        self.a_f.rows()
    }

    pub fn support_radius(&self) -> Option<f64> {
        self.support_radius
    }

    fn build_marginal(&self, t: f64) -> Result<GaussianMixture> {
        let exp_at = mat_exp(&self.a_f, t)?;
        let mut cov = gramian_psd(&self.a_f, &self.b_f, t)?.scale(self.noise_scale * self.noise_scale);
        if let Density::Gaussian { cov: s0, .. } = &self.p0 {
            let pushed = exp_at.matmul(s0.matrix())?.matmul(&exp_at.transpose())?;
            cov = cov.add(&pushed)?;
        }
        let cov = SpdMatrix::new(cov.symmetrized()).map_err(|_| Error::NearSingular { t, t_min: self.t_min })?;
        let means = self.points.iter().map(|p| exp_at.matvec(p)).collect();
        let prec = cov.inverse();
        Ok(GaussianMixture { means, log_weights: self.log_weights.clone(), cov, exp_at, prec })
    }

    /// Mixture parameters of the forward marginal at `t`, memoized per `t`.
    pub fn marginal(&self, t: f64) -> Result<Arc<GaussianMixture>> {
        if !(t >= self.t_min) {
            return Err(Error::NearSingular { t, t_min: self.t_min });
        }
        let key = t.to_bits();
        if let Some(m) = self.cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(m));
        }
        let fresh = Arc::new(self.build_marginal(t)?);
        let mut cache = self.cache.lock().unwrap();
        Ok(Arc::clone(cache.entry(key).or_insert(fresh)))
    }

    pub fn score(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.marginal(t)?.score(y))
    }

    pub fn logpdf(&self, t: f64, y: &[f64]) -> Result<f64> {
        Ok(self.marginal(t)?.logpdf(y))
    }

    /// `|Sigma_t^{-1}| (|y| + |e^{A_f t}| R)` with operator norms.
    pub fn score_growth_bound(&self, t: f64, y: &[f64]) -> Result<f64> {
        self.score_growth_bound_with_radius(t, y, self.support_radius.ok_or_else(|| {
            Error::UnsupportedSpec("growth bound needs a compactly supported start".into())
        })?)
    }

    pub fn score_growth_bound_with_radius(&self, t: f64, y: &[f64], radius: f64) -> Result<f64> {
        let m = self.marginal(t)?;
        let prec = operator_norm(m.precision());
        Ok(prec * (norm2(y) + operator_norm(&m.exp_at) * radius))
    }
}

pub fn lti_marginal(model: &LtiForwardModel, t: f64) -> Result<Arc<GaussianMixture>> {
    model.marginal(t)
}

pub fn lti_score(model: &LtiForwardModel, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    model.score(t, y)
}

pub fn score_growth_bound(model: &LtiForwardModel, t: f64, y: &[f64]) -> Result<f64> {
    model.score_growth_bound(t, y)
}

/// Kernel score of the nearest snapshot with Silverman bandwidths computed
/// once per snapshot.
#[derive(Debug)]
pub struct KdeScoreField {
    store: Arc<SnapshotStore>,
    bandwidths: Vec<Bandwidth>,
}

impl KdeScoreField {
    pub fn new(store: Arc<SnapshotStore>) -> Result<Self> {
        let bandwidths = store.ensembles.iter().map(silverman_bandwidth).collect::<Result<_>>()?;
        Ok(Self { store, bandwidths })
    }

    /// Explicit per-snapshot bandwidths.
    pub fn with_bandwidths(store: Arc<SnapshotStore>, bandwidths: Vec<Bandwidth>) -> Result<Self> {
        if bandwidths.len() != store.len() {
            return Err(Error::Dimension(format!("{} bandwidths for {} snapshots", bandwidths.len(), store.len())));
        }
        Ok(Self { store, bandwidths })
    }

    pub fn store(&self) -> &SnapshotStore {
        &self.store
    }

    pub fn bandwidth(&self, k: usize) -> &Bandwidth {
        &self.bandwidths[k]
    }

    pub fn euclidean(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let k = self.store.nearest_index(t);
        kde_score(&self.store.ensembles[k], &self.bandwidths[k], x)
    }

    pub fn euclidean_at(&self, k: usize, x: &[f64]) -> Vec<f64> {
        kde_score(&self.store.ensembles[k], &self.bandwidths[k], x)
    }

    pub fn nonholonomic(&self, sys: &dyn ControlAffine<f64>, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        nonholonomic_gradient(sys, x, &self.euclidean(t, x))
    }
}

/// `G(x)^T grad log p_t(x)` from the snapshot nearest to `t`.
pub fn snapshot_nonholonomic_score(
    store: &SnapshotStore,
    sys: &dyn ControlAffine<f64>,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    if store.is_empty() {
        return Err(Error::Data("empty snapshot store".into()));
    }
    let e = store.nearest(t);
    let h = silverman_bandwidth(e)?;
    nonholonomic_gradient(sys, x, &kde_score(e, &h, x))
}

/// A source of nonholonomic scores `s(t, x) in R^m` for forward time `t`.
#[derive(Clone, Debug)]
pub enum ScoreField {
    LtiClosedForm(Arc<LtiForwardModel>),
    KdeSnapshot(Arc<KdeScoreField>),
    Neural(Arc<Mlp>),
}

impl ScoreField {
    pub fn nonholonomic(&self, sys: &dyn ControlAffine<f64>, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreField::LtiClosedForm(m) => nonholonomic_gradient(sys, x, &m.score(t, x)?),
            ScoreField::KdeSnapshot(k) => k.nonholonomic(sys, t, x),
            ScoreField::Neural(net) => Ok(net.forward(t, x)),
        }
    }

    pub fn is_continuous_in_time(&self) -> bool {
        !matches!(self, ScoreField::KdeSnapshot(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::ParticleEnsemble;
    use crate::systems::FullyActuated;

    fn scalar_model(p0: DensitySpec) -> LtiForwardModel {
        LtiForwardModel::new(Matrix::from_diag(&[-1.0]), Matrix::from_diag(&[1.0]), 2f64.sqrt(), &p0).unwrap()
    }

    #[test]
    fn single_dirac_at_origin() {
        let m = scalar_model(DensitySpec::DiracMixture { points: vec![vec![0.0]], weights: vec![1.0] });
        let t = 0.8f64;
        let var = 1.0 - (-2.0 * t).exp();
        let s = m.score(t, &[0.3]).unwrap();
        assert!((s[0] + 0.3 / var).abs() < 1e-12);
        assert_eq!(m.score(t, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(m.score_growth_bound(t, &[0.0]).unwrap(), 0.0);
        assert!(matches!(m.score(1e-5, &[0.0]), Err(Error::NearSingular { .. })));
    }

    #[test]
    fn gaussian_start_adds_pushed_covariance() {
        let s0 = 0.7;
        let m = scalar_model(DensitySpec::gaussian_iso(vec![0.0], s0));
        for t in [0.1f64, 1.0, 3.0] {
            let c = m.marginal(t).unwrap().cov.matrix()[(0, 0)];
            let expect = (-2.0 * t).exp() * s0 + 2.0 * (1.0 - (-2.0 * t).exp()) / 2.0;
            assert!((c - expect).abs() < 1e-12, "t = {t}: {c} vs {expect}");
        }
    }

    #[test]
    fn equidistant_query_averages_component_scores() {
        let m = scalar_model(DensitySpec::DiracMixture { points: vec![vec![-2.0], vec![2.0]], weights: vec![0.5, 0.5] });
        let mix = m.marginal(0.5).unwrap();
        let c1 = -(0.0 - mix.means[0][0]) / mix.cov.matrix()[(0, 0)];
        let c2 = -(0.0 - mix.means[1][0]) / mix.cov.matrix()[(0, 0)];
        assert!((mix.score(&[0.0])[0] - 0.5 * (c1 + c2)).abs() < 1e-14);
    }

    #[test]
    fn growth_bound_is_linear_in_radius() {
        let m = scalar_model(DensitySpec::DiracMixture { points: vec![vec![1.0]], weights: vec![1.0] });
        let (t, y) = (0.6, [0.4]);
        let b1 = m.score_growth_bound_with_radius(t, &y, 1.0).unwrap();
        let b2 = m.score_growth_bound_with_radius(t, &y, 2.0).unwrap();
        let mix = m.marginal(t).unwrap();
        let slope = operator_norm(&mix.cov.inverse()) * operator_norm(&mix.exp_at);
        assert!((b2 - b1 - slope).abs() < 1e-12);
    }

    #[test]
    fn cache_returns_shared_entry() {
        let m = scalar_model(DensitySpec::DiracMixture { points: vec![vec![0.0]], weights: vec![1.0] });
        let a = m.marginal(0.25).unwrap();
        let b = m.marginal(0.25).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn symmetric_snapshot_gives_zero_score_at_center() {
        let rows: Vec<Vec<f64>> = (0..50).flat_map(|i| {
            let a = [0.1 * i as f64, -0.03 * i as f64];
            [a.to_vec(), a.iter().map(|v| -v).collect()]
        }).collect();
        let e = ParticleEnsemble::from_rows(0.0, &rows).unwrap();
        let store = SnapshotStore::new(vec![0.0], vec![e]).unwrap();
        let s = snapshot_nonholonomic_score(&store, &FullyActuated { dim: 2 }, 0.0, &[0.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-12));
    }
}
