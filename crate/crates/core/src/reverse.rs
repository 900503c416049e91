//! Deterministic reverse rollouts under time-reversing feedback laws, with
//! density-tracking and target-set metrics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{empirical_moments, kl_estimate, silverman_bandwidth, Density, DensitySpec, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::forward::{snapshot_steps, Domain, SnapshotStore, SNAPSHOT_BUDGET};
use crate::linalg::Matrix;
use crate::mlp::Mlp;
use crate::score::{LtiForwardModel, ScoreField};
use crate::systems::{ControlAffine, System};

/// Score of the noise density as used by the reverse law. A uniform box has
/// zero score in its interior; contact with the boundary is reported.
fn pn_score(pn: &Density, x: &[f64]) -> Result<(Vec<f64>, bool)> {
    match pn {
        Density::UniformBox { lo, hi } => {
            let interior = x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| v > a && v < b);
            Ok((vec![0.0; x.len()], !interior))
        }
        other => Ok((other.analytic_score(x)?, false)),
    }
}

/// Forward channel coefficients `c (div g_i + g_i . grad log p_n)` with
/// `c = s^2 / 2`, which make `p_n` stationary for noise scale `s`.
pub fn noise_shaping(sys: &dyn ControlAffine<f64>, pn: &Density, noise_scale: f64, x: &[f64]) -> Vec<f64> {
    let c = 0.5 * noise_scale * noise_scale;
    let score = pn_score(pn, x).map(|s| s.0).unwrap_or_else(|_| vec![0.0; x.len()]);
    crate::systems::noise_shaping_control(sys, &|_: &[f64]| score.clone(), x).into_iter().map(|v| c * v).collect()
}

#[derive(Clone, Debug)]
pub enum ControlLaw {
    /// `c (s(T - t, x) - G(x)^T grad log p_n(x))`.
    DriftlessScore { score: ScoreField, pn: Density },
    /// `c B^T grad log p^f_{T-t}(x)`.
    LtiClosedForm { model: Arc<LtiForwardModel>, b: Matrix },
    /// `net(t, x)`.
    DirectNeural(Arc<Mlp>),
}

#[derive(Clone, Debug)]
pub struct ReversePolicy {
    pub law: ControlLaw,
    pub sys: System,
    pub horizon: f64,
    pub epsilon: f64,
    /// Forward noise scale `s`; the laws are multiplied by `s^2 / 2`.
    pub noise_scale: f64,
}

impl ReversePolicy {
    pub fn new(law: ControlLaw, sys: System, horizon: f64, epsilon: f64, noise_scale: f64) -> Result<Self> {
        if !(horizon > 0.0 && epsilon >= 0.0 && epsilon < horizon) {
            return Err(Error::Config(format!("need 0 <= epsilon < T, got epsilon = {epsilon}, T = {horizon}")));
        }
        if let ControlLaw::LtiClosedForm { model, .. } = &law {
            if epsilon < model.t_min() {
                return Err(Error::Config(format!("epsilon {epsilon} is below the model cutoff {}", model.t_min())));
            }
        }
        Ok(Self { law, sys, horizon, epsilon, noise_scale })
    }

    pub fn cutoff(&self) -> f64 {
        self.horizon - self.epsilon
    }

    fn gain(&self) -> f64 {
        0.5 * self.noise_scale * self.noise_scale
    }

    /// Control and whether the uniform noise density was touched on its
    /// boundary.
    pub fn control_flagged(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        if t > self.cutoff() + 1e-9 * self.horizon {
            return Err(Error::Horizon { t, limit: self.cutoff() });
        }
        let tau = self.horizon - t;
        match &self.law {
            ControlLaw::DriftlessScore { score, pn } => {
                let s = score.nonholonomic(&*self.sys, tau, x)?;
                let (ps, contact) = pn_score(pn, x)?;
                let proj = self.sys.channel_matrix(x).tr_matvec(&ps);
                let c = self.gain();
                Ok((s.iter().zip(proj).map(|(a, b)| c * (a - b)).collect(), contact))
            }
            ControlLaw::LtiClosedForm { model, b } => {
                let c = self.gain();
                Ok((b.tr_matvec(&model.score(tau, x)?).into_iter().map(|v| c * v).collect(), false))
            }
            ControlLaw::DirectNeural(net) => Ok((net.forward(t, x), false)),
        }
    }

    pub fn control(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.control_flagged(t, x)?.0)
    }

    fn closed_form(&self) -> bool {
        match &self.law {
            ControlLaw::LtiClosedForm { .. } | ControlLaw::DirectNeural(_) => true,
            ControlLaw::DriftlessScore { score, .. } => score.is_continuous_in_time(),
        }
    }
}

pub fn control(policy: &ReversePolicy, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    policy.control(t, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Explicit target set for terminal metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetSet {
    Points { points: Vec<Vec<f64>> },
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl TargetSet {
    pub fn from_density(spec: &DensitySpec, radius: f64) -> Self {
        match spec {
            DensitySpec::DiracMixture { points, .. } => TargetSet::Points { points: points.clone() },
            DensitySpec::Gaussian { mean, .. } => TargetSet::Ball { center: mean.clone(), radius },
            DensitySpec::UniformBox { lo, hi } => TargetSet::Box { lo: lo.clone(), hi: hi.clone() },
        }
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        match self {
            TargetSet::Points { points } => points.iter().map(|p| dist(x, p)).fold(f64::INFINITY, f64::min),
            TargetSet::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
            TargetSet::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| {
                    let e = (l - v).max(v - h).max(0.0);
                    e * e
                })
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// Fraction of particles within `tol` of the target set.
pub fn target_fraction(e: &ParticleEnsemble, targets: &TargetSet, tol: f64) -> f64 {
    let hits = e.rows().filter(|x| targets.distance(x) <= tol).count();
    hits as f64 / e.len() as f64
}

/// Per target point, the fraction of all particles within `tol` of it and
/// nearer to it than to any other point.
pub fn target_split(e: &ParticleEnsemble, points: &[Vec<f64>], tol: f64) -> Vec<f64> {
    let mut counts = vec![0usize; points.len()];
    for x in e.rows() {
        let (k, dmin) = points
            .iter()
            .map(|p| x.iter().zip(p).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc });
        if dmin <= tol {
            counts[k] += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / e.len() as f64).collect()
}

fn default_kl_checkpoints() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseConfig {
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<Integrator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
    /// Number of trajectory snapshots (evenly spread) at which tracking KL is
    /// evaluated against the forward store.
    #[serde(default = "default_kl_checkpoints")]
    pub kl_checkpoints: usize,
    /// Particle cap for tracking-KL evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_particles: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ReverseConfig {
    pub fn new(dt: f64) -> Self {
        Self { dt, integrator: None, snapshot_stride: None, kl_checkpoints: 10, kl_particles: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ReverseReport {
    pub trajectory: SnapshotStore,
    pub tracking_kl: Vec<(f64, f64)>,
    pub terminal_mean: Vec<f64>,
    pub terminal_cov: Matrix,
    pub target_fraction: Option<f64>,
    pub boundary_contacts: usize,
    pub epsilon: f64,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub t: f64,
    pub kl: f64,
}

/// Metrics JSON of a reverse rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseMetrics {
    pub tracking_kl: Vec<KlPoint>,
    pub terminal_mean: Vec<f64>,
    pub terminal_cov: Vec<Vec<f64>>,
    pub target_fraction: Option<f64>,
    pub boundary_contacts: usize,
    pub epsilon: f64,
    pub dt: f64,
    pub seed: u64,
}

impl ReverseReport {
    pub fn terminal(&self) -> &ParticleEnsemble {
        self.trajectory.last()
    }

    pub fn metrics(&self) -> ReverseMetrics {
        ReverseMetrics {
            tracking_kl: self.tracking_kl.iter().map(|&(t, kl)| KlPoint { t, kl }).collect(),
            terminal_mean: self.terminal_mean.clone(),
            terminal_cov: self.terminal_cov.to_rows(),
            target_fraction: self.target_fraction,
            boundary_contacts: self.boundary_contacts,
            epsilon: self.epsilon,
            dt: self.dt,
            seed: self.seed,
        }
    }
}

/// Tracking KL `KL(p^c_t | p^f_{T-t})` at up to `count` trajectory snapshots,
/// bandwidth from the forward snapshot.
pub fn tracking_kl(
    trajectory: &SnapshotStore,
    forward: &SnapshotStore,
    horizon: f64,
    count: usize,
    cap: Option<usize>,
) -> Result<Vec<(f64, f64)>> {
    let n = trajectory.len();
    if count == 0 {
        return Ok(vec![]);
    }
    let c = count.min(n);
    let mut picks: Vec<usize> = (0..c).map(|i| if c == 1 { n - 1 } else { i * (n - 1) / (c - 1) }).collect();
    picks.dedup();
    let limit = |e: &ParticleEnsemble| match cap {
        Some(c) if c < e.len() => e.select(&(0..c).collect::<Vec<_>>()),
        _ => e.clone(),
    };
    picks
        .into_iter()
        .map(|k| {
            let t = trajectory.times[k];
            let p = limit(&trajectory.ensembles[k]);
            let q = limit(forward.nearest(horizon - t));
            let h = silverman_bandwidth(&q)?;
            Ok((t, kl_estimate(&p, &q, &h)))
        })
        .collect()
}

/// Integrates `x' = g0(x) + G(x) control(t, x)` from `init` up to `T - epsilon`.
pub fn rollout_reverse(
    policy: &ReversePolicy,
    init: &ParticleEnsemble,
    cfg: &ReverseConfig,
    domain: &Domain,
    forward: Option<&SnapshotStore>,
    targets: Option<(&TargetSet, f64)>,
) -> Result<ReverseReport> {
    let sys = &*policy.sys;
    let d = init.dim();
    if sys.state_dim() != d {
        return Err(Error::Config(format!("system has d = {}, initial ensemble has {d}", sys.state_dim())));
    }
    if !(cfg.dt > 0.0) {
        return Err(Error::Config("reverse dt must be positive".into()));
    }
    domain.validate(d)?;
    let t_end = policy.cutoff();
    let n_steps = ((t_end / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = t_end / n_steps as f64;
    let integrator = cfg.integrator.unwrap_or(if policy.closed_form() { Integrator::Rk4 } else { Integrator::Euler });
    if integrator == Integrator::Rk4 && !policy.closed_form() {
        return Err(Error::Config("fourth-order integration needs a score continuous in time".into()));
    }
    let stride = cfg.snapshot_stride.unwrap_or_else(|| {
        let total = d * init.len() * (n_steps + 1);
        if total <= SNAPSHOT_BUDGET {
            1
        } else {
            (d * init.len() * n_steps).div_ceil(SNAPSHOT_BUDGET)
        }
    });
    let keep = snapshot_steps(n_steps, stride);

    let velocity = |t: f64, x: &[f64], contacts: &mut usize| -> Result<Vec<f64>> {
        let (u, touched) = policy.control_flagged(t, x)?;
        *contacts += usize::from(touched);
        let mut v = vec![0.0; d];
        sys.velocity(x, &u, &mut v);
        Ok(v)
    };

    let results: Vec<(Vec<f64>, usize)> = (0..init.len())
        .into_par_iter()
        .map(|pid| {
            let mut x = init.row(pid).to_vec();
            let mut out = Vec::with_capacity(keep.len() * d);
            out.extend_from_slice(&x);
            let mut contacts = 0usize;
            let mut next_keep = 1;
            for step in 0..n_steps {
                let t = step as f64 * dt;
                let cand: Vec<f64> = match integrator {
                    Integrator::Euler => {
                        let v = velocity(t, &x, &mut contacts)?;
                        x.iter().zip(&v).map(|(a, b)| a + dt * b).collect()
                    }
                    Integrator::Rk4 => {
                        let shift = |base: &[f64], k: &[f64], h: f64| -> Vec<f64> {
                            base.iter().zip(k).map(|(a, b)| a + h * b).collect()
                        };
                        let k1 = velocity(t, &x, &mut contacts)?;
                        let k2 = velocity(t + 0.5 * dt, &shift(&x, &k1, 0.5 * dt), &mut contacts)?;
                        let k3 = velocity(t + 0.5 * dt, &shift(&x, &k2, 0.5 * dt), &mut contacts)?;
                        let k4 = velocity(t + dt, &shift(&x, &k3, dt), &mut contacts)?;
                        (0..d).map(|j| x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])).collect()
                    }
                };
                if cand.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { t: t + dt, pid });
                }
                if !domain.in_obstacle(&cand) {
                    x = cand;
                }
                if next_keep < keep.len() && keep[next_keep] == step + 1 {
                    out.extend_from_slice(&x);
                    next_keep += 1;
                }
            }
            Ok((out, contacts))
        })
        .collect::<Result<_>>()?;

    let mut times = Vec::with_capacity(keep.len());
    let mut ensembles = Vec::with_capacity(keep.len());
    for (k, &s) in keep.iter().enumerate() {
        let t = if s == n_steps { t_end } else { s as f64 * dt };
        let states: Vec<f64> = results.iter().flat_map(|(tr, _)| tr[k * d..(k + 1) * d].iter().copied()).collect();
        times.push(t);
        ensembles.push(ParticleEnsemble::new(t, d, states)?);
    }
    let trajectory = SnapshotStore::new(times, ensembles)?;
    let boundary_contacts = results.iter().map(|r| r.1).sum();

    let tracking = match forward {
        Some(f) => tracking_kl(&trajectory, f, policy.horizon, cfg.kl_checkpoints, cfg.kl_particles)?,
        None => vec![],
    };
    let terminal = trajectory.last();
    let (terminal_mean, terminal_cov) = if terminal.len() >= 2 {
        empirical_moments(terminal)?
    } else {
        (terminal.row(0).to_vec(), Matrix::zeros(d, d))
    };
    let target_fraction = targets.map(|(set, tol)| target_fraction(terminal, set, tol));
    Ok(ReverseReport {
        trajectory,
        tracking_kl: tracking,
        terminal_mean,
        terminal_cov,
        target_fraction,
        boundary_contacts,
        epsilon: policy.epsilon,
        dt,
        seed: cfg.seed,
    })
}
