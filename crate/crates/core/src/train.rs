//! Training loops for network policies: regression onto nonholonomic score
//! targets, and KL tracking through an unrolled controlled rollout with an
//! exact adjoint.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{silverman_bandwidth, Bandwidth, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::forward::{Domain, SnapshotStore};
use crate::linalg::Matrix;
use crate::mlp::{Adam, AdamConfig, Mlp};
use crate::rng::{CounterRng, Purpose};
use crate::scalar::log_sum_exp;
use crate::score::KdeScoreField;
use crate::systems::{nonholonomic_gradient, ControlAffine};

/// Fixed reduction granularity, so sums do not depend on the thread count.
const CHUNK: usize = 8;
pub const DEFAULT_CHECKPOINTS: usize = 8;

fn d_step() -> f64 {
    AdamConfig::default().step_size
}
fn d_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn d_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn d_eps() -> f64 {
    AdamConfig::default().eps
}
fn d_clip() -> f64 {
    AdamConfig::default().clip
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub iterations: usize,
    #[serde(default = "d_step")]
    pub step_size: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_clip")]
    pub gradient_clip: f64,
    pub batch_particles: usize,
    /// Controlled times in `(0, T]` at which KL is measured; defaults to
    /// eight uniformly spaced times.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_times: Option<Vec<f64>>,
    /// Cap on reference particles per KL checkpoint (first rows of the
    /// snapshot); all particles when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_particles: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainOpts {
    pub fn new(iterations: usize, batch_particles: usize, seed: u64) -> Self {
        Self {
            iterations,
            step_size: d_step(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            epsilon: d_eps(),
            gradient_clip: d_clip(),
            batch_particles,
            checkpoint_times: None,
            reference_particles: None,
            seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
            clip: self.gradient_clip,
        }
    }

    pub fn checkpoints(&self, horizon: f64) -> Vec<f64> {
        self.checkpoint_times.clone().unwrap_or_else(|| {
            (1..=DEFAULT_CHECKPOINTS).map(|c| horizon * c as f64 / DEFAULT_CHECKPOINTS as f64).collect()
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub net: Mlp,
    pub losses: Vec<f64>,
}

/// Regression target for score matching.
pub enum ScoreTarget<'a> {
    /// KDE nonholonomic score of the snapshot the sample came from.
    Kde { field: &'a KdeScoreField, sys: &'a dyn ControlAffine<f64> },
    /// Arbitrary field `(t, x) -> R^m`.
    Field(&'a (dyn Fn(f64, &[f64]) -> Vec<f64> + Sync)),
}

/// Mean over the batch of `|net(t, x) - target|^2` and its parameter gradient.
pub fn score_matching_loss_grad(net: &Mlp, batch: &[(f64, &[f64], &[f64])]) -> (f64, Vec<f64>) {
    let b = batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; net.n_params()];
            let mut loss = 0.0;
            for &(t, x, target) in chunk {
                let tape = net.forward_tape(t, x);
                let diff: Vec<f64> = tape.output().iter().zip(target).map(|(a, b)| a - b).collect();
                loss += diff.iter().map(|v| v * v).sum::<f64>();
                let dout: Vec<f64> = diff.iter().map(|v| 2.0 * v / b).collect();
                net.backward(&tape, &dout, Some(&mut g));
            }
            (loss, g)
        })
        .collect();
    reduce(parts, net.n_params(), b)
}

fn reduce(parts: Vec<(f64, Vec<f64>)>, n: usize, denom: f64) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; n];
    let mut loss = 0.0;
    for (l, pg) in parts {
        loss += l;
        g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
    }
    (loss / denom, g)
}

/// Stochastic regression of `net` onto nonholonomic scores over
/// `(snapshot, particle)` pairs drawn uniformly from `store`.
pub fn train_score_matching(
    store: &SnapshotStore,
    target: ScoreTarget<'_>,
    mut net: Mlp,
    opts: &TrainOpts,
) -> Result<TrainReport> {
    if store.is_empty() {
        return Err(Error::Data("empty snapshot store".into()));
    }
    if net.state_dim() != store.dim() {
        return Err(Error::Config(format!("network takes d = {}, store has {}", net.state_dim(), store.dim())));
    }
    if opts.batch_particles == 0 {
        return Err(Error::Config("batch_particles must be positive".into()));
    }
    let rng = CounterRng::new(opts.seed, Purpose::Training);
    let mut adam = Adam::new(net.n_params(), opts.adam());
    let mut memo: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut losses = Vec::with_capacity(opts.iterations);
    let (n_snap, n_part) = (store.len(), store.n_particles());
    for it in 0..opts.iterations {
        let mut r = rng.at(0, it as u64);
        let picks: Vec<(usize, usize)> =
            (0..opts.batch_particles).map(|_| (r.random_range(0..n_snap), r.random_range(0..n_part))).collect();
        let targets: Vec<Vec<f64>> = match &target {
            ScoreTarget::Kde { field, sys } => {
                let mut missing: Vec<(usize, usize)> = picks.iter().copied().filter(|k| !memo.contains_key(k)).collect();
                missing.sort_unstable();
                missing.dedup();
                let fresh: Vec<Vec<f64>> = missing
                    .par_iter()
                    .map(|&(k, i)| {
                        let x = store.ensembles[k].row(i);
                        nonholonomic_gradient(*sys, x, &field.euclidean_at(k, x))
                    })
                    .collect::<Result<_>>()?;
                memo.extend(missing.into_iter().zip(fresh));
                picks.iter().map(|k| memo[k].clone()).collect()
            }
            ScoreTarget::Field(f) => picks.iter().map(|&(k, i)| f(store.times[k], store.ensembles[k].row(i))).collect(),
        };
        let batch: Vec<(f64, &[f64], &[f64])> = picks
            .iter()
            .zip(&targets)
            .map(|(&(k, i), s)| (store.times[k], store.ensembles[k].row(i), s.as_slice()))
            .collect();
        let (loss, mut grad) = score_matching_loss_grad(&net, &batch);
        if !loss.is_finite() {
            return Err(Error::Divergence { t: it as f64, pid: 0 });
        }
        losses.push(loss);
        adam.step(net.params_mut(), &mut grad);
    }
    Ok(TrainReport { net, losses })
}

/// Unrolled KL tracking problem on the time grid of a forward store.
pub struct KlProblem<'a> {
    store: &'a SnapshotStore,
    sys: &'a dyn ControlAffine<f64>,
    domain: &'a Domain,
    /// `(grid step, reference ensemble, bandwidth)` per checkpoint.
    checkpoints: Vec<(usize, ParticleEnsemble, Bandwidth)>,
}

/// Result of one unrolled evaluation.
#[derive(Clone, Debug)]
pub struct KlEvaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub checkpoint_kl: Vec<f64>,
    pub terminal: ParticleEnsemble,
}

impl<'a> KlProblem<'a> {
    pub fn new(
        store: &'a SnapshotStore,
        sys: &'a dyn ControlAffine<f64>,
        domain: &'a Domain,
        checkpoint_times: &[f64],
        reference_particles: Option<usize>,
    ) -> Result<Self> {
        if store.len() < 2 {
            return Err(Error::Data("KL training needs at least two snapshots".into()));
        }
        if sys.state_dim() != store.dim() {
            return Err(Error::Config(format!("system has d = {}, store has {}", sys.state_dim(), store.dim())));
        }
        let horizon = store.horizon();
        let k_max = store.len() - 1;
        let tol = 1e-9 * horizon.max(1.0);
        let mut checkpoints = Vec::new();
        for &tc in checkpoint_times {
            if !(tc > tol && tc <= horizon + tol) {
                return Err(Error::Config(format!("checkpoint {tc} outside (0, {horizon}]")));
            }
            let j = store.nearest_index(horizon - tc);
            let k = k_max - j;
            let mut reference = store.ensembles[j].clone();
            if let Some(cap) = reference_particles {
                if cap < reference.len() {
                    let idx: Vec<usize> = (0..cap).collect();
                    reference = reference.select(&idx);
                }
            }
            let h = silverman_bandwidth(&reference)?;
            checkpoints.push((k, reference, h));
        }
        if checkpoints.is_empty() {
            return Err(Error::Config("at least one checkpoint time is required".into()));
        }
        Ok(Self { store, sys, domain, checkpoints })
    }

    pub fn horizon(&self) -> f64 {
        self.store.horizon()
    }

    pub fn checkpoint_steps(&self) -> Vec<usize> {
        self.checkpoints.iter().map(|c| c.0).collect()
    }

    /// Controlled time grid `t_k = T - s_{K-k}`.
    pub fn grid(&self) -> Vec<f64> {
        let t = self.horizon();
        self.store.times.iter().rev().map(|s| t - s).collect()
    }

    /// Loss `mean_c KL(batch_c | reference_c)` and its exact parameter
    /// gradient. `x0` is the batch at controlled time 0.
    pub fn evaluate(&self, net: &Mlp, x0: &ParticleEnsemble, with_grad: bool) -> Result<KlEvaluation> {
        let d = x0.dim();
        let bsz = x0.len();
        if bsz < 2 {
            return Err(Error::InsufficientSamples { need: 2, got: bsz });
        }
        if net.state_dim() != d || net.output_dim() != self.sys.input_dim() {
            return Err(Error::Config("network shape does not match the system".into()));
        }
        let grid = self.grid();
        let k_max = grid.len() - 1;

        // states[b][k*d..], rejected[b][k] marks a step k -> k+1 that was undone.
        let rollouts: Vec<(Vec<f64>, Vec<bool>)> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let mut traj = Vec::with_capacity((k_max + 1) * d);
                let mut rej = Vec::with_capacity(k_max);
                let mut x = x0.row(b).to_vec();
                traj.extend_from_slice(&x);
                let mut vel = vec![0.0; d];
                for k in 0..k_max {
                    let dt = grid[k + 1] - grid[k];
                    let u = net.forward(grid[k], &x);
                    self.sys.velocity(&x, &u, &mut vel);
                    let cand: Vec<f64> = x.iter().zip(&vel).map(|(a, v)| a + dt * v).collect();
                    if self.domain.in_obstacle(&cand) {
                        rej.push(true);
                    } else {
                        rej.push(false);
                        x = cand;
                    }
                    traj.extend_from_slice(&x);
                }
                (traj, rej)
            })
            .collect();
        if let Some(b) = rollouts.iter().position(|(tr, _)| tr.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { t: self.horizon(), pid: b });
        }

        let n_ck = self.checkpoints.len() as f64;
        let mut ck_grad: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut checkpoint_kl = Vec::with_capacity(self.checkpoints.len());
        for (k, reference, h) in &self.checkpoints {
            let states: Vec<f64> = rollouts.iter().flat_map(|(tr, _)| tr[k * d..(k + 1) * d].iter().copied()).collect();
            let batch = ParticleEnsemble::new(0.0, d, states)?;
            let (kl, g) = kl_value_grad(&batch, reference, h);
            checkpoint_kl.push(kl);
            let entry = ck_grad.entry(*k).or_insert_with(|| vec![0.0; bsz * d]);
            entry.iter_mut().zip(g).for_each(|(a, v)| *a += v / n_ck);
        }
        let loss = checkpoint_kl.iter().sum::<f64>() / n_ck;
        let terminal_states: Vec<f64> =
            rollouts.iter().flat_map(|(tr, _)| tr[k_max * d..].iter().copied()).collect();
        let terminal = ParticleEnsemble::new(self.horizon(), d, terminal_states)?;
        if !with_grad {
            return Ok(KlEvaluation { loss, grad: vec![], checkpoint_kl, terminal });
        }

        let m = self.sys.input_dim();
        let np = net.n_params();
        let parts: Vec<(f64, Vec<f64>)> = (0..bsz)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; np];
                let mut gm = Matrix::zeros(d, m);
                let mut jac = Matrix::zeros(d, d);
                for &b in chunk {
                    let (traj, rej) = &rollouts[b];
                    let inject = |k: usize, lam: &mut [f64]| {
                        if let Some(cg) = ck_grad.get(&k) {
                            lam.iter_mut().zip(&cg[b * d..(b + 1) * d]).for_each(|(l, v)| *l += v);
                        }
                    };
                    let mut lam = vec![0.0; d];
                    inject(k_max, &mut lam);
                    for k in (0..k_max).rev() {
                        if rej[k] {
                            inject(k, &mut lam);
                            continue;
                        }
                        let dt = grid[k + 1] - grid[k];
                        let x = &traj[k * d..(k + 1) * d];
                        let tape = net.forward_tape(grid[k], x);
                        self.sys.channels(x, &mut gm);
                        let dout: Vec<f64> = gm.tr_matvec(&lam).into_iter().map(|v| v * dt).collect();
                        let dx_net = net.backward(&tape, &dout, Some(&mut g));
                        let mut next = lam.clone();
                        self.sys.drift_jacobian(x, &mut jac);
                        for (n, v) in next.iter_mut().zip(jac.tr_matvec(&lam)) {
                            *n += dt * v;
                        }
                        for (i, &ui) in tape.output().iter().enumerate() {
                            self.sys.channel_jacobian(x, i, &mut jac);
                            for (n, v) in next.iter_mut().zip(jac.tr_matvec(&lam)) {
                                *n += dt * ui * v;
                            }
                        }
                        for (n, v) in next.iter_mut().zip(dx_net) {
                            *n += v;
                        }
                        lam = next;
                        inject(k, &mut lam);
                    }
                }
                (0.0, g)
            })
            .collect();
        let (_, grad) = reduce(parts, np, 1.0);
        Ok(KlEvaluation { loss, grad, checkpoint_kl, terminal })
    }
}

/// Plug-in KL (leave-one-out on the batch) and its gradient with respect to
/// every batch state, bandwidth held fixed.
pub fn kl_value_grad(batch: &ParticleEnsemble, reference: &ParticleEnsemble, h: &Bandwidth) -> (f64, Vec<f64>) {
    let (bsz, d) = (batch.len(), batch.dim());
    let inv_h2: Vec<f64> = h.per_dim.iter().map(|v| 1.0 / (v * v)).collect();
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&inv_h2).map(|((x, y), c)| (x - y) * (x - y) * c).sum() };
    let log_norm: f64 = h.per_dim.iter().map(|v| (v * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();

    // Row b: softmax over j != b of the self kernels, and over the reference.
    let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            let xb = batch.row(b);
            let lw: Vec<f64> =
                (0..bsz).map(|j| if j == b { f64::NEG_INFINITY } else { -0.5 * sq(xb, batch.row(j)) }).collect();
            let lse_p = log_sum_exp(&lw);
            let w: Vec<f64> = lw.iter().map(|l| (l - lse_p).exp()).collect();
            let lv: Vec<f64> = reference.rows().map(|y| -0.5 * sq(xb, y)).collect();
            let lse_q = log_sum_exp(&lv);
            let lp = lse_p - ((bsz - 1) as f64).ln() - log_norm;
            let lq = lse_q - (reference.len() as f64).ln() - log_norm;
            let mut pull_q = vec![0.0; d];
            for (y, l) in reference.rows().zip(&lv) {
                let v = (l - lse_q).exp();
                if v == 0.0 {
                    continue;
                }
                for k in 0..d {
                    pull_q[k] += v * (y[k] - xb[k]);
                }
            }
            (lp - lq, w, pull_q)
        })
        .collect();
    let kl = rows.iter().map(|r| r.0).sum::<f64>() / bsz as f64;
    let scale = 1.0 / bsz as f64;
    let grad: Vec<f64> = (0..bsz)
        .into_par_iter()
        .flat_map_iter(|b| {
            let xb = batch.row(b);
            let mut g = vec![0.0; d];
            for j in 0..bsz {
                if j == b {
                    continue;
                }
                let coef = rows[b].1[j] + rows[j].1[b];
                if coef == 0.0 {
                    continue;
                }
                let xj = batch.row(j);
                for k in 0..d {
                    g[k] += coef * (xj[k] - xb[k]);
                }
            }
            let pull_q = &rows[b].2;
            (0..d).map(|k| scale * (g[k] - pull_q[k]) * inv_h2[k]).collect::<Vec<_>>()
        })
        .collect();
    (kl, grad)
}

/// Trains a direct policy `u = net(t, x)` so the controlled batch tracks the
/// reversed forward marginals.
pub fn train_kl_policy(
    store: &SnapshotStore,
    sys: &dyn ControlAffine<f64>,
    mut net: Mlp,
    domain: &Domain,
    opts: &TrainOpts,
) -> Result<TrainReport> {
    let problem = KlProblem::new(store, sys, domain, &opts.checkpoints(store.horizon()), opts.reference_particles)?;
    if opts.batch_particles < 2 {
        return Err(Error::Config("batch_particles must be at least 2".into()));
    }
    let rng = CounterRng::new(opts.seed, Purpose::Training);
    let source = store.last();
    let mut adam = Adam::new(net.n_params(), opts.adam());
    let mut losses = Vec::with_capacity(opts.iterations);
    for it in 0..opts.iterations {
        let mut r = rng.at(0, it as u64);
        let idx = rand::seq::index::sample(&mut r, source.len(), opts.batch_particles.min(source.len())).into_vec();
        let x0 = source.select(&idx);
        let mut ev = problem.evaluate(&net, &x0, true)?;
        if !ev.loss.is_finite() {
            return Err(Error::Divergence { t: it as f64, pid: 0 });
        }
        losses.push(ev.loss);
        adam.step(net.params_mut(), &mut ev.grad);
    }
    Ok(TrainReport { net, losses })
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-8)` between `analytic`
/// and central differences (step `1e-5`) of `loss` over at most
/// `max_params` randomly chosen coordinates.
pub fn gradcheck(
    params: &[f64],
    analytic: &[f64],
    loss: &dyn Fn(&[f64]) -> f64,
    max_params: usize,
    seed: u64,
) -> f64 {
    const H: f64 = 1e-5;
    let n = params.len();
    let mut r = CounterRng::new(seed, Purpose::Evaluation).sequential();
    let idx = rand::seq::index::sample(&mut r, n, max_params.min(n)).into_vec();
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in idx {
        let orig = p[i];
        p[i] = orig + H;
        let up = loss(&p);
        p[i] = orig - H;
        let dn = loss(&p);
        p[i] = orig;
        let num = (up - dn) / (2.0 * H);
        let err = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
