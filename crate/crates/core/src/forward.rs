//! Forward noising processes: the generic full-state diffusion and the
//! channel (Stratonovich) diffusion of a control-affine system, with mirror
//! reflection on a box and one-step rejection at obstacles.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{Density, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{CounterRng, Purpose};
use crate::systems::ControlAffine;

/// Values kept in memory across all snapshots before striding kicks in.
pub const SNAPSHOT_BUDGET: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Open ball over a subset of coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub radius: f64,
    pub dims: Vec<usize>,
}

impl Obstacle {
    /// Strict interior only; the boundary circle counts as free space.
    pub fn contains(&self, x: &[f64]) -> bool {
        let r2: f64 = self.dims.iter().zip(&self.center).map(|(&j, &c)| (x[j] - c) * (x[j] - c)).sum();
        r2 < self.radius * self.radius
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoxBounds>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl Domain {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn cube(d: usize, half_width: f64) -> Self {
        Self { bounds: Some(BoxBounds { lo: vec![-half_width; d], hi: vec![half_width; d] }), obstacles: vec![] }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let Some(b) = &self.bounds {
            if b.lo.len() != d || b.hi.len() != d {
                return Err(Error::Config(format!("box has {} / {} bounds for d = {d}", b.lo.len(), b.hi.len())));
            }
            if b.lo.iter().zip(&b.hi).any(|(a, c)| !(a < c)) {
                return Err(Error::Config("box needs lo < hi componentwise".into()));
            }
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) {
                return Err(Error::Config(format!("obstacle {k} has non-positive radius")));
            }
            if o.dims.is_empty() || o.dims.len() != o.center.len() || o.dims.iter().any(|&j| j >= d) {
                return Err(Error::Config(format!("obstacle {k} has invalid dims for d = {d}")));
            }
        }
        Ok(())
    }

    pub fn in_obstacle(&self, x: &[f64]) -> bool {
        self.obstacles.iter().any(|o| o.contains(x))
    }

    /// Inside the closed box and outside every open obstacle ball.
    pub fn admits(&self, x: &[f64]) -> bool {
        self.in_box(x) && !self.in_obstacle(x)
    }

    /// Half the box width per dimension, used to normalize network inputs.
    pub fn half_widths(&self) -> Option<Vec<f64>> {
        self.bounds.as_ref().map(|b| b.lo.iter().zip(&b.hi).map(|(l, h)| 0.5 * (h - l)).collect())
    }

    fn in_box(&self, x: &[f64]) -> bool {
        self.bounds.as_ref().is_none_or(|b| x.iter().zip(b.lo.iter().zip(&b.hi)).all(|(v, (l, h))| v >= l && v <= h))
    }

    /// Box reflection, then obstacle rejection, of a proposed step.
    pub fn settle(&self, prev: &[f64], mut y: Vec<f64>) -> Vec<f64> {
        if let Some(b) = &self.bounds {
            reflect_box_in_place(&mut y, &b.lo, &b.hi);
        }
        obstacle_reject(prev, y, self)
    }
}

fn fold(v: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&v) || !v.is_finite() {
        return v;
    }
    let w = hi - lo;
    let y = (v - lo).rem_euclid(2.0 * w);
    let y = if y > w { 2.0 * w - y } else { y };
    (lo + y).clamp(lo, hi)
}

fn reflect_box_in_place(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = fold(*v, l, h);
    }
}

/// Folds every coordinate into `[lo_j, hi_j]` by repeated mirror reflection.
pub fn reflect_box(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    reflect_box_in_place(&mut y, lo, hi);
    y
}

/// `candidate` unless it lies in an obstacle, in which case `prev`.
pub fn obstacle_reject(prev: &[f64], candidate: Vec<f64>, domain: &Domain) -> Vec<f64> {
    if domain.in_obstacle(&candidate) {
        prev.to_vec()
    } else {
        candidate
    }
}

fn default_noise_scale() -> f64 {
    std::f64::consts::SQRT_2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub horizon: f64,
    pub dt: f64,
    pub n_particles: usize,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ForwardConfig {
    pub fn new(horizon: f64, dt: f64, n_particles: usize, seed: u64) -> Self {
        Self { horizon, dt, n_particles, noise_scale: default_noise_scale(), snapshot_stride: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= self.horizon && self.horizon.is_finite()) {
            return Err(Error::Config(format!("need 0 < dt <= T, got dt = {}, T = {}", self.dt, self.horizon)));
        }
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be positive".into()));
        }
        if self.snapshot_stride == Some(0) {
            return Err(Error::Config("snapshot_stride must be at least 1".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Number of steps; `dt` is shrunk slightly when it does not divide `T`.
    pub fn n_steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn effective_dt(&self) -> f64 {
        self.horizon / self.n_steps() as f64
    }

    pub fn resolved_stride(&self, d: usize) -> usize {
        self.snapshot_stride.unwrap_or_else(|| {
            let steps = self.n_steps();
            let total = d * self.n_particles * (steps + 1);
            if total <= SNAPSHOT_BUDGET {
                1
            } else {
                (d * self.n_particles * steps).div_ceil(SNAPSHOT_BUDGET)
            }
        })
    }
}

/// Step indices at which snapshots are stored: 0, every `stride`, and the last.
pub fn snapshot_steps(n_steps: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=n_steps).step_by(stride).collect();
    if *v.last().unwrap() != n_steps {
        v.push(n_steps);
    }
    v
}

/// Time-indexed forward marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotStore {
    pub times: Vec<f64>,
    pub ensembles: Vec<ParticleEnsemble>,
}

impl SnapshotStore {
    pub fn new(times: Vec<f64>, ensembles: Vec<ParticleEnsemble>) -> Result<Self> {
        if times.is_empty() || times.len() != ensembles.len() {
            return Err(Error::Data("snapshot store needs one ensemble per time".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Data("snapshot times must be strictly increasing".into()));
        }
        let (n, d) = (ensembles[0].len(), ensembles[0].dim());
        if ensembles.iter().any(|e| e.len() != n || e.dim() != d) {
            return Err(Error::Data("all snapshots must share n and d".into()));
        }
        Ok(Self { times, ensembles })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.ensembles[0].dim()
    }

    pub fn n_particles(&self) -> usize {
        self.ensembles[0].len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn first(&self) -> &ParticleEnsemble {
        &self.ensembles[0]
    }

    pub fn last(&self) -> &ParticleEnsemble {
        self.ensembles.last().unwrap()
    }

    /// Index of the snapshot nearest to `t`; ties go to the earlier one.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            return 0;
        }
        if k == self.times.len() {
            return k - 1;
        }
        if t - self.times[k - 1] <= self.times[k] - t {
            k - 1
        } else {
            k
        }
    }

    pub fn nearest(&self, t: f64) -> &ParticleEnsemble {
        &self.ensembles[self.nearest_index(t)]
    }

    /// Index of a snapshot whose time equals `t` to within `tol`.
    pub fn find_time(&self, t: f64, tol: f64) -> Option<usize> {
        let k = self.nearest_index(t);
        ((self.times[k] - t).abs() <= tol).then_some(k)
    }

    /// CSV with header `t,pid,x0,..`, rows sorted by `(t, pid)`, 17
    /// significant digits, LF line endings.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let d = self.dim();
        let mut header = String::from("t,pid");
        for j in 0..d {
            header.push_str(&format!(",x{j}"));
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        let mut line = String::new();
        for (t, e) in self.times.iter().zip(&self.ensembles) {
            for (pid, row) in e.rows().enumerate() {
                line.clear();
                line.push_str(&format!("{t:.16e},{pid}"));
                for v in row {
                    line.push_str(&format!(",{v:.16e}"));
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty snapshot CSV".into()))??;
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < 3 || cols[0] != "t" || cols[1] != "pid" {
            return Err(Error::Data(format!("unexpected snapshot CSV header `{header}`")));
        }
        for (j, c) in cols[2..].iter().enumerate() {
            if *c != format!("x{j}") {
                return Err(Error::Data(format!("missing column x{j}")));
            }
        }
        let d = cols.len() - 2;
        let mut times: Vec<f64> = Vec::new();
        let mut blocks: Vec<Vec<f64>> = Vec::new();
        let mut expect_pid = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Data(format!("line {}: {what}", lineno + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(bad("wrong number of fields"));
            }
            let t: f64 = fields[0].parse().map_err(|_| bad("bad time"))?;
            let pid: usize = fields[1].parse().map_err(|_| bad("bad pid"))?;
            if times.last() != Some(&t) {
                if times.last().is_some_and(|&p| p >= t) {
                    return Err(bad("times not increasing"));
                }
                times.push(t);
                blocks.push(Vec::new());
                expect_pid = 0;
            }
            if pid != expect_pid {
                return Err(bad("pids not sorted from 0"));
            }
            expect_pid += 1;
            let block = blocks.last_mut().unwrap();
            for f in &fields[2..] {
                block.push(f.parse().map_err(|_| bad("bad state value"))?);
            }
        }
        let ensembles = times
            .iter()
            .zip(blocks)
            .map(|(&t, s)| ParticleEnsemble::new(t, d, s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(times, ensembles)
    }
}

/// Side-car metadata written next to a snapshot CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub process: String,
    pub config: ForwardConfig,
    pub seed: u64,
    pub n_steps: usize,
    pub effective_dt: f64,
    pub snapshot_stride: usize,
    pub state_dim: usize,
}

/// Forward drift specification.
pub enum ForwardProcess<'a> {
    /// `dx = V(x) dt + s dW` in the full state space.
    Generic { drift: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync) },
    /// `dx = (-g0 + G v) dt + s G o dW`, one Brownian component per channel.
    Channels { sys: &'a dyn ControlAffine<f64>, control: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync) },
}

impl ForwardProcess<'_> {
    pub fn noise_dim(&self, d: usize) -> usize {
        match self {
            ForwardProcess::Generic { .. } => d,
            ForwardProcess::Channels { sys, .. } => sys.input_dim(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ForwardProcess::Generic { .. } => "generic",
            ForwardProcess::Channels { .. } => "channels",
        }
    }
}

/// Euler-Maruyama step of the generic process followed by reflection and
/// rejection. `noise` is `N(0, dt I)`.
pub fn step_generic(
    x: &[f64],
    drift: &dyn Fn(&[f64]) -> Vec<f64>,
    dt: f64,
    noise_scale: f64,
    domain: &Domain,
    noise: &[f64],
) -> Vec<f64> {
    let v = drift(x);
    let y = x.iter().zip(&v).zip(noise).map(|((xi, vi), n)| xi + vi * dt + noise_scale * n).collect();
    domain.settle(x, y)
}

/// Euler-Heun step of the channel process followed by reflection and
/// rejection. `noise` is `N(0, dt I_m)`.
pub fn step_channels(
    sys: &dyn ControlAffine<f64>,
    x: &[f64],
    control: &dyn Fn(&[f64]) -> Vec<f64>,
    dt: f64,
    noise_scale: f64,
    domain: &Domain,
    noise: &[f64],
) -> Vec<f64> {
    let d = x.len();
    let g = sys.channel_matrix(x);
    let mut a = vec![0.0; d];
    sys.drift(x, &mut a);
    let v = control(x);
    let gv = g.matvec(&v);
    let base: Vec<f64> = (0..d).map(|k| x[k] + (gv[k] - a[k]) * dt).collect();
    let gn = g.matvec(noise);
    let predictor: Vec<f64> = (0..d).map(|k| base[k] + noise_scale * gn[k]).collect();
    let g_tilde: Matrix = sys.channel_matrix(&predictor);
    let gn_tilde = g_tilde.matvec(noise);
    let y = (0..d).map(|k| base[k] + noise_scale * 0.5 * (gn[k] + gn_tilde[k])).collect();
    domain.settle(x, y)
}

/// Draws the start ensemble from the initial-sample stream of `seed`.
pub fn sample_start(p_start: &Density, n: usize, domain: &Domain, seed: u64) -> Result<ParticleEnsemble> {
    let mut rng = CounterRng::new(seed, Purpose::InitialSample).sequential();
    sample_in_domain(p_start, n, domain, &mut rng)
}

/// `n` draws from `p` restricted to the domain. Continuous densities are
/// resampled when a draw lands in an obstacle or outside the box; Dirac
/// points there are rejected.
pub fn sample_in_domain<R: rand::Rng + ?Sized>(
    p: &Density,
    n: usize,
    domain: &Domain,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    let d = p.dim();
    domain.validate(d)?;
    if let Density::DiracMixture { points, .. } = p {
        if let Some(pt) = points.iter().find(|pt| !domain.admits(pt)) {
            return Err(Error::Config(format!("start point {pt:?} lies inside an obstacle or outside the box")));
        }
    }
    const MAX_TRIES: usize = 10_000;
    let mut states = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut tries = 0;
        loop {
            let x = p.draw(rng);
            if domain.admits(&x) {
                states.extend(x);
                break;
            }
            tries += 1;
            if tries >= MAX_TRIES {
                return Err(Error::Config("start density has almost no mass inside the domain".into()));
            }
        }
    }
    ParticleEnsemble::new(0.0, d, states)
}

/// Simulates `cfg.n_particles` forward trajectories from `p_start`.
pub fn simulate_forward(
    process: &ForwardProcess<'_>,
    p_start: &Density,
    cfg: &ForwardConfig,
    domain: &Domain,
) -> Result<SnapshotStore> {
    cfg.validate()?;
    let init = sample_start(p_start, cfg.n_particles, domain, cfg.seed)?;
    simulate_from(process, &init, cfg, domain)
}

/// Simulates forward trajectories from a given start ensemble.
pub fn simulate_from(
    process: &ForwardProcess<'_>,
    init: &ParticleEnsemble,
    cfg: &ForwardConfig,
    domain: &Domain,
) -> Result<SnapshotStore> {
    cfg.validate()?;
    let d = init.dim();
    if let ForwardProcess::Channels { sys, .. } = process {
        if sys.state_dim() != d {
            return Err(Error::Config(format!("system has d = {}, start density has d = {d}", sys.state_dim())));
        }
    }
    domain.validate(d)?;
    if let Some(pid) = init.rows().position(|x| domain.in_obstacle(x)) {
        return Err(Error::Config(format!("particle {pid} starts inside an obstacle")));
    }
    let n_steps = cfg.n_steps();
    let dt = cfg.effective_dt();
    let stride = cfg.resolved_stride(d);
    let keep = snapshot_steps(n_steps, stride);
    let noise_dim = process.noise_dim(d);
    let rng = CounterRng::new(cfg.seed, Purpose::ForwardNoise);
    let sqrt_dt = dt.sqrt();

    let trajectories: Vec<Vec<f64>> = (0..init.len())
        .into_par_iter()
        .map(|pid| {
            let mut out = Vec::with_capacity(keep.len() * d);
            let mut x = init.row(pid).to_vec();
            out.extend_from_slice(&x);
            let mut noise = vec![0.0; noise_dim];
            let mut next_keep = 1;
            for step in 0..n_steps {
                rng.normals(pid as u64, step as u64, &mut noise);
                noise.iter_mut().for_each(|z| *z *= sqrt_dt);
                x = match process {
                    ForwardProcess::Generic { drift } => step_generic(&x, drift, dt, cfg.noise_scale, domain, &noise),
                    ForwardProcess::Channels { sys, control } => {
                        step_channels(*sys, &x, control, dt, cfg.noise_scale, domain, &noise)
                    }
                };
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { t: (step + 1) as f64 * dt, pid });
                }
                if next_keep < keep.len() && keep[next_keep] == step + 1 {
                    out.extend_from_slice(&x);
                    next_keep += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let n = init.len();
    let mut times = Vec::with_capacity(keep.len());
    let mut ensembles = Vec::with_capacity(keep.len());
    for (k, &s) in keep.iter().enumerate() {
        let t = if s == n_steps { cfg.horizon } else { s as f64 * dt };
        let mut states = Vec::with_capacity(n * d);
        for traj in &trajectories {
            states.extend_from_slice(&traj[k * d..(k + 1) * d]);
        }
        times.push(t);
        ensembles.push(ParticleEnsemble::new(t, d, states)?);
    }
    SnapshotStore::new(times, ensembles)
}
