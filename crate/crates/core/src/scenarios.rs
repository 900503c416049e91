//! The four packaged experiments and the pipeline that runs a configuration
//! end to end: forward simulation, optional training, reverse rollout,
//! metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::density::{kl_estimate, silverman_bandwidth, Density, DensitySpec, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::forward::{
    sample_in_domain, simulate_forward, BoxBounds, Domain, ForwardConfig, ForwardProcess, Obstacle, SnapshotStore,
    StoreMeta,
};
use crate::io;
use crate::linalg::{eigenvalues, gramian_psd, Matrix};
use crate::mlp::{Mlp, MlpJson};
use crate::reverse::{
    noise_shaping, rollout_reverse, target_split, ControlLaw, Integrator, ReverseConfig, ReversePolicy,
    ReverseReport, TargetSet,
};
use crate::rng::{CounterRng, Purpose};
use crate::score::{KdeScoreField, LtiForwardModel, ScoreField};
use crate::systems::{System, SystemSpec};
use crate::train::{train_kl_policy, train_score_matching, ScoreTarget, TrainOpts, TrainReport};

pub const SCENARIOS: [&str; 4] = ["chained5", "unicycle", "unicycle_obstacles", "lti_bistable"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Direct policy trained on KL tracking through the rollout.
    Alg1,
    /// Network nonholonomic score regressed on KDE targets.
    Alg2,
    /// Closed-form linear score, no training.
    ClosedForm,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::Alg2 => "alg2",
            Algorithm::ClosedForm => "closed_form",
        }
    }
}

fn d_width() -> usize {
    crate::mlp::DEFAULT_WIDTH
}
fn d_hidden() -> usize {
    crate::mlp::DEFAULT_HIDDEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { width: d_width(), hidden: d_hidden() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Reverse rollouts start from this many draws of `p_n`.
    pub n_eval: usize,
    /// Distance tolerance for the target-set fraction.
    pub target_tol: f64,
    /// Radius of the ball around a Gaussian target mean.
    #[serde(default)]
    pub target_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: String,
    pub system: SystemSpec,
    #[serde(default)]
    pub domain: Domain,
    pub p_target: DensitySpec,
    pub p_n: DensitySpec,
    pub forward: ForwardConfig,
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainOpts>,
    #[serde(default)]
    pub network: NetworkConfig,
    pub reverse: ReverseConfig,
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ScenarioConfig {
    /// Copy with the top-level seed pushed into every stage.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.forward.seed = seed;
        c.reverse.seed = seed;
        if let Some(t) = c.training.as_mut() {
            t.seed = seed;
        }
        c
    }

    pub fn validate(&self) -> Result<System> {
        let sys = self.system.build().map_err(|e| match e {
            Error::Controllability { .. } | Error::Dimension(_) => Error::Config(e.to_string()),
            other => other,
        })?;
        let d = sys.state_dim();
        for (name, spec) in [("p_target", &self.p_target), ("p_n", &self.p_n)] {
            if spec.dim() != d {
                return Err(Error::Config(format!("{name} has d = {}, system has {d}", spec.dim())));
            }
            spec.build().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.domain.validate(d)?;
        self.forward.validate()?;
        match self.algorithm {
            Algorithm::ClosedForm if !matches!(self.system, SystemSpec::Lti { .. }) => {
                return Err(Error::Config("closed_form requires an lti system".into()));
            }
            Algorithm::Alg1 | Algorithm::Alg2 if self.training.is_none() => {
                return Err(Error::Config(format!("{} needs training options", self.algorithm.label())));
            }
            _ => {}
        }
        if self.evaluation.n_eval < 2 {
            return Err(Error::Config("n_eval must be at least 2".into()));
        }
        Ok(sys)
    }

    fn lti_matrices(&self) -> Option<(&Matrix, &Matrix)> {
        match &self.system {
            SystemSpec::Lti { a, b } => Some((a, b)),
            _ => None,
        }
    }
}

fn forward_matrices(a: &Matrix, b: &Matrix) -> (Matrix, Matrix) {
    (a.scale(-1.0), b.scale(-1.0))
}

/// Default chained-form experiment: uniform noise on `(-4, 4)^5`, Gaussian
/// target `N(0, 0.5 I)`, score regression.
pub fn scenario_chained5(overrides: &[(String, Value)]) -> Result<ScenarioConfig> {
    let d = 5;
    let mut forward = ForwardConfig::new(6.0, 0.01, 2000, 0);
    forward.snapshot_stride = Some(10);
    let mut training = TrainOpts::new(3000, 128, 0);
    training.step_size = 1e-3;
    let mut reverse = ReverseConfig::new(0.01);
    reverse.integrator = Some(Integrator::Euler);
    reverse.snapshot_stride = Some(10);
    reverse.kl_particles = Some(1000);
    let base = ScenarioConfig {
        scenario: "chained5".into(),
        system: SystemSpec::Chained5,
        domain: Domain::cube(d, 4.0),
        p_target: DensitySpec::gaussian_iso(vec![0.0; d], 0.5),
        p_n: DensitySpec::uniform_cube(d, 4.0),
        forward,
        algorithm: Algorithm::Alg2,
        training: Some(training),
        network: NetworkConfig::default(),
        reverse,
        evaluation: EvalConfig { n_eval: 2000, target_tol: 0.5, target_radius: 1.0 },
        seed: 0,
        notes: vec![],
    };
    finish(base, overrides)
}

/// Default unicycle experiment: Gaussian noise `N(0, I)` with drift
/// `grad log p_n`, target `N(0, 0.2 I)`, KL-trained direct policy.
pub fn scenario_unicycle(overrides: &[(String, Value)]) -> Result<ScenarioConfig> {
    let d = 3;
    let mut forward = ForwardConfig::new(3.0, 0.01, 2000, 0);
    forward.snapshot_stride = Some(10);
    let mut training = TrainOpts::new(3000, 128, 0);
    training.step_size = 1e-3;
    training.reference_particles = Some(128);
    let mut reverse = ReverseConfig::new(0.1);
    reverse.integrator = Some(Integrator::Euler);
    reverse.kl_particles = Some(1000);
    let base = ScenarioConfig {
        scenario: "unicycle".into(),
        system: SystemSpec::Unicycle,
        domain: Domain::unbounded(),
        p_target: DensitySpec::gaussian_iso(vec![0.0; d], 0.2),
        p_n: DensitySpec::gaussian_iso(vec![0.0; d], 1.0),
        forward,
        algorithm: Algorithm::Alg1,
        training: Some(training),
        network: NetworkConfig { width: 32, hidden: 4 },
        reverse,
        evaluation: EvalConfig { n_eval: 2000, target_tol: 0.5, target_radius: 0.5 },
        seed: 0,
        notes: vec![],
    };
    finish(base, overrides)
}

/// Placeholder obstacle layout: three disks of radius 0.8 at distance 2 from
/// the origin, 120 degrees apart, leaving gaps of about 1.9 between them.
pub fn default_obstacles() -> Vec<Obstacle> {
    [90.0f64, 210.0, 330.0]
        .iter()
        .map(|deg| {
            let r = deg.to_radians();
            Obstacle { center: vec![2.0 * r.cos(), 2.0 * r.sin()], radius: 0.8, dims: vec![0, 1] }
        })
        .collect()
}

/// Unicycle among obstacles: uniform noise on `(-4, 4)^2 x (-pi, pi)`,
/// horizon 10, rejection at obstacles.
pub fn scenario_unicycle_obstacles(overrides: &[(String, Value)]) -> Result<ScenarioConfig> {
    let pi = std::f64::consts::PI;
    let (lo, hi) = (vec![-4.0, -4.0, -pi], vec![4.0, 4.0, pi]);
    let mut forward = ForwardConfig::new(10.0, 0.02, 2000, 0);
    forward.snapshot_stride = Some(10);
    let mut training = TrainOpts::new(400, 64, 0);
    training.step_size = 3e-3;
    training.reference_particles = Some(500);
    let mut reverse = ReverseConfig::new(0.2);
    reverse.integrator = Some(Integrator::Euler);
    reverse.kl_particles = Some(1000);
    let base = ScenarioConfig {
        scenario: "unicycle_obstacles".into(),
        system: SystemSpec::Unicycle,
        domain: Domain { bounds: Some(BoxBounds { lo: lo.clone(), hi: hi.clone() }), obstacles: default_obstacles() },
        p_target: DensitySpec::gaussian_iso(vec![0.0; 3], 0.2),
        p_n: DensitySpec::UniformBox { lo, hi },
        forward,
        algorithm: Algorithm::Alg1,
        training: Some(training),
        network: NetworkConfig { width: 32, hidden: 4 },
        reverse,
        evaluation: EvalConfig { n_eval: 2000, target_tol: 0.5, target_radius: 0.5 },
        seed: 0,
        notes: vec!["obstacle centers and radii are placeholders".into()],
    };
    finish(base, overrides)
}

pub const BISTABLE_T_GRAM: f64 = 50.0;

pub fn bistable_matrices() -> (Matrix, Matrix) {
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

/// Linear double integrator steered to two Dirac targets from the
/// finite-horizon stationary Gaussian, closed-form scores.
pub fn scenario_lti_bistable(overrides: &[(String, Value)]) -> Result<ScenarioConfig> {
    let (a, b) = bistable_matrices();
    let mut forward = ForwardConfig::new(5.0, 1e-3, 2000, 0);
    forward.snapshot_stride = Some(100);
    let mut reverse = ReverseConfig::new(1e-3);
    reverse.integrator = Some(Integrator::Rk4);
    reverse.snapshot_stride = Some(100);
    reverse.kl_particles = Some(1000);
    let base = ScenarioConfig {
        scenario: "lti_bistable".into(),
        system: SystemSpec::Lti { a, b },
        domain: Domain::unbounded(),
        p_target: DensitySpec::DiracMixture {
            points: vec![vec![-5.0, 0.0, 5.0, 0.0], vec![5.0, 0.0, -5.0, 0.0]],
            weights: vec![0.5, 0.5],
        },
        p_n: DensitySpec::gaussian_iso(vec![0.0; 4], 1.0),
        forward,
        algorithm: Algorithm::ClosedForm,
        training: None,
        network: NetworkConfig::default(),
        reverse,
        evaluation: EvalConfig { n_eval: 2000, target_tol: 0.5, target_radius: 0.0 },
        seed: 0,
        notes: vec![],
    };
    let touches_pn = overrides.iter().any(|(k, _)| k == "p_n" || k.starts_with("p_n."));
    let mut cfg = finish(base, overrides)?;
    let (a, b) = cfg.lti_matrices().map(|(a, b)| (a.clone(), b.clone())).unwrap();
    let (af, bf) = forward_matrices(&a, &b);
    let max_re = eigenvalues(&af)?.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    if max_re > -1e-9 {
        cfg.notes.push(format!(
            "forward drift matrix is not Hurwitz (largest real part {max_re:.3e}); p_n uses the finite-horizon Gramian at T = {BISTABLE_T_GRAM}"
        ));
    }
    if !touches_pn {
        let s = cfg.forward.noise_scale;
        let q = gramian_psd(&af, &bf, BISTABLE_T_GRAM)?.scale(s * s).symmetrized();
        cfg.p_n = DensitySpec::Gaussian { mean: vec![0.0; a.rows()], cov: q.into() };
    }
    Ok(cfg)
}

pub fn scenario_by_name(name: &str, overrides: &[(String, Value)]) -> Result<ScenarioConfig> {
    match name {
        "chained5" => scenario_chained5(overrides),
        "unicycle" => scenario_unicycle(overrides),
        "unicycle_obstacles" => scenario_unicycle_obstacles(overrides),
        "lti_bistable" => scenario_lti_bistable(overrides),
        other => Err(Error::Config(format!("unknown scenario `{other}`; known: {}", SCENARIOS.join(", ")))),
    }
}

/// Parses `a.b.c=value`; the value is JSON when it parses, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Sets a dotted path in a JSON object, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().unwrap()
            }
            _ => return Err(Error::Config(format!("override path `{path}` crosses a non-object at `{p}`"))),
        };
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

pub fn apply_overrides(cfg: &ScenarioConfig, overrides: &[(String, Value)]) -> Result<ScenarioConfig> {
    let mut v = serde_json::to_value(cfg)?;
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone())?;
    }
    let cfg: ScenarioConfig =
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
    // Keys serde ignored never make it back out.
    let back = serde_json::to_value(&cfg)?;
    for (k, _) in overrides {
        if k.split('.').try_fold(&back, |cur, p| cur.get(p)).is_none() {
            return Err(Error::Config(format!("unknown override key `{k}`")));
        }
    }
    Ok(cfg)
}

fn finish(base: ScenarioConfig, overrides: &[(String, Value)]) -> Result<ScenarioConfig> {
    let cfg = apply_overrides(&base, overrides)?;
    let seed = cfg.seed;
    Ok(cfg.with_seed(seed))
}

fn x_scale(domain: &Domain, d: usize) -> Vec<f64> {
    domain.half_widths().unwrap_or_else(|| vec![1.0; d])
}

/// Forward stage.
pub fn run_forward(cfg: &ScenarioConfig, sys: &System) -> Result<(SnapshotStore, StoreMeta)> {
    let p_start = cfg.p_target.build()?;
    let pn = cfg.p_n.build()?;
    let s = cfg.forward.noise_scale;
    let c = 0.5 * s * s;
    let store = match cfg.algorithm {
        Algorithm::Alg1 => {
            let drift = |x: &[f64]| -> Vec<f64> {
                match &pn {
                    Density::UniformBox { .. } => vec![0.0; x.len()],
                    other => other.analytic_score(x).unwrap_or_else(|_| vec![0.0; x.len()]).iter().map(|v| c * v).collect(),
                }
            };
            simulate_forward(&ForwardProcess::Generic { drift: &drift }, &p_start, &cfg.forward, &cfg.domain)?
        }
        Algorithm::Alg2 => {
            let control = |x: &[f64]| noise_shaping(&**sys, &pn, s, x);
            simulate_forward(&ForwardProcess::Channels { sys: &**sys, control: &control }, &p_start, &cfg.forward, &cfg.domain)?
        }
        Algorithm::ClosedForm => {
            let m = sys.input_dim();
            let control = move |_: &[f64]| vec![0.0; m];
            simulate_forward(&ForwardProcess::Channels { sys: &**sys, control: &control }, &p_start, &cfg.forward, &cfg.domain)?
        }
    };
    let process = match cfg.algorithm {
        Algorithm::Alg1 => "generic",
        _ => "channels",
    };
    let meta = StoreMeta {
        process: process.into(),
        config: cfg.forward.clone(),
        seed: cfg.forward.seed,
        n_steps: cfg.forward.n_steps(),
        effective_dt: cfg.forward.effective_dt(),
        snapshot_stride: cfg.forward.resolved_stride(store.dim()),
        state_dim: store.dim(),
    };
    Ok((store, meta))
}

/// Training stage; `None` for the closed-form path.
pub fn run_training(cfg: &ScenarioConfig, sys: &System, store: &Arc<SnapshotStore>) -> Result<Option<TrainReport>> {
    let Some(opts) = &cfg.training else { return Ok(None) };
    let d = sys.state_dim();
    let m = sys.input_dim();
    let net = Mlp::glorot(
        d,
        m,
        cfg.network.width,
        cfg.network.hidden,
        cfg.forward.horizon,
        x_scale(&cfg.domain, d),
        cfg.seed,
    )?;
    let report = match cfg.algorithm {
        Algorithm::Alg1 => train_kl_policy(store, &**sys, net, &cfg.domain, opts)?,
        Algorithm::Alg2 => {
            let field = KdeScoreField::new(Arc::clone(store))?;
            train_score_matching(store, ScoreTarget::Kde { field: &field, sys: &**sys }, net, opts)?
        }
        Algorithm::ClosedForm => return Ok(None),
    };
    Ok(Some(report))
}

pub fn build_policy(cfg: &ScenarioConfig, sys: &System, net: Option<&Mlp>) -> Result<ReversePolicy> {
    let horizon = cfg.forward.horizon;
    let s = cfg.forward.noise_scale;
    let need_net = || net.cloned().map(Arc::new).ok_or_else(|| Error::Config("a trained policy is required".into()));
    let (law, epsilon) = match cfg.algorithm {
        Algorithm::ClosedForm => {
            let (a, b) = cfg.lti_matrices().unwrap();
            let (af, bf) = forward_matrices(a, b);
            let model = LtiForwardModel::new(af, bf, s, &cfg.p_target)?;
            (ControlLaw::LtiClosedForm { model: Arc::new(model), b: b.clone() }, cfg.reverse.dt)
        }
        Algorithm::Alg2 => (ControlLaw::DriftlessScore { score: ScoreField::Neural(need_net()?), pn: cfg.p_n.build()? }, 0.0),
        Algorithm::Alg1 => (ControlLaw::DirectNeural(need_net()?), 0.0),
    };
    ReversePolicy::new(law, Arc::clone(sys), horizon, epsilon, s)
}

/// Reverse-stage start ensemble: `n_eval` draws of `p_n` inside the domain.
pub fn reverse_start(cfg: &ScenarioConfig) -> Result<ParticleEnsemble> {
    let mut rng = CounterRng::new(cfg.seed, Purpose::Evaluation).sequential();
    sample_in_domain(&cfg.p_n.build()?, cfg.evaluation.n_eval, &cfg.domain, &mut rng)
}

pub fn run_reverse(
    cfg: &ScenarioConfig,
    sys: &System,
    store: Option<&SnapshotStore>,
    net: Option<&Mlp>,
) -> Result<ReverseReport> {
    let policy = build_policy(cfg, sys, net)?;
    let init = reverse_start(cfg)?;
    let targets = TargetSet::from_density(&cfg.p_target, cfg.evaluation.target_radius);
    rollout_reverse(&policy, &init, &cfg.reverse, &cfg.domain, store, Some((&targets, cfg.evaluation.target_tol)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

fn crit(value: f64, threshold: impl Into<String>, pass: bool) -> Criterion {
    Criterion { value, threshold: threshold.into(), pass }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Leading and trailing window means of a training curve.
pub fn curve_windows(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len() / 2).max(1).min(losses.len());
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}

fn count_in_obstacles(store: &SnapshotStore, domain: &Domain) -> usize {
    store.ensembles.iter().map(|e| e.rows().filter(|x| domain.in_obstacle(x)).count()).sum()
}

/// KL of the reverse start and terminal ensembles against fresh draws of
/// `p_target`, bandwidth from those draws.
pub fn target_kl(cfg: &ScenarioConfig, initial: &ParticleEnsemble, terminal: &ParticleEnsemble) -> Result<Option<(f64, f64)>> {
    let pt = cfg.p_target.build()?;
    if matches!(pt, Density::DiracMixture { .. }) {
        return Ok(None);
    }
    let mut rng = CounterRng::new(cfg.seed, Purpose::Reference).sequential();
    let reference = pt.sample(cfg.evaluation.n_eval, &mut rng);
    let h = silverman_bandwidth(&reference)?;
    Ok(Some((kl_estimate(initial, &reference, &h), kl_estimate(terminal, &reference, &h))))
}

/// Scenario metrics and pass/fail flags.
pub fn evaluate(
    cfg: &ScenarioConfig,
    forward: Option<&SnapshotStore>,
    training: Option<&TrainReport>,
    report: &ReverseReport,
) -> Result<(Value, BTreeMap<String, Criterion>)> {
    let initial = report.trajectory.first();
    let terminal = report.terminal();
    let kl = target_kl(cfg, initial, terminal)?;
    let mut criteria = BTreeMap::new();
    let violations = (forward.map(|f| count_in_obstacles(f, &cfg.domain)), count_in_obstacles(&report.trajectory, &cfg.domain));
    let windows = training.map(|t| curve_windows(&t.losses, 100));
    let mut split = None;

    match cfg.scenario.as_str() {
        "lti_bistable" => {
            let frac = report.target_fraction.unwrap_or(0.0);
            criteria.insert("target_fraction".into(), crit(frac, ">= 0.99", frac >= 0.99));
            if let DensitySpec::DiracMixture { points, .. } = &cfg.p_target {
                let sp = target_split(terminal, points, cfg.evaluation.target_tol);
                let share = if frac > 0.0 { sp[0] / frac } else { 0.0 };
                criteria.insert("split".into(), crit(share, "0.5 +/- 0.05", (share - 0.5).abs() <= 0.05));
                split = Some(sp);
            }
        }
        "chained5" => {
            if let Some((k0, k1)) = kl {
                let r = k1 / k0;
                criteria.insert("target_kl_ratio".into(), crit(r, "<= 0.2", r <= 0.2));
            }
            let diag: Vec<f64> = (0..terminal.dim()).map(|j| report.terminal_cov[(j, j)]).collect();
            let worst = diag.iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
            let ok = diag.iter().all(|v| (0.25..=1.0).contains(v));
            criteria.insert("terminal_cov_diag".into(), crit(worst, "all in [0.25, 1.0]", ok));
        }
        "unicycle" => {
            if let Some((lead, trail)) = windows {
                let r = trail / lead;
                criteria.insert("training_curve_ratio".into(), crit(r, "< 0.5", r < 0.5));
            }
            if let Some((k0, k1)) = kl {
                let r = k1 / k0;
                criteria.insert("target_kl_ratio".into(), crit(r, "< 0.3", r < 0.3));
            }
        }
        "unicycle_obstacles" => {
            let total = (violations.0.unwrap_or(0) + violations.1) as f64;
            criteria.insert("obstacle_violations".into(), crit(total, "== 0", total == 0.0));
            let off = report.terminal_mean[..2].iter().map(|v| v * v).sum::<f64>().sqrt();
            criteria.insert("terminal_mean_offset".into(), crit(off, "<= 0.5", off <= 0.5));
        }
        _ => {}
    }

    let metrics = json!({
        "scenario": cfg.scenario,
        "algorithm": cfg.algorithm.label(),
        "seed": cfg.seed,
        "kde_bandwidth": "silverman",
        "forward": {
            "n_steps": cfg.forward.n_steps(),
            "effective_dt": cfg.forward.effective_dt(),
            "snapshot_stride": cfg.forward.resolved_stride(report.terminal().dim()),
            "noise_scale": cfg.forward.noise_scale,
            "n_particles": cfg.forward.n_particles,
        },
        "reverse": report.metrics(),
        "target_kl": kl.map(|(a, b)| json!({"initial": a, "terminal": b, "ratio": b / a})),
        "training": training.map(|t| {
            let (lead, trail) = windows.unwrap();
            json!({
                "iterations": t.losses.len(),
                "leading_mean": lead,
                "trailing_mean": trail,
                "final": t.losses.last().copied(),
            })
        }),
        "target_split": split,
        "obstacle_violations": {"forward": violations.0, "reverse": violations.1},
        "criteria": criteria,
        "notes": cfg.notes,
    });
    Ok((metrics, criteria))
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub criteria: BTreeMap<String, Criterion>,
    pub metrics: Value,
}

impl ReportBundle {
    pub fn all_pass(&self) -> bool {
        self.criteria.values().all(|c| c.pass)
    }
}

pub const FORWARD_CSV: &str = "forward.csv";
pub const FORWARD_META: &str = "forward_meta.json";
pub const POLICY_JSON: &str = "policy.json";
pub const TRAINING_CSV: &str = "training.csv";
pub const REVERSE_CSV: &str = "reverse.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const CONFIG_JSON: &str = "config.json";

/// Runs every stage and writes the bundle into `out_dir`.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: &Path) -> Result<ReportBundle> {
    let sys = cfg.validate().map_err(|e| e.in_stage("config"))?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut emit = |name: &str| {
        let p = out_dir.join(name);
        files.push(p.clone());
        p
    };
    io::write_json(&emit(CONFIG_JSON), cfg)?;

    let (store, meta) = run_forward(cfg, &sys).map_err(|e| e.in_stage("forward"))?;
    io::write_store(&emit(FORWARD_CSV), &store)?;
    io::write_json(&emit(FORWARD_META), &meta)?;
    let store = Arc::new(store);

    let training = run_training(cfg, &sys, &store).map_err(|e| e.in_stage("training"))?;
    if let Some(t) = &training {
        io::write_json(&emit(POLICY_JSON), &t.net.to_json())?;
        io::write_losses(&emit(TRAINING_CSV), &t.losses)?;
    }

    let report =
        run_reverse(cfg, &sys, Some(&store), training.as_ref().map(|t| &t.net)).map_err(|e| e.in_stage("reverse"))?;
    io::write_store(&emit(REVERSE_CSV), &report.trajectory)?;

    let (metrics, criteria) = evaluate(cfg, Some(&store), training.as_ref(), &report).map_err(|e| e.in_stage("metrics"))?;
    io::write_json(&emit(METRICS_JSON), &metrics)?;
    Ok(ReportBundle { out_dir: out_dir.to_path_buf(), files, criteria, metrics })
}

/// Loads a policy written by [`run_scenario`] or the train command.
pub fn load_policy(path: &Path) -> Result<Mlp> {
    let j: MlpJson = io::read_json(path)?;
    Mlp::from_json(&j)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_setup() {
        let c = scenario_chained5(&[]).unwrap();
        assert_eq!(c.forward.horizon, 6.0);
        assert_eq!(c.domain.bounds.as_ref().unwrap().lo, vec![-4.0; 5]);
        assert_eq!(c.algorithm, Algorithm::Alg2);
        let u = scenario_unicycle(&[]).unwrap();
        assert_eq!(u.algorithm, Algorithm::Alg1);
        let o = scenario_unicycle_obstacles(&[]).unwrap();
        assert_eq!(o.forward.horizon, 10.0);
        assert_eq!(o.domain.obstacles.len(), 3);
        let b = scenario_lti_bistable(&[]).unwrap();
        assert_eq!(b.algorithm, Algorithm::ClosedForm);
        assert!(b.notes.iter().any(|n| n.contains("not Hurwitz")));
        if let DensitySpec::DiracMixture { points, weights } = &b.p_target {
            assert_eq!(points[0], vec![-5.0, 0.0, 5.0, 0.0]);
            assert_eq!(weights, &vec![0.5, 0.5]);
        } else {
            panic!("bistable target must be a Dirac mixture");
        }
    }

    #[test]
    fn overrides_are_honored() {
        let c = scenario_chained5(&[parse_override("forward.n_particles=500").unwrap()]).unwrap();
        assert_eq!(c.forward.n_particles, 500);
        let c = scenario_chained5(&[parse_override("domain.box.lo=[-2,-2,-2,-2,-2]").unwrap(),
            parse_override("domain.box.hi=[2,2,2,2,2]").unwrap()]).unwrap();
        assert_eq!(x_scale(&c.domain, 5), vec![2.0; 5]);
        let c = scenario_unicycle(&[parse_override("seed=9").unwrap()]).unwrap();
        assert_eq!((c.forward.seed, c.reverse.seed, c.training.unwrap().seed), (9, 9, 9));
        assert!(scenario_unicycle(&[parse_override("forward.dt=\"x\"").unwrap()]).is_err());
        assert!(scenario_by_name("nope", &[]).is_err());
        let typo = scenario_chained5(&[parse_override("forward.n_particle=500").unwrap()]);
        assert!(matches!(typo, Err(Error::Config(m)) if m.contains("forward.n_particle")));
    }

    #[test]
    fn zero_obstacles_reduce_to_plain_unicycle_with_uniform_noise() {
        let c = scenario_unicycle_obstacles(&[("domain.obstacles".into(), json!([]))]).unwrap();
        assert!(c.domain.obstacles.is_empty());
        assert!(matches!(c.p_n, DensitySpec::UniformBox { .. }));
        assert_eq!(c.system, SystemSpec::Unicycle);
    }

    #[test]
    fn closed_form_requires_lti() {
        let c = scenario_chained5(&[("algorithm".into(), json!("closed_form"))]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        for name in SCENARIOS {
            let c = scenario_by_name(name, &[]).unwrap();
            let text = serde_json::to_string(&c).unwrap();
            let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, c, "{name}");
        }
    }

    #[test]
    fn curve_window_means() {
        let l: Vec<f64> = (0..300).map(|i| 300.0 - i as f64).collect();
        let (a, b) = curve_windows(&l, 100);
        assert_eq!((a, b), (250.5, 50.5));
    }
}
