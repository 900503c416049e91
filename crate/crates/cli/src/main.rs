use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sdctl_core::density::{kl_estimate_with, silverman_bandwidth, KlOptions};
use sdctl_core::scenarios::{self, ScenarioConfig};
use sdctl_core::{io, Error};

#[derive(Parser)]
#[command(name = "sdctl", version, about = "Diffusion-based density steering for control-affine systems")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// Scenario config JSON.
    #[arg(long, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    /// Start from a packaged scenario instead of a config file.
    #[arg(long)]
    scenario: Option<String>,
    /// Dotted override, e.g. `forward.n_particles=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the config seed in every stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the forward process; writes forward.csv and forward_meta.json.
    Forward {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network; writes policy.json and training.csv.
    Train {
        #[command(flatten)]
        src: Source,
        /// Existing forward snapshot CSV; simulated when absent.
        #[arg(long)]
        forward: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out the reverse controller; writes reverse.csv and metrics.json.
    Reverse {
        #[command(flatten)]
        src: Source,
        /// Trained network (not needed for closed_form).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Forward snapshot CSV used for tracking KL.
        #[arg(long)]
        forward: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// KL(a at t_a || b at t_b) with the bandwidth taken from b.
    EvalKl {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        t_a: f64,
        #[arg(long)]
        t_b: f64,
        /// Allowed distance to the nearest stored time.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Evaluate the estimate of a at its own samples without leaving one out.
        #[arg(long)]
        no_loo: bool,
    },
    /// Run a scenario end to end.
    Scenario {
        name: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Runs seeds seed, seed+1, ... into out/seed-<k>.
        #[arg(long, default_value_t = 1)]
        repeat: u64,
        #[arg(long, required_unless_present = "list")]
        out: Option<PathBuf>,
        /// Print the packaged scenario names and exit.
        #[arg(long)]
        list: bool,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    stage: Option<&'static str>,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let stage = match &e {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        };
        let (code, kind) = match e.root() {
            Error::Config(_) | Error::Json(_) | Error::UnsupportedSpec(_) | Error::Controllability { .. } => {
                (2, "config")
            }
            Error::Dimension(_) | Error::Domain(_) | Error::Horizon { .. } => (2, "config"),
            Error::Data(_) | Error::Io(_) | Error::InsufficientSamples { .. } => (3, "data"),
            Error::Divergence { .. } | Error::Stability { .. } | Error::Factorization { .. } | Error::NearSingular { .. } => {
                (4, "numerical")
            }
            Error::Stage { .. } => unreachable!(),
        };
        Failure { code, kind, stage, message: e.to_string() }
    }
}

fn config_failure(message: String) -> Failure {
    Failure { code: 2, kind: "config", stage: None, message }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_config(path: &Path) -> CliResult<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_failure(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| {
        config_failure(format!("{}: invalid JSON at line {} column {}: {e}", path.display(), e.line(), e.column()))
    })?;
    serde_json::from_value(v).map_err(|e| config_failure(format!("{}: {e}", path.display())))
}

fn parse_sets(set: &[String]) -> CliResult<Vec<(String, Value)>> {
    set.iter().map(|s| scenarios::parse_override(s).map_err(Failure::from)).collect()
}

fn resolve(config: Option<&Path>, name: Option<&str>, set: &[String], seed: Option<u64>) -> CliResult<ScenarioConfig> {
    let overrides = parse_sets(set)?;
    let cfg = match (config, name) {
        (Some(p), _) => scenarios::apply_overrides(&read_config(p)?, &overrides)?,
        (None, Some(n)) => scenarios::scenario_by_name(n, &overrides)?,
        (None, None) => return Err(config_failure("either --config or a scenario name is required".into())),
    };
    let seed = seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn load_source(src: &Source) -> CliResult<ScenarioConfig> {
    resolve(src.config.as_deref(), src.scenario.as_deref(), &src.set, src.seed)
}

fn mkdir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::Io(e)))
}

fn files_json(out: &Path, names: &[&str]) -> Value {
    json!({ "files": names.iter().map(|n| out.join(n).display().to_string()).collect::<Vec<_>>() })
}

fn cmd_forward(src: &Source, out: &Path) -> CliResult<Value> {
    let cfg = load_source(src)?;
    let sys = cfg.validate()?;
    mkdir(out)?;
    let (store, meta) = scenarios::run_forward(&cfg, &sys).map_err(|e| e.in_stage("forward"))?;
    io::write_store(&out.join(scenarios::FORWARD_CSV), &store)?;
    io::write_json(&out.join(scenarios::FORWARD_META), &meta)?;
    Ok(files_json(out, &[scenarios::FORWARD_CSV, scenarios::FORWARD_META]))
}

fn forward_store(cfg: &ScenarioConfig, sys: &sdctl_core::systems::System, path: Option<&Path>) -> CliResult<sdctl_core::forward::SnapshotStore> {
    match path {
        Some(p) => {
            let store = io::read_store(p)?;
            if store.dim() != sys.state_dim() {
                return Err(Failure::from(Error::Data(format!(
                    "{} has d = {}, system has {}",
                    p.display(),
                    store.dim(),
                    sys.state_dim()
                ))));
            }
            Ok(store)
        }
        None => Ok(scenarios::run_forward(cfg, sys).map_err(|e| e.in_stage("forward"))?.0),
    }
}

fn cmd_train(src: &Source, forward: Option<&Path>, out: &Path) -> CliResult<Value> {
    let cfg = load_source(src)?;
    let sys = cfg.validate()?;
    if cfg.training.is_none() {
        return Err(config_failure(format!("algorithm {} has nothing to train", cfg.algorithm.label())));
    }
    mkdir(out)?;
    let store = Arc::new(forward_store(&cfg, &sys, forward)?);
    let report = scenarios::run_training(&cfg, &sys, &store).map_err(|e| e.in_stage("training"))?.unwrap();
    io::write_json(&out.join(scenarios::POLICY_JSON), &report.net.to_json())?;
    io::write_losses(&out.join(scenarios::TRAINING_CSV), &report.losses)?;
    Ok(files_json(out, &[scenarios::POLICY_JSON, scenarios::TRAINING_CSV]))
}

fn cmd_reverse(src: &Source, policy: Option<&Path>, forward: Option<&Path>, out: &Path) -> CliResult<Value> {
    let cfg = load_source(src)?;
    let sys = cfg.validate()?;
    let net = policy.map(scenarios::load_policy).transpose()?;
    mkdir(out)?;
    let store = forward.map(io::read_store).transpose()?;
    let report = scenarios::run_reverse(&cfg, &sys, store.as_ref(), net.as_ref()).map_err(|e| e.in_stage("reverse"))?;
    io::write_store(&out.join(scenarios::REVERSE_CSV), &report.trajectory)?;
    let (metrics, _) = scenarios::evaluate(&cfg, store.as_ref(), None, &report).map_err(|e| e.in_stage("metrics"))?;
    io::write_json(&out.join(scenarios::METRICS_JSON), &metrics)?;
    Ok(files_json(out, &[scenarios::REVERSE_CSV, scenarios::METRICS_JSON]))
}

fn cmd_eval_kl(a: &Path, b: &Path, t_a: f64, t_b: f64, tol: f64, loo: bool) -> CliResult<Value> {
    let sa = io::read_store(a)?;
    let sb = io::read_store(b)?;
    let pick = |s: &sdctl_core::forward::SnapshotStore, t: f64, p: &Path| {
        s.find_time(t, tol)
            .map(|k| s.ensembles[k].clone())
            .ok_or_else(|| Failure::from(Error::Data(format!("no snapshot at t = {t} in {}", p.display()))))
    };
    let ea = pick(&sa, t_a, a)?;
    let eb = pick(&sb, t_b, b)?;
    if ea.dim() != eb.dim() {
        return Err(Failure::from(Error::Data(format!("dimension mismatch: {} vs {}", ea.dim(), eb.dim()))));
    }
    let h = silverman_bandwidth(&eb)?;
    let kl = kl_estimate_with(&ea, &eb, &h, KlOptions { leave_one_out: loo });
    Ok(json!({ "kl": kl, "t_a": t_a, "t_b": t_b, "leave_one_out": loo }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_scenario(
    name: Option<&str>,
    config: Option<&Path>,
    set: &[String],
    seed: Option<u64>,
    repeat: u64,
    out: &Path,
) -> CliResult<Value> {
    if repeat == 0 {
        return Err(config_failure("--repeat must be at least 1".into()));
    }
    let base = resolve(config, name, set, seed)?;
    let mut runs = Vec::new();
    for k in 0..repeat {
        let cfg = base.with_seed(base.seed + k);
        let dir = if repeat == 1 { out.to_path_buf() } else { out.join(format!("seed-{}", cfg.seed)) };
        let bundle = scenarios::run_scenario(&cfg, &dir)?;
        runs.push(json!({
            "seed": cfg.seed,
            "out": dir.display().to_string(),
            "pass": bundle.all_pass(),
            "criteria": bundle.criteria,
        }));
    }
    Ok(json!({ "scenario": base.scenario, "runs": runs }))
}

fn run(cli: Cli) -> CliResult<Value> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(config_failure("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| config_failure(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Forward { src, out } => cmd_forward(src, out),
        Command::Train { src, forward, out } => cmd_train(src, forward.as_deref(), out),
        Command::Reverse { src, policy, forward, out } => cmd_reverse(src, policy.as_deref(), forward.as_deref(), out),
        Command::EvalKl { a, b, t_a, t_b, tol, no_loo } => cmd_eval_kl(a, b, *t_a, *t_b, *tol, !no_loo),
        Command::Scenario { list: true, .. } => Ok(json!({ "scenarios": scenarios::SCENARIOS })),
        Command::Scenario { name, config, set, seed, repeat, out, .. } => {
            cmd_scenario(name.as_deref(), config.as_deref(), set, *seed, *repeat, out.as_deref().unwrap())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap());
            ExitCode::SUCCESS
        }
        Err(f) => {
            let obj = json!({ "error": f.kind, "stage": f.stage, "message": f.message, "exit_code": f.code });
            eprintln!("{obj}");
            ExitCode::from(f.code)
        }
    }
}
