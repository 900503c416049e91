use serde_json::json;

use sdctl_core::error::Error;
use sdctl_core::io;
use sdctl_core::scenarios::{
    load_policy, run_scenario, scenario_by_name, scenario_lti_bistable, scenario_unicycle_obstacles, ScenarioConfig,
    CONFIG_JSON, FORWARD_CSV, FORWARD_META, METRICS_JSON, POLICY_JSON, REVERSE_CSV, TRAINING_CSV,
};

fn tiny_chained5() -> ScenarioConfig {
    let o = |k: &str, v: serde_json::Value| (k.to_string(), v);
    scenario_by_name(
        "chained5",
        &[
            o("forward.n_particles", json!(200)),
            o("forward.horizon", json!(1.0)),
            o("training.iterations", json!(200)),
            o("training.batch_particles", json!(32)),
            o("network.width", json!(16)),
            o("network.hidden", json!(2)),
            o("reverse.dt", json!(0.02)),
            o("reverse.kl_particles", json!(200)),
            o("evaluation.n_eval", json!(200)),
        ],
    )
    .unwrap()
}

#[test]
fn chained5_smoke_run_emits_every_file_and_reruns_identically() {
    let cfg = tiny_chained5();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let bundle = run_scenario(&cfg, a.path()).unwrap();
    for name in [CONFIG_JSON, FORWARD_CSV, FORWARD_META, POLICY_JSON, TRAINING_CSV, REVERSE_CSV, METRICS_JSON] {
        let p = a.path().join(name);
        assert!(p.is_file(), "missing {name}");
        assert!(bundle.files.contains(&p));
    }
    assert!(bundle.files.iter().all(|p| p.is_file()));
    assert!(bundle.criteria.contains_key("target_kl_ratio"));
    assert!(bundle.criteria.contains_key("terminal_cov_diag"));

    // Every artifact is readable by the crate's own loaders.
    let back: ScenarioConfig = io::read_json(&a.path().join(CONFIG_JSON)).unwrap();
    assert_eq!(back, cfg);
    let store = io::read_store(&a.path().join(FORWARD_CSV)).unwrap();
    assert_eq!(store.n_particles(), 200);
    assert_eq!(store.dim(), 5);
    io::read_store(&a.path().join(REVERSE_CSV)).unwrap();
    let losses = io::read_losses(&a.path().join(TRAINING_CSV)).unwrap();
    assert_eq!(losses.len(), 200);
    assert!(losses.iter().all(|l| l.is_finite()));
    load_policy(&a.path().join(POLICY_JSON)).unwrap();
    let metrics: serde_json::Value = io::read_json(&a.path().join(METRICS_JSON)).unwrap();
    assert_eq!(metrics["seed"], json!(cfg.seed));
    assert_eq!(metrics["algorithm"], json!("alg2"));

    run_scenario(&cfg, b.path()).unwrap();
    for name in [FORWARD_CSV, POLICY_JSON, TRAINING_CSV, REVERSE_CSV, METRICS_JSON] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }
}

#[test]
fn seed_changes_the_run() {
    let cfg = tiny_chained5();
    let mut short = cfg.clone();
    short.training.as_mut().unwrap().iterations = 5;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_scenario(&short, a.path()).unwrap();
    run_scenario(&short.with_seed(cfg.seed + 1), b.path()).unwrap();
    let x = std::fs::read(a.path().join(FORWARD_CSV)).unwrap();
    let y = std::fs::read(b.path().join(FORWARD_CSV)).unwrap();
    assert_ne!(x, y);
}

#[test]
fn single_target_bistable_collapses_to_one_point() {
    let o = |k: &str, v: serde_json::Value| (k.to_string(), v);
    let cfg = scenario_lti_bistable(&[
        o("p_target", json!({"type": "dirac_mixture", "points": [[-5.0, 0.0, 5.0, 0.0]], "weights": [1.0]})),
        o("forward.n_particles", json!(100)),
        o("evaluation.n_eval", json!(200)),
    ])
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bundle = run_scenario(&cfg, dir.path()).unwrap();
    let frac = bundle.criteria["target_fraction"].value;
    assert!(frac >= 0.99, "fraction {frac}");
    let mean = bundle.metrics["reverse"]["terminal_mean"].as_array().unwrap();
    let expect = [-5.0, 0.0, 5.0, 0.0];
    for (m, e) in mean.iter().zip(expect) {
        assert!((m.as_f64().unwrap() - e).abs() < 0.1, "terminal mean {mean:?}");
    }
}

#[test]
fn start_inside_an_obstacle_is_rejected() {
    let o = |k: &str, v: serde_json::Value| (k.to_string(), v);
    let cfg = scenario_unicycle_obstacles(&[o(
        "p_target",
        json!({"type": "dirac_mixture", "points": [[0.0, 2.0, 0.0]], "weights": [1.0]}),
    )])
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_scenario(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }), "{err:?}");
    assert!(matches!(err.root(), Error::Config(_)), "{err:?}");
}
