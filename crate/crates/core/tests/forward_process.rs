mod common;

use proptest::prelude::*;
use sdctl_core::density::{empirical_moments, DensitySpec, ParticleEnsemble};
use sdctl_core::forward::{
    obstacle_reject, reflect_box, simulate_forward, simulate_from, Domain, ForwardConfig, ForwardProcess, Obstacle,
    SnapshotStore,
};
use sdctl_core::io;
use sdctl_core::linalg::mat_exp;
use sdctl_core::systems::{make_lti, Chained5, Unicycle};

/// Unfolds by repeated single mirror steps.
fn fold_oracle(mut v: f64, lo: f64, hi: f64) -> f64 {
    loop {
        if v > hi {
            v = 2.0 * hi - v;
        } else if v < lo {
            v = 2.0 * lo - v;
        } else {
            return v;
        }
    }
}

fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for v in values {
        let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as isize;
        h[k.clamp(0, bins as isize - 1) as usize] += 1;
    }
    h
}

fn assert_flat(h: &[usize], n: usize, rel: f64, what: &str) {
    let expect = n as f64 / h.len() as f64;
    for (k, &c) in h.iter().enumerate() {
        assert!((c as f64 / expect - 1.0).abs() <= rel, "{what}: bin {k} has {c}, expected {expect}");
    }
}

fn csv_bytes(store: &SnapshotStore) -> Vec<u8> {
    let mut buf = Vec::new();
    store.write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn reflected_brownian_motion_mixes_to_uniform_in_1d() {
    let zero = |x: &[f64]| vec![0.0; x.len()];
    let mut cfg = ForwardConfig::new(6.0, 0.01, 10_000, 5);
    cfg.snapshot_stride = Some(600);
    let start = DensitySpec::gaussian_iso(vec![0.0], 0.5).build().unwrap();
    let store =
        simulate_forward(&ForwardProcess::Generic { drift: &zero }, &start, &cfg, &Domain::cube(1, 4.0)).unwrap();
    let h = histogram(store.last().rows().map(|r| r[0]), -4.0, 4.0, 16);
    assert_flat(&h, 10_000, 0.2, "1D terminal");
}

#[test]
fn unicycle_heading_mixes_to_uniform() {
    let zero = |_: &[f64]| vec![0.0; 2];
    let mut cfg = ForwardConfig::new(6.0, 0.01, 10_000, 6);
    cfg.snapshot_stride = Some(600);
    let start = DensitySpec::gaussian_iso(vec![0.0; 3], 0.5).build().unwrap();
    let process = ForwardProcess::Channels { sys: &Unicycle, control: &zero };
    let store = simulate_forward(&process, &start, &cfg, &Domain::cube(3, 4.0)).unwrap();
    let h = histogram(store.last().rows().map(|r| r[2]), -4.0, 4.0, 16);
    assert_flat(&h, 10_000, 0.2, "heading");
}

#[test]
fn lti_forward_mean_follows_the_matrix_exponential() {
    let (a, b) = common::bistable_ab();
    let sys = make_lti(a.clone(), b).unwrap();
    let zero = |_: &[f64]| vec![0.0; 2];
    let xa = vec![-5.0, 0.0, 5.0, 0.0];
    let n = 4000;
    let mut cfg = ForwardConfig::new(2.0, 1e-3, n, 7);
    cfg.snapshot_stride = Some(500);
    let start = DensitySpec::DiracMixture { points: vec![xa.clone()], weights: vec![1.0] }.build().unwrap();
    let process = ForwardProcess::Channels { sys: &sys, control: &zero };
    let store = simulate_forward(&process, &start, &cfg, &Domain::unbounded()).unwrap();
    let af = a.scale(-1.0);
    for (t, e) in store.times.iter().zip(&store.ensembles).skip(1) {
        let expect = common::taylor_exp_scaled(&af, *t).matvec(&xa);
        let (m, c) = empirical_moments(e).unwrap();
        for j in 0..4 {
            let se = (c[(j, j)] / n as f64).sqrt().max(1e-12);
            assert!((m[j] - expect[j]).abs() <= 4.0 * se + 1e-9, "t {t}, dim {j}: {} vs {}", m[j], expect[j]);
        }
        // The library exponential agrees with the oracle used above.
        let lib = mat_exp(&af, *t).unwrap().matvec(&xa);
        assert!(common::rel_err(&lib, &expect, 1.0) < 1e-10);
    }
}

#[test]
fn results_do_not_depend_on_the_worker_count() {
    let zero = |_: &[f64]| vec![0.0; 2];
    let start = DensitySpec::uniform_cube(5, 4.0).build().unwrap();
    let cfg = ForwardConfig::new(0.5, 0.01, 300, 9);
    let domain = Domain::cube(5, 4.0);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let process = ForwardProcess::Channels { sys: &Chained5, control: &zero };
            csv_bytes(&simulate_forward(&process, &start, &cfg, &domain).unwrap())
        })
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
}

#[test]
fn store_survives_a_file_round_trip() {
    let zero = |_: &[f64]| vec![0.0; 2];
    let start = DensitySpec::gaussian_iso(vec![0.0; 3], 1.0).build().unwrap();
    let cfg = ForwardConfig::new(0.3, 0.01, 50, 10);
    let process = ForwardProcess::Channels { sys: &Unicycle, control: &zero };
    let store = simulate_forward(&process, &start, &cfg, &Domain::unbounded()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("forward.csv");
    io::write_store(&p, &store).unwrap();
    let back = io::read_store(&p).unwrap();
    assert_eq!(back.times, store.times);
    for (a, b) in back.ensembles.iter().zip(&store.ensembles) {
        assert_eq!(a.as_slice(), b.as_slice());
    }
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("t,pid,x0,x1,x2\n"));
    assert!(!text.contains('\r'));
}

fn disks() -> Vec<Obstacle> {
    vec![
        Obstacle { center: vec![1.5, 0.0], radius: 0.7, dims: vec![0, 1] },
        Obstacle { center: vec![-1.0, 1.2], radius: 0.5, dims: vec![0, 1] },
    ]
}

#[test]
fn particles_never_enter_obstacles() {
    let domain = Domain { bounds: Domain::cube(3, 4.0).bounds, obstacles: disks() };
    let start = DensitySpec::uniform_cube(3, 4.0).build().unwrap();
    let mut cfg = ForwardConfig::new(2.0, 0.02, 500, 11);
    cfg.snapshot_stride = Some(1);
    let score = |x: &[f64]| x.iter().map(|v| -v).collect::<Vec<_>>();
    let store = simulate_forward(&ForwardProcess::Generic { drift: &score }, &start, &cfg, &domain).unwrap();
    let inside: usize = store.ensembles.iter().map(|e| e.rows().filter(|x| domain.in_obstacle(x)).count()).sum();
    assert_eq!(inside, 0);
    assert!(store.ensembles.iter().all(|e| e.rows().all(|x| domain.admits(x))));
}

#[test]
fn start_inside_an_obstacle_is_rejected() {
    let domain = Domain { bounds: None, obstacles: disks() };
    let init = ParticleEnsemble::from_rows(0.0, &[vec![0.0, 0.0, 0.0], vec![1.5, 0.0, 0.0]]).unwrap();
    let zero = |x: &[f64]| vec![0.0; x.len()];
    let cfg = ForwardConfig::new(1.0, 0.1, 2, 0);
    assert!(simulate_from(&ForwardProcess::Generic { drift: &zero }, &init, &cfg, &domain).is_err());
}

proptest! {
    #[test]
    fn reflection_matches_iterative_folding(
        x in prop::collection::vec(-60.0f64..60.0, 1..6),
        half in 0.5f64..5.0,
    ) {
        let d = x.len();
        let (lo, hi) = (vec![-half; d], vec![half; d]);
        let y = reflect_box(&x, &lo, &hi);
        for j in 0..d {
            prop_assert!(y[j] >= -half && y[j] <= half);
            prop_assert!((y[j] - fold_oracle(x[j], -half, half)).abs() <= 1e-9 * x[j].abs().max(1.0));
        }
    }

    #[test]
    fn reflection_is_identity_inside(x in prop::collection::vec(-3.99f64..3.99, 1..6)) {
        let d = x.len();
        prop_assert_eq!(reflect_box(&x, &vec![-4.0; d], &vec![4.0; d]), x);
    }

    #[test]
    fn obstacle_rejection_never_lands_inside(
        prev in prop::collection::vec(-4.0f64..4.0, 3),
        cand in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        let domain = Domain { bounds: None, obstacles: disks() };
        prop_assume!(!domain.in_obstacle(&prev));
        let out = obstacle_reject(&prev, cand.clone(), &domain);
        prop_assert!(!domain.in_obstacle(&out));
        prop_assert!(out == cand || out == prev);
    }

    #[test]
    fn settled_steps_stay_in_the_box(
        x in prop::collection::vec(-3.9f64..3.9, 5),
        noise in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let zero = |_: &[f64]| vec![0.0; 2];
        let domain = Domain::cube(5, 4.0);
        let y = sdctl_core::forward::step_channels(&Chained5, &x, &zero, 0.5, 2f64.sqrt(), &domain, &noise);
        prop_assert!(domain.admits(&y));
        prop_assert_eq!(y.len(), 5);
    }
}
