mod common;

use std::sync::Arc;

use common::{fd_grad, gramian_quadrature, normal, rng, taylor_exp_scaled, MixtureOracle};
use proptest::prelude::*;
use rand::Rng;
use sdctl_core::density::{kde_score, silverman_bandwidth, DensitySpec, ParticleEnsemble};
use sdctl_core::forward::SnapshotStore;
use sdctl_core::score::{lti_score, score_growth_bound, snapshot_nonholonomic_score, KdeScoreField, LtiForwardModel};
use sdctl_core::systems::{FullyActuated, Unicycle};
use sdctl_core::Matrix;

const S: f64 = std::f64::consts::SQRT_2;

fn bistable_model() -> (LtiForwardModel, Matrix, Matrix) {
    let (a, b) = common::bistable_ab();
    let (af, bf) = (a.scale(-1.0), b.scale(-1.0));
    let p0 = DensitySpec::DiracMixture {
        points: vec![vec![-5.0, 0.0, 5.0, 0.0], vec![5.0, 0.0, -5.0, 0.0]],
        weights: vec![0.5, 0.5],
    };
    (LtiForwardModel::new(af.clone(), bf.clone(), S, &p0).unwrap(), af, bf)
}

#[test]
fn lti_score_matches_differences_of_an_independent_mixture_density() {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let af = common::random_stable(&mut r, 4, 0.3);
        let bf = common::random_matrix(&mut r, 4, 2, 1.0);
        let k = r.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| 2.0 * normal(&mut r)).collect()).collect();
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
        let weights: Vec<f64> = raw.iter().map(|w| w / raw.iter().sum::<f64>()).collect();
        let t = r.random_range(0.3..3.0);
        let p0 = DensitySpec::DiracMixture { points: points.clone(), weights: weights.clone() };
        let model = LtiForwardModel::new(af.clone(), bf.clone(), S, &p0).unwrap();
        let oracle = MixtureOracle::new(&af, &bf, S, &points, &weights, t);
        let y: Vec<f64> = (0..4).map(|_| normal(&mut r)).collect();
        let s = lti_score(&model, t, &y).unwrap();
        let fd = fd_grad(&|x| oracle.log_unnormalized(x), &y, 1e-5);
        worst = worst.max(common::rel_err(&s, &fd, 1e-3));
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

#[test]
fn growth_bound_holds_on_the_bistable_model() {
    let (model, _, _) = bistable_model();
    let radius = 50f64.sqrt();
    assert_eq!(model.support_radius(), Some(radius));
    let mut r = rng(32);
    for _ in 0..200 {
        let t = r.random_range(0.01..8.0);
        let y: Vec<f64> = (0..4).map(|_| 8.0 * normal(&mut r)).collect();
        let norm = lti_score(&model, t, &y).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = score_growth_bound(&model, t, &y).unwrap();
        assert!(norm <= bound * (1.0 + 1e-12), "t {t}: |score| {norm} > bound {bound}");
    }
}

#[test]
fn bistable_marginal_matches_quadrature_and_taylor() {
    let (model, af, bf) = bistable_model();
    for t in [0.1, 1.0, 5.0] {
        let m = model.marginal(t).unwrap();
        let q = gramian_quadrature(&af, &bf, t, 1e-13).scale(S * S);
        assert!(m.cov.matrix().sub(&q).unwrap().max_abs() <= 1e-8 * q.max_abs().max(1.0), "cov at {t}");
        let e = taylor_exp_scaled(&af, t);
        let expect = e.matvec(&[-5.0, 0.0, 5.0, 0.0]);
        assert!(common::rel_err(&m.means[0], &expect, 1.0) <= 1e-10, "mean at {t}");
    }
}

#[test]
fn scalar_gaussian_start_variance() {
    let s0 = 0.7;
    let model = LtiForwardModel::new(
        Matrix::from_diag(&[-1.0]),
        Matrix::from_diag(&[1.0]),
        S,
        &DensitySpec::gaussian_iso(vec![0.0], s0),
    )
    .unwrap();
    for t in [0.2, 1.0, 3.0] {
        let v = (-2.0 * t as f64).exp() * s0 + S * S * (1.0 - (-2.0 * t as f64).exp()) / 2.0;
        let got = model.marginal(t).unwrap().cov.matrix()[(0, 0)];
        assert!((got - v).abs() <= 1e-12, "t {t}: {got} vs {v}");
    }
}

fn gaussian_snapshot(n: usize, d: usize, seed: u64) -> ParticleEnsemble {
    let mut r = rng(seed);
    ParticleEnsemble::new(0.0, d, (0..n * d).map(|_| normal(&mut r)).collect()).unwrap()
}

#[test]
fn unicycle_snapshot_score_at_unit_x() {
    // Gaussian score -x composed with G at (1, 0, 0): (-1 cos 0, 0). The
    // kernel-smoothed expectation is -1 / (1 + h^2) in the first channel.
    let n = 5000;
    let e = gaussian_snapshot(n, 3, 33);
    let h = silverman_bandwidth(&e).unwrap();
    let store = SnapshotStore::new(vec![0.0], vec![e]).unwrap();
    let s = snapshot_nonholonomic_score(&store, &Unicycle, 0.0, &[1.0, 0.0, 0.0]).unwrap();
    let f = (2.0 * std::f64::consts::PI).powf(-1.5) * (-0.5f64).exp();
    let c = 1.0 / (16.0 * std::f64::consts::PI.powf(1.5));
    let hk = h.per_dim.iter().copied().fold(0.0, f64::max);
    let sd = (f * c / (n as f64 * h.per_dim.iter().product::<f64>() * hk * hk)).sqrt() / f;
    let expect = [-1.0 / (1.0 + h.per_dim[0].powi(2)), 0.0];
    for j in 0..2 {
        assert!((s[j] - expect[j]).abs() <= 5.0 * sd, "{s:?} vs {expect:?}, sd {sd}");
    }
}

#[test]
fn fully_actuated_snapshot_score_is_the_kde_score() {
    let e = gaussian_snapshot(300, 2, 34);
    let h = silverman_bandwidth(&e).unwrap();
    let x = [0.4, -0.3];
    let direct = kde_score(&e, &h, &x);
    let store = Arc::new(SnapshotStore::new(vec![0.0, 1.0], vec![e.clone(), e.with_time(1.0)]).unwrap());
    let via_store = snapshot_nonholonomic_score(&store, &FullyActuated { dim: 2 }, 0.2, &x).unwrap();
    assert_eq!(direct, via_store);
    let field = KdeScoreField::new(Arc::clone(&store)).unwrap();
    assert_eq!(field.nonholonomic(&FullyActuated { dim: 2 }, 0.9, &x).unwrap(), direct);
    assert!(KdeScoreField::with_bandwidths(store, vec![h]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn doubling_the_radius_adds_one_radius_term(t in 0.05f64..5.0, y in prop::collection::vec(-6.0f64..6.0, 4)) {
        let (model, _, _) = bistable_model();
        let r = 50f64.sqrt();
        let b1 = model.score_growth_bound_with_radius(t, &y, r).unwrap();
        let b2 = model.score_growth_bound_with_radius(t, &y, 2.0 * r).unwrap();
        let b0 = model.score_growth_bound_with_radius(t, &y, 0.0).unwrap();
        prop_assert!(((b2 - b1) - (b1 - b0)).abs() <= 1e-9 * b2.max(1.0));
    }

    #[test]
    fn mixture_score_is_symmetric_under_the_target_swap(t in 0.05f64..5.0, y in prop::collection::vec(-6.0f64..6.0, 4)) {
        // The two targets are negatives of each other, so log p is even.
        let (model, _, _) = bistable_model();
        let s = lti_score(&model, t, &y).unwrap();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let sn = lti_score(&model, t, &neg).unwrap();
        for (a, b) in s.iter().zip(&sn) {
            prop_assert!((a + b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
