mod common;

use common::{normal, rng};
use proptest::prelude::*;
use sdctl_core::systems::{channel_divergence, make_lti, ControlAffine, Chained5, FullyActuated, Unicycle};
use sdctl_core::Matrix;

/// Max abs difference between the analytic channel Jacobians and central
/// differences of the channel matrix.
fn jacobian_gap(sys: &dyn ControlAffine<f64>, x: &[f64]) -> f64 {
    const H: f64 = 1e-6;
    let d = sys.state_dim();
    let jacs = sys.channel_jacobians(x);
    let mut worst: f64 = 0.0;
    for k in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += H;
        xm[k] -= H;
        let (gp, gm) = (sys.channel_matrix(&xp), sys.channel_matrix(&xm));
        for (i, j) in jacs.iter().enumerate() {
            for r in 0..d {
                let fd = (gp[(r, i)] - gm[(r, i)]) / (2.0 * H);
                worst = worst.max((fd - j[(r, k)]).abs());
            }
        }
    }
    worst
}

#[test]
fn channel_jacobians_match_differences_at_random_points() {
    let mut r = rng(21);
    let systems: Vec<Box<dyn ControlAffine<f64>>> = vec![Box::new(Unicycle), Box::new(Chained5)];
    for sys in &systems {
        for _ in 0..100 {
            let x: Vec<f64> = (0..sys.state_dim()).map(|_| 2.0 * normal(&mut r)).collect();
            let gap = jacobian_gap(&**sys, &x);
            assert!(gap <= 1e-4, "{} at {x:?}: {gap}", sys.name());
        }
    }
}

#[test]
fn lti_drift_jacobian_is_a() {
    let (a, b) = common::bistable_ab();
    let sys = make_lti(a.clone(), b).unwrap();
    let mut j = Matrix::zeros(4, 4);
    sys.drift_jacobian(&[0.3, -1.0, 2.0, 0.5], &mut j);
    assert_eq!(j, a);
    assert!(!sys.is_driftless());
}

#[test]
fn bistable_pair_is_controllable() {
    let (a, b) = common::bistable_ab();
    assert!(make_lti(a.clone(), b).is_ok());
    assert!(make_lti(a, Matrix::zeros(4, 2)).is_err());
    assert!(make_lti(Matrix::zeros(3, 3), Matrix::identity(3)).is_ok());
}

proptest! {
    #[test]
    fn driftless_benchmarks_are_divergence_free(x in prop::collection::vec(-5.0f64..5.0, 5)) {
        prop_assert_eq!(channel_divergence(&Chained5, &x), vec![0.0, 0.0]);
        prop_assert_eq!(channel_divergence(&Unicycle, &x[..3]), vec![0.0, 0.0]);
    }

    #[test]
    fn velocity_is_affine_in_the_input(
        x in prop::collection::vec(-3.0f64..3.0, 5),
        u in prop::collection::vec(-2.0f64..2.0, 2),
        w in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let sys = Chained5;
        let mut a = vec![0.0; 5];
        let mut b = vec![0.0; 5];
        let mut c = vec![0.0; 5];
        sys.velocity(&x, &u, &mut a);
        sys.velocity(&x, &w, &mut b);
        let sum: Vec<f64> = u.iter().zip(&w).map(|(p, q)| p + q).collect();
        sys.velocity(&x, &sum, &mut c);
        for k in 0..5 {
            prop_assert!((c[k] - a[k] - b[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn fully_actuated_channels_are_identity(d in 1usize..6) {
        let sys = FullyActuated { dim: d };
        prop_assert_eq!(sys.channel_matrix(&vec![0.7; d]), Matrix::identity(d));
    }
}
