//! Property tests of model, path, QP and estimator invariants.

use mpfc::path::SplinePath;
use mpfc::plant::{self, VelocityEstimator};
use mpfc::qp::QpProblem;
use mpfc::robot::{
    forward_kinematics, friction_torque, inertia_matrix, inverse_kinematics, total_energy, Elbow, FrictionMode,
    JointState, ModelVariant, RobotParams,
};
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn variant(mode: FrictionMode) -> ModelVariant {
    ModelVariant {
        friction_mode: mode,
        ..ModelVariant::PLANT
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inertia_is_symmetric_positive_definite(q in vec3(std::f64::consts::PI)) {
        let m = inertia_matrix(&q, &RobotParams::default());
        prop_assert!((m - m.transpose()).amax() <= 1e-12 * m.amax());
        let eig = m.symmetric_eigenvalues();
        prop_assert!(eig.min() > 0.0, "eigenvalues {eig}");
    }

    #[test]
    fn friction_dissipates(qdot in vec3(2.0), smooth: bool) {
        let mode = if smooth { FrictionMode::Arctan } else { FrictionMode::Sign };
        let f = friction_torque(&qdot, variant(mode), &RobotParams::default());
        for i in 0..3 {
            prop_assert!(f[i] * qdot[i] >= 0.0);
        }
    }

    #[test]
    fn unforced_plant_loses_energy(q in vec3(2.0), qdot in vec3(0.5), smooth: bool) {
        let p = RobotParams::default();
        let mode = if smooth { FrictionMode::Arctan } else { FrictionMode::Sign };
        let mut x = JointState::new(q, qdot);
        let e0 = total_energy(&x, &p);
        let mut prev = e0;
        for _ in 0..50 {
            x = plant::plant_step_with_friction(&x, &Vector3::zeros(), &Vector3::zeros(), 1e-3, 0.0, mode, &p).unwrap();
            let e = total_energy(&x, &p);
            prop_assert!(e <= prev + 1e-9 * (1.0 + e0.abs()), "energy rose from {prev} to {e}");
            prev = e;
        }
    }

    #[test]
    fn inverse_kinematics_reaches_forward_kinematics(q in vec3(1.5), positive: bool) {
        let p = RobotParams::default();
        let target = forward_kinematics(&q, &p);
        let elbow = if positive { Elbow::Positive } else { Elbow::Negative };
        let q_ik = inverse_kinematics(&target, elbow, &p);
        prop_assume!(q_ik.is_some());
        let reached = forward_kinematics(&q_ik.unwrap(), &p);
        prop_assert!((reached - target).norm() < 1e-9, "missed by {}", (reached - target).norm());
    }

    #[test]
    fn spline_interpolates_and_projects_back(
        ys in prop::collection::vec(-0.1..0.1f64, 4..12),
        frac in 0.0..1.0f64,
    ) {
        // A graph over x, so every point of the curve is hit exactly once.
        let points: Vec<_> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| Vector3::new(0.4 + 0.05 * i as f64, y, 0.5))
            .collect();
        let n = points.len() - 1;
        let path = SplinePath::fit_waypoints(&points, 0.0, n as f64).unwrap();
        for (i, p) in points.iter().enumerate() {
            prop_assert!((path.eval(i as f64) - p).norm() < 1e-12);
        }
        let theta = frac * n as f64;
        let back = path.project(&path.eval(theta), theta);
        prop_assert!((back - theta).abs() < 1e-6, "projected {theta} to {back}");
    }

    #[test]
    fn estimator_converges_to_constant_velocity(v in vec3(1.0), cutoff in 20.0..500.0f64) {
        let dt = 1e-3;
        let mut est = VelocityEstimator::new(cutoff, Vector3::zeros()).unwrap();
        let mut out = Vector3::zeros();
        for k in 0..2000 {
            out = est.measure(&(v * (k as f64 * dt)), dt);
        }
        prop_assert!((out - v).norm() < 1e-9 * (1.0 + v.norm()), "estimate {out} for {v}");
    }

    #[test]
    fn qp_solution_is_kkt_and_no_worse_than_a_feasible_point(seed in any::<u64>(), n in 2usize..8, m in 0usize..6) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let f = DMatrix::from_fn(n, n, |_, _| r(-1.0, 1.0));
        let h = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| r(-2.0, 2.0));
        let lb = DVector::from_fn(n, |_, _| r(-1.0, -0.1));
        let ub = DVector::from_fn(n, |_, _| r(0.1, 1.0));
        // The origin is strictly feasible for every row.
        let a = DMatrix::from_fn(m, n, |_, _| r(-1.0, 1.0));
        let b = DVector::from_fn(m, |_, _| r(0.05, 1.0));
        let qp = QpProblem { h, g, a, b, lb, ub };
        let sol = qp.solve().unwrap();
        prop_assert_eq!(sol.relaxation, 0.0);
        let kkt = qp.kkt_residuals(&sol);
        prop_assert!(kkt.stationarity < 1e-8, "{kkt:?}");
        prop_assert!(kkt.primal < 1e-10 && kkt.dual < 1e-10 && kkt.complementarity < 1e-8, "{kkt:?}");
        let origin = DVector::zeros(n);
        prop_assert!(qp.objective(&sol.x) <= qp.objective(&origin) + 1e-10);
    }
}
