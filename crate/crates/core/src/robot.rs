//! Rigid-body model of the three-joint arm.
//!
//! The chain is a base column rotating about the vertical axis (joint 1)
//! carrying two pitch links (joints 2 and 3) that move in a vertical plane.
//! Joint angles are measured from the vertical, so `q = 0` points the arm
//! straight up. Links 2 and 3 are slender bodies: their rotational inertia
//! about the link axis is neglected.
//!
//! Dynamics follow the usual Euler-Lagrange form
//!
//! ```text
//! B(q) q'' + C(q, q') q' + tau_F(q') + g(q) = tau
//! ```
//!
//! with `C` assembled from the Christoffel symbols of `B`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic and dynamic parameters of the arm.
///
/// `link_inertias[0]` is the inertia of everything rigidly attached to the
/// base column about the vertical axis. `link_inertias[1]` and
/// `link_inertias[2]` are the inertias of links 2 and 3 about their own
/// (proximal) pitch axes, so each must exceed `m * c^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotParams {
    pub link_lengths: [f64; 3],
    pub link_masses: [f64; 3],
    pub link_com_offsets: [f64; 3],
    pub link_inertias: [f64; 3],
    pub viscous_friction: [f64; 3],
    pub coulomb_friction: [f64; 3],
    pub coulomb_smoothing: f64,
    pub gravity_accel: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            link_lengths: [0.3, 0.4, 0.4],
            link_masses: [4.0, 4.0, 2.5],
            link_com_offsets: [0.15, 0.2, 0.2],
            link_inertias: [0.1, 0.22, 0.14],
            viscous_friction: [0.5, 0.5, 0.3],
            coulomb_friction: [0.4, 0.4, 0.2],
            coulomb_smoothing: 0.05,
            gravity_accel: 9.81,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self
            .link_lengths
            .iter()
            .chain(&self.link_masses)
            .chain(&self.link_inertias)
            .all(|&v| v.is_finite() && v > 0.0);
        if !positive {
            return Err(Error::InvalidParams(
                "link lengths, masses and inertias must be positive".into(),
            ));
        }
        let friction_ok = self
            .viscous_friction
            .iter()
            .chain(&self.coulomb_friction)
            .all(|&v| v.is_finite() && v >= 0.0);
        if !friction_ok {
            return Err(Error::InvalidParams(
                "friction coefficients must be non-negative".into(),
            ));
        }
        if !(self.coulomb_smoothing.is_finite() && self.coulomb_smoothing > 0.0) {
            return Err(Error::InvalidParams("coulomb_smoothing must be positive".into()));
        }
        if !self.gravity_accel.is_finite() {
            return Err(Error::InvalidParams("gravity_accel must be finite".into()));
        }
        for i in 1..3 {
            let c = self.link_com_offsets[i];
            if !(c.is_finite() && c >= 0.0 && c <= self.link_lengths[i]) {
                return Err(Error::InvalidParams(format!(
                    "link {} centre of mass must lie on the link",
                    i + 1
                )));
            }
            if self.link_inertias[i] <= self.link_masses[i] * c * c {
                return Err(Error::InvalidParams(format!(
                    "link {} inertia about its joint must exceed m*c^2",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Sum of the link lengths; an upper bound on the tip distance from the base.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }
}

/// Angles and angular velocities of the three actuated joints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub q: Vector3<f64>,
    pub qdot: Vector3<f64>,
}

impl JointState {
    pub fn new(q: Vector3<f64>, qdot: Vector3<f64>) -> Self {
        Self { q, qdot }
    }

    pub fn at_rest(q: Vector3<f64>) -> Self {
        Self {
            q,
            qdot: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrictionMode {
    Sign,
    Arctan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GravityMode {
    Full,
    Neglected,
}

/// Which terms of the model are evaluated and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub friction_mode: FrictionMode,
    pub gravity_mode: GravityMode,
}

impl ModelVariant {
    /// Ground truth: discontinuous Coulomb friction and full gravity.
    pub const PLANT: Self = Self {
        friction_mode: FrictionMode::Sign,
        gravity_mode: GravityMode::Full,
    };

    /// Model used inside the optimal control problem.
    pub const CONTROLLER: Self = Self {
        friction_mode: FrictionMode::Arctan,
        gravity_mode: GravityMode::Neglected,
    };
}

/// `B(q)` together with its first and second partial derivatives in `q`.
struct InertiaTerms {
    b: Matrix3<f64>,
    db: [Matrix3<f64>; 3],
    d2b: [[Matrix3<f64>; 3]; 3],
}

fn inertia_terms(q: &Vector3<f64>, p: &RobotParams) -> InertiaTerms {
    let [_, l2, _] = p.link_lengths;
    let [i1, i2, i3] = p.link_inertias;
    let m3 = p.link_masses[2];
    let c3 = p.link_com_offsets[2];

    let a = i2 + m3 * l2 * l2;
    let b = m3 * l2 * c3;

    let (q2, q3) = (q[1], q[2]);
    let (s3, c3q) = q3.sin_cos();
    let (s_2q2, c_2q2) = (2.0 * q2).sin_cos();
    let (s_a, c_a) = (2.0 * q2 + q3).sin_cos();
    let (s_b, c_b) = (2.0 * q2 + 2.0 * q3).sin_cos();

    // B11 = I1 + a sin^2 q2 + 2b sin q2 sin(q2+q3) + I3 sin^2(q2+q3), in double-angle form.
    let b11 = i1 + 0.5 * a * (1.0 - c_2q2) + b * (c3q - c_a) + 0.5 * i3 * (1.0 - c_b);
    let b22 = a + i3 + 2.0 * b * c3q;
    let b23 = i3 + b * c3q;
    let b33 = i3;

    let mut out = InertiaTerms {
        b: Matrix3::new(b11, 0.0, 0.0, 0.0, b22, b23, 0.0, b23, b33),
        db: [Matrix3::zeros(); 3],
        d2b: [[Matrix3::zeros(); 3]; 3],
    };

    // d/dq2
    out.db[1][(0, 0)] = a * s_2q2 + 2.0 * b * s_a + i3 * s_b;
    // d/dq3
    out.db[2][(0, 0)] = -b * s3 + b * s_a + i3 * s_b;
    out.db[2][(1, 1)] = -2.0 * b * s3;
    out.db[2][(1, 2)] = -b * s3;
    out.db[2][(2, 1)] = -b * s3;

    let d22 = 2.0 * a * c_2q2 + 4.0 * b * c_a + 2.0 * i3 * c_b;
    let d23 = 2.0 * b * c_a + 2.0 * i3 * c_b;
    let d33_11 = -b * c3q + b * c_a + 2.0 * i3 * c_b;
    out.d2b[1][1][(0, 0)] = d22;
    out.d2b[1][2][(0, 0)] = d23;
    out.d2b[2][1][(0, 0)] = d23;
    out.d2b[2][2][(0, 0)] = d33_11;
    out.d2b[2][2][(1, 1)] = -2.0 * b * c3q;
    out.d2b[2][2][(1, 2)] = -b * c3q;
    out.d2b[2][2][(2, 1)] = -b * c3q;
    out
}

pub fn inertia_matrix(q: &Vector3<f64>, params: &RobotParams) -> Matrix3<f64> {
    inertia_terms(q, params).b
}

/// Christoffel symbol of the first kind, `c_ijk = (d_i B_kj + d_j B_ki - d_k B_ij) / 2`.
fn christoffel(db: &[Matrix3<f64>; 3], i: usize, j: usize, k: usize) -> f64 {
    0.5 * (db[i][(k, j)] + db[j][(k, i)] - db[k][(i, j)])
}

fn coriolis_from(db: &[Matrix3<f64>; 3], qdot: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|k, j| (0..3).map(|i| christoffel(db, i, j, k) * qdot[i]).sum())
}

/// Coriolis/centrifugal matrix such that `B' - 2C` is skew-symmetric.
pub fn coriolis_matrix(q: &Vector3<f64>, qdot: &Vector3<f64>, params: &RobotParams) -> Matrix3<f64> {
    coriolis_from(&inertia_terms(q, params).db, qdot)
}

fn coulomb_shape(qdot: f64, mode: FrictionMode, smoothing: f64) -> f64 {
    match mode {
        FrictionMode::Sign => {
            if qdot > 0.0 {
                1.0
            } else if qdot < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        FrictionMode::Arctan => std::f64::consts::FRAC_2_PI * (qdot / smoothing).atan(),
    }
}

fn coulomb_shape_slope(qdot: f64, mode: FrictionMode, smoothing: f64) -> f64 {
    match mode {
        FrictionMode::Sign => 0.0,
        FrictionMode::Arctan => {
            let r = qdot / smoothing;
            std::f64::consts::FRAC_2_PI / (smoothing * (1.0 + r * r))
        }
    }
}

pub fn friction_torque(qdot: &Vector3<f64>, variant: ModelVariant, params: &RobotParams) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        params.viscous_friction[i] * qdot[i]
            + params.coulomb_friction[i] * coulomb_shape(qdot[i], variant.friction_mode, params.coulomb_smoothing)
    })
}

/// Potential energy of the chain relative to the shoulder height.
pub fn potential_energy(q: &Vector3<f64>, params: &RobotParams) -> f64 {
    let [_, l2, _] = params.link_lengths;
    let [_, m2, m3] = params.link_masses;
    let [_, c2, c3] = params.link_com_offsets;
    let z2 = c2 * q[1].cos();
    let z3 = l2 * q[1].cos() + c3 * (q[1] + q[2]).cos();
    params.gravity_accel * (m2 * z2 + m3 * z3)
}

pub fn gravity_torque(q: &Vector3<f64>, params: &RobotParams) -> Vector3<f64> {
    let [_, l2, _] = params.link_lengths;
    let [_, m2, m3] = params.link_masses;
    let [_, c2, c3] = params.link_com_offsets;
    let g = params.gravity_accel;
    let s2 = q[1].sin();
    let s23 = (q[1] + q[2]).sin();
    Vector3::new(0.0, -g * (m2 * c2 * s2 + m3 * (l2 * s2 + c3 * s23)), -g * m3 * c3 * s23)
}

fn gravity_jacobian(q: &Vector3<f64>, params: &RobotParams) -> Matrix3<f64> {
    let [_, l2, _] = params.link_lengths;
    let [_, m2, m3] = params.link_masses;
    let [_, c2, c3] = params.link_com_offsets;
    let g = params.gravity_accel;
    let c2q = q[1].cos();
    let c23 = (q[1] + q[2]).cos();
    let mut jac = Matrix3::zeros();
    jac[(1, 1)] = -g * (m2 * c2 * c2q + m3 * (l2 * c2q + c3 * c23));
    jac[(1, 2)] = -g * m3 * c3 * c23;
    jac[(2, 1)] = -g * m3 * c3 * c23;
    jac[(2, 2)] = -g * m3 * c3 * c23;
    jac
}

/// Cartesian tip position in the base frame.
pub fn forward_kinematics(q: &Vector3<f64>, params: &RobotParams) -> Vector3<f64> {
    let [l1, l2, l3] = params.link_lengths;
    let (s1, c1) = q[0].sin_cos();
    let (s2, c2) = q[1].sin_cos();
    let (s23, c23) = (q[1] + q[2]).sin_cos();
    let radial = l2 * s2 + l3 * s23;
    Vector3::new(radial * c1, radial * s1, l1 + l2 * c2 + l3 * c23)
}

/// Analytic Jacobian of [`forward_kinematics`].
pub fn kinematic_jacobian(q: &Vector3<f64>, params: &RobotParams) -> Matrix3<f64> {
    let [_, l2, l3] = params.link_lengths;
    let (s1, c1) = q[0].sin_cos();
    let (s2, c2) = q[1].sin_cos();
    let (s23, c23) = (q[1] + q[2]).sin_cos();
    let radial = l2 * s2 + l3 * s23;
    let d_radial_2 = l2 * c2 + l3 * c23;
    let d_radial_3 = l3 * c23;
    Matrix3::new(
        -radial * s1,
        d_radial_2 * c1,
        d_radial_3 * c1,
        radial * c1,
        d_radial_2 * s1,
        d_radial_3 * s1,
        0.0,
        -l2 * s2 - l3 * s23,
        -l3 * s23,
    )
}

/// Elbow configuration for [`inverse_kinematics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elbow {
    /// Positive elbow angle.
    Positive,
    /// Negative elbow angle.
    Negative,
}

/// Joint angles that put the tip at `target`, or `None` if it is out of reach.
pub fn inverse_kinematics(target: &Vector3<f64>, elbow: Elbow, params: &RobotParams) -> Option<Vector3<f64>> {
    let [l1, l2, l3] = params.link_lengths;
    let q1 = target[1].atan2(target[0]);
    let radial = target[0].hypot(target[1]);
    let height = target[2] - l1;
    let cos_q3 = (radial * radial + height * height - l2 * l2 - l3 * l3) / (2.0 * l2 * l3);
    if !(-1.0..=1.0).contains(&cos_q3) {
        return None;
    }
    let q3 = match elbow {
        Elbow::Positive => cos_q3.acos(),
        Elbow::Negative => -cos_q3.acos(),
    };
    let q2 = radial.atan2(height) - (l3 * q3.sin()).atan2(l2 + l3 * q3.cos());
    Some(Vector3::new(q1, q2, q3))
}

fn generalized_forces(
    terms: &InertiaTerms,
    state: &JointState,
    tau: &Vector3<f64>,
    variant: ModelVariant,
    params: &RobotParams,
) -> Vector3<f64> {
    let mut rhs =
        tau - coriolis_from(&terms.db, &state.qdot) * state.qdot - friction_torque(&state.qdot, variant, params);
    if variant.gravity_mode == GravityMode::Full {
        rhs -= gravity_torque(&state.q, params);
    }
    rhs
}

fn solve_inertia(b: Matrix3<f64>, rhs: &Vector3<f64>) -> Result<Vector3<f64>> {
    b.cholesky()
        .map(|c| c.solve(rhs))
        .ok_or(Error::Internal("inertia matrix factorization failed"))
}

/// Joint accelerations for the given state and torques.
pub fn joint_acceleration(
    state: &JointState,
    tau: &Vector3<f64>,
    variant: ModelVariant,
    params: &RobotParams,
) -> Result<Vector3<f64>> {
    let terms = inertia_terms(&state.q, params);
    let rhs = generalized_forces(&terms, state, tau, variant, params);
    solve_inertia(terms.b, &rhs)
}

/// State derivative `(q', q'')`.
pub fn forward_dynamics(
    state: &JointState,
    tau: &Vector3<f64>,
    variant: ModelVariant,
    params: &RobotParams,
) -> Result<JointState> {
    Ok(JointState {
        q: state.qdot,
        qdot: joint_acceleration(state, tau, variant, params)?,
    })
}

/// Joint accelerations with their partial derivatives.
#[derive(Debug, Clone, Copy)]
pub struct AccelerationJacobians {
    pub qddot: Vector3<f64>,
    pub d_q: Matrix3<f64>,
    pub d_qdot: Matrix3<f64>,
    pub d_tau: Matrix3<f64>,
}

pub fn acceleration_jacobians(
    state: &JointState,
    tau: &Vector3<f64>,
    variant: ModelVariant,
    params: &RobotParams,
) -> Result<AccelerationJacobians> {
    let terms = inertia_terms(&state.q, params);
    let rhs = generalized_forces(&terms, state, tau, variant, params);
    let chol = terms
        .b
        .cholesky()
        .ok_or(Error::Internal("inertia matrix factorization failed"))?;
    let qddot = chol.solve(&rhs);
    let qd = &state.qdot;

    // d(C q')/dq_m from second derivatives of B.
    let mut d_cqd_dq = Matrix3::zeros();
    for m in 0..3 {
        let d2 = &terms.d2b[m];
        for k in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += christoffel(d2, i, j, k) * qd[i] * qd[j];
                }
            }
            d_cqd_dq[(k, m)] = acc;
        }
    }

    // B q'' = rhs  =>  B dq''/dq_m = d rhs/dq_m - (dB/dq_m) q''
    let mut d_rhs_dq = -d_cqd_dq;
    if variant.gravity_mode == GravityMode::Full {
        d_rhs_dq -= gravity_jacobian(&state.q, params);
    }
    for m in 0..3 {
        let col = terms.db[m] * qddot;
        for k in 0..3 {
            d_rhs_dq[(k, m)] -= col[k];
        }
    }

    let coriolis = coriolis_from(&terms.db, qd);
    let friction_slope = Matrix3::from_diagonal(&Vector3::from_fn(|i, _| {
        params.viscous_friction[i]
            + params.coulomb_friction[i] * coulomb_shape_slope(qd[i], variant.friction_mode, params.coulomb_smoothing)
    }));
    let d_rhs_dqd = -2.0 * coriolis - friction_slope;

    Ok(AccelerationJacobians {
        qddot,
        d_q: chol.solve(&d_rhs_dq),
        d_qdot: chol.solve(&d_rhs_dqd),
        d_tau: chol.inverse(),
    })
}

/// Kinetic plus potential energy.
pub fn total_energy(state: &JointState, params: &RobotParams) -> f64 {
    let b = inertia_matrix(&state.q, params);
    0.5 * state.qdot.dot(&(b * state.qdot)) + potential_energy(&state.q, params)
}
