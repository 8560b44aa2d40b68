//! Robot dynamics stacked with the timing law of the path parameter.

use nalgebra::{SVector, Vector3};

use crate::error::Result;
use crate::path::SplinePath;
use crate::robot::{self, JointState, ModelVariant, RobotParams};

/// Dimension of the stacked state `(q, qdot, theta, theta_dot)`.
pub const AUG_DIM: usize = 8;
/// Dimension of the stacked input `(tau, v)`.
pub const INPUT_DIM: usize = 4;

pub type AugVector = SVector<f64, AUG_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;

/// Path parameter and its rate; the internal state of the controller.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl VirtualState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }

    /// Exact propagation of the double integrator under constant `v` for `dt`.
    pub fn advance(&self, v: f64, dt: f64) -> Self {
        Self {
            theta: self.theta + self.theta_dot * dt + 0.5 * v * dt * dt,
            theta_dot: self.theta_dot + v * dt,
        }
    }
}

/// Double-integrator timing law: `d/dt (theta, theta_dot) = (theta_dot, v)`.
pub fn timing_law_rhs(z: &VirtualState, v: f64) -> VirtualState {
    VirtualState {
        theta: z.theta_dot,
        theta_dot: v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub robot: JointState,
    pub virt: VirtualState,
}

impl AugmentedState {
    pub fn new(robot: JointState, virt: VirtualState) -> Self {
        Self { robot, virt }
    }

    pub fn to_vector(&self) -> AugVector {
        let (q, qd) = (&self.robot.q, &self.robot.qdot);
        AugVector::from_column_slice(&[
            q[0],
            q[1],
            q[2],
            qd[0],
            qd[1],
            qd[2],
            self.virt.theta,
            self.virt.theta_dot,
        ])
    }

    pub fn from_vector(x: &AugVector) -> Self {
        Self {
            robot: JointState {
                q: Vector3::new(x[0], x[1], x[2]),
                qdot: Vector3::new(x[3], x[4], x[5]),
            },
            virt: VirtualState::new(x[6], x[7]),
        }
    }
}

/// Time derivative of the augmented state. The two blocks are uncoupled.
pub fn augmented_rhs(
    aug: &AugmentedState,
    u: &Vector3<f64>,
    v: f64,
    variant: ModelVariant,
    params: &RobotParams,
) -> Result<AugmentedState> {
    Ok(AugmentedState {
        robot: robot::forward_dynamics(&aug.robot, u, variant, params)?,
        virt: timing_law_rhs(&aug.virt, v),
    })
}

/// Path-following error `h(q) - p(theta)`.
pub fn path_error(aug: &AugmentedState, path: &SplinePath, params: &RobotParams) -> Vector3<f64> {
    robot::forward_kinematics(&aug.robot.q, params) - path.eval(aug.virt.theta)
}
