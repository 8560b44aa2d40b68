//! Ground-truth plant: the full model with Coulomb friction and gravity,
//! an imperfect internal gravity compensation, and external disturbances.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robot::{self, FrictionMode, JointState, ModelVariant, RobotParams};

/// Joint speed above which the simulation is declared diverged.
pub const BLOWUP_SPEED: f64 = 100.0;
/// RK4 sub-steps per plant step.
pub const SUBSTEPS: usize = 4;

/// A constant joint-torque offset active on `[t_start, t_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub t_start: f64,
    pub t_end: f64,
    pub torque: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DisturbanceProfile {
    pub intervals: Vec<Disturbance>,
}

impl DisturbanceProfile {
    pub fn new(intervals: Vec<Disturbance>) -> Result<Self> {
        let p = Self { intervals };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut last_end = f64::NEG_INFINITY;
        for d in &self.intervals {
            if !(d.t_start.is_finite() && d.t_end.is_finite() && d.t_start < d.t_end) {
                return Err(Error::InvalidConfig(format!(
                    "bad disturbance interval [{}, {}]",
                    d.t_start, d.t_end
                )));
            }
            if d.t_start < last_end {
                return Err(Error::InvalidConfig(
                    "disturbance intervals must be sorted and non-overlapping".into(),
                ));
            }
            if !d.torque.iter().all(|t| t.is_finite()) {
                return Err(Error::InvalidConfig("disturbance torque is not finite".into()));
            }
            last_end = d.t_end;
        }
        Ok(())
    }

    pub fn torque_at(&self, t: f64) -> Vector3<f64> {
        self.intervals
            .iter()
            .find(|d| d.t_start <= t && t < d.t_end)
            .map(|d| Vector3::from(d.torque))
            .unwrap_or_else(Vector3::zeros)
    }
}

/// Fraction of the true gravity torque the robot compensates internally.
pub const DEFAULT_GRAVITY_COMPENSATION: f64 = 0.98;

fn plant_rhs(
    state: &JointState,
    tau: &Vector3<f64>,
    compensation: f64,
    friction: FrictionMode,
    params: &RobotParams,
) -> Result<JointState> {
    let tau_total = tau + robot::gravity_torque(&state.q, params) * compensation;
    let variant = ModelVariant {
        friction_mode: friction,
        ..ModelVariant::PLANT
    };
    robot::forward_dynamics(state, &tau_total, variant, params)
}

fn axpy(state: &JointState, d: &JointState, h: f64) -> JointState {
    JointState {
        q: state.q + d.q * h,
        qdot: state.qdot + d.qdot * h,
    }
}

/// Advances the true plant by `h` with the torques held constant.
///
/// `compensation` scales the gravity torque the robot adds on its own
/// (1 cancels gravity exactly).
pub fn plant_step(
    state: &JointState,
    tau_applied: &Vector3<f64>,
    disturbance: &Vector3<f64>,
    h: f64,
    compensation: f64,
    params: &RobotParams,
) -> Result<JointState> {
    plant_step_with_friction(
        state,
        tau_applied,
        disturbance,
        h,
        compensation,
        FrictionMode::Sign,
        params,
    )
}

/// [`plant_step`] with a chosen Coulomb friction law.
pub fn plant_step_with_friction(
    state: &JointState,
    tau_applied: &Vector3<f64>,
    disturbance: &Vector3<f64>,
    h: f64,
    compensation: f64,
    friction: FrictionMode,
    params: &RobotParams,
) -> Result<JointState> {
    rk4(
        state,
        &(tau_applied + disturbance),
        h,
        SUBSTEPS,
        compensation,
        friction,
        params,
    )
}

fn rk4(
    state: &JointState,
    tau: &Vector3<f64>,
    h: f64,
    substeps: usize,
    compensation: f64,
    friction: FrictionMode,
    params: &RobotParams,
) -> Result<JointState> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("plant step must be positive".into()));
    }
    let dt = h / substeps as f64;
    let mut x = *state;
    for _ in 0..substeps {
        let k1 = plant_rhs(&x, tau, compensation, friction, params)?;
        let k2 = plant_rhs(&axpy(&x, &k1, dt / 2.0), tau, compensation, friction, params)?;
        let k3 = plant_rhs(&axpy(&x, &k2, dt / 2.0), tau, compensation, friction, params)?;
        let k4 = plant_rhs(&axpy(&x, &k3, dt), tau, compensation, friction, params)?;
        x.q += (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0);
        x.qdot += (k1.qdot + k2.qdot * 2.0 + k3.qdot * 2.0 + k4.qdot) * (dt / 6.0);
    }
    let speed = x.qdot.amax();
    if !(speed <= BLOWUP_SPEED) {
        return Err(Error::SimulationBlowup { t: f64::NAN, speed });
    }
    Ok(x)
}

/// Finite differences of joint angles followed by a first-order low-pass.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityEstimator {
    cutoff: f64,
    estimate: Vector3<f64>,
    previous: Option<Vector3<f64>>,
}

pub const DEFAULT_CUTOFF_HZ: f64 = 50.0;

impl VelocityEstimator {
    pub fn new(cutoff: f64, initial_estimate: Vector3<f64>) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff.is_finite()) {
            return Err(Error::InvalidConfig("filter cutoff must be positive".into()));
        }
        Ok(Self {
            cutoff,
            estimate: initial_estimate,
            previous: None,
        })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn estimate(&self) -> Vector3<f64> {
        self.estimate
    }

    /// Filter gain for sample period `dt`.
    pub fn alpha(&self, dt: f64) -> f64 {
        1.0 - (-2.0 * std::f64::consts::PI * self.cutoff * dt).exp()
    }

    /// One filter update from two consecutive angle samples.
    pub fn update(&mut self, q_now: &Vector3<f64>, q_prev: &Vector3<f64>, dt: f64) -> Vector3<f64> {
        let raw = (q_now - q_prev) / dt;
        let a = self.alpha(dt);
        self.estimate = raw * a + self.estimate * (1.0 - a);
        self.previous = Some(*q_now);
        self.estimate
    }

    /// Feeds the next angle sample; the first sample only primes the filter.
    pub fn measure(&mut self, q_now: &Vector3<f64>, dt: f64) -> Vector3<f64> {
        match self.previous {
            Some(prev) => self.update(q_now, &prev, dt),
            None => {
                self.previous = Some(*q_now);
                self.estimate
            }
        }
    }
}
