//! Sampled-data receding-horizon loop around [`rti_step`].
//!
//! The path parameter and its rate are internal to the controller: they are
//! never reset from measurements but propagated in closed form under the
//! virtual input of the plan computed at the previous sample.

use nalgebra::{DVector, Vector3};

use crate::augmented::{AugmentedState, VirtualState, INPUT_DIM};
use crate::error::{Error, Result};
use crate::ocp::{self, ArmModel, Mode, OcpConfig, RtiDiagnostics, RtiOutput};
use crate::path::SplinePath;
use crate::robot::{self, JointState, ModelVariant, RobotParams};

/// Negative rates above this are treated as roundoff and clipped to zero.
const RATE_CLIP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// `(theta, theta_dot)` handed to the most recent iteration.
    pub z: VirtualState,
    /// Current plan.
    pub w: DVector<f64>,
    /// Predicted `(theta, theta_dot)` at the interval boundaries of the plan.
    pub z_plan: Vec<VirtualState>,
    /// Number of completed samples.
    pub k: u64,
    pub mode: Mode,
}

/// Result of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Torques to hold until the next sample.
    pub u: Vector3<f64>,
    /// `(theta, theta_dot)` used at this sample.
    pub z: VirtualState,
    /// Virtual input of the first interval of the new plan.
    pub v: f64,
    pub diagnostics: RtiDiagnostics,
}

/// Initial controller state: theta from projecting the tip onto the path.
pub fn init(x0: &JointState, path: &SplinePath, cfg: &OcpConfig, mode: Mode, params: &RobotParams) -> ControllerState {
    let tip = robot::forward_kinematics(&x0.q, params);
    let theta = path.project(&tip, cfg.theta0.clamp(path.theta0(), path.theta1()));
    let z = VirtualState::new(theta, 0.0);
    let w = DVector::zeros(cfg.n_decision());
    ControllerState {
        z,
        z_plan: ocp::virtual_plan(z, &w, cfg),
        w,
        k: 0,
        mode,
    }
}

/// Owns everything one control loop needs.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: OcpConfig,
    params: RobotParams,
    path: SplinePath,
    variant: ModelVariant,
    sample_period: f64,
    samples_per_interval: u64,
    state: ControllerState,
}

impl Controller {
    /// Sets up a controller for `mode`; `cfg` is passed through [`ocp::configure_mode`].
    pub fn new(
        cfg: &OcpConfig,
        mode: Mode,
        params: RobotParams,
        path: SplinePath,
        sample_period: f64,
        x0: &JointState,
    ) -> Result<Self> {
        params.validate()?;
        let cfg = ocp::configure_mode(cfg, mode)?;
        if !(sample_period > 0.0) {
            return Err(Error::InvalidConfig("sample period must be positive".into()));
        }
        let ratio = cfg.interval_length() / sample_period;
        let samples_per_interval = ratio.round();
        if samples_per_interval < 1.0 || (ratio - samples_per_interval).abs() > 1e-9 * ratio {
            return Err(Error::InvalidConfig(
                "the input interval must be a whole number of sample periods".into(),
            ));
        }
        if !x0.is_finite() {
            return Err(Error::InvalidConfig("initial state is not finite".into()));
        }
        let state = init(x0, &path, &cfg, mode, &params);
        Ok(Self {
            cfg,
            params,
            path,
            variant: ModelVariant::CONTROLLER,
            sample_period,
            samples_per_interval: samples_per_interval as u64,
            state,
        })
    }

    /// Replaces the internal model variant (e.g. a model matched to the plant).
    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn config(&self) -> &OcpConfig {
        &self.cfg
    }

    pub fn path(&self) -> &SplinePath {
        &self.path
    }

    pub fn params(&self) -> &RobotParams {
        &self.params
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    /// Time left in the active input interval at the next sample. Intervals are
    /// fixed in time, so the previous plan remains a feasible continuation.
    pub fn first_interval(&self) -> f64 {
        let elapsed = (self.state.k % self.samples_per_interval) as f64 * self.sample_period;
        self.cfg.interval_length() - elapsed
    }

    /// `(theta, theta_dot)` that the next call to [`step`](Self::step) will use.
    pub fn next_z(&self) -> VirtualState {
        if self.state.k == 0 {
            return self.state.z;
        }
        let mut z = self.state.z.advance(self.state.w[3], self.sample_period);
        if z.theta_dot < 0.0 && z.theta_dot > -RATE_CLIP {
            z.theta_dot = 0.0;
        }
        z
    }

    /// The iteration [`step`](Self::step) would perform, without committing it.
    pub fn solve(&self, x_meas: &JointState) -> Result<(VirtualState, RtiOutput)> {
        if !x_meas.is_finite() {
            return Err(Error::InvalidConfig("measured state is not finite".into()));
        }
        let z = self.next_z();
        let mut w_warm = self.state.w.clone();
        if self.state.k > 0 && self.state.k.is_multiple_of(self.samples_per_interval) {
            w_warm = ocp::shift_plan(&w_warm);
        }
        let model = ArmModel {
            params: &self.params,
            path: &self.path,
            variant: self.variant,
        };
        let x0 = AugmentedState::new(*x_meas, z).to_vector();
        Ok((
            z,
            ocp::rti_step_aligned(&model, &x0, &w_warm, &self.cfg, self.first_interval()),
        ))
    }

    /// One sample: measure, iterate once, return the torques to hold.
    pub fn step(&mut self, x_meas: &JointState) -> Result<StepReport> {
        let (z, out) = self.solve(x_meas)?;
        let u = Vector3::new(out.w[0], out.w[1], out.w[2]);
        let v = out.w[INPUT_DIM - 1];
        self.state.z = z;
        self.state.w = out.w;
        self.state.z_plan = out.z_plan;
        self.state.k += 1;
        Ok(StepReport {
            u,
            z,
            v,
            diagnostics: out.diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (RobotParams, SplinePath, Vector3<f64>) {
        let params = RobotParams::default();
        let q = Vector3::new(0.0, 0.8, 1.3);
        let tip = robot::forward_kinematics(&q, &params);
        let pts: Vec<_> = (0..101)
            .map(|i| {
                let s = i as f64 / 100.0;
                tip + Vector3::new(0.0, 0.15 * s, 0.03 * (4.0 * s).sin())
            })
            .collect();
        (params, SplinePath::fit_waypoints(&pts, 0.0, 1000.0).unwrap(), q)
    }

    fn stop_cfg() -> OcpConfig {
        OcpConfig {
            theta1: 1000.0,
            ..OcpConfig::hello()
        }
    }

    #[test]
    fn init_projects_the_tip() {
        let (params, path, q) = setup();
        let cfg = stop_cfg();
        let cs = init(&JointState::at_rest(q), &path, &cfg, Mode::StopAtEnd, &params);
        assert_eq!(cs.z, VirtualState::new(0.0, 0.0));
        assert_eq!(cs.w, DVector::zeros(40));

        let target = path.eval(437.0);
        let q_mid = robot::inverse_kinematics(&target, robot::Elbow::Positive, &params).unwrap();
        let cs = init(&JointState::at_rest(q_mid), &path, &cfg, Mode::StopAtEnd, &params);
        assert!((cs.z.theta - 437.0).abs() < 1e-4 * 1000.0);
        assert_eq!(cs.z.theta_dot, 0.0);
    }

    #[test]
    fn rejects_misaligned_sample_period() {
        let (params, path, q) = setup();
        let r = Controller::new(
            &stop_cfg(),
            Mode::StopAtEnd,
            params,
            path,
            0.003,
            &JointState::at_rest(q),
        );
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn virtual_state_follows_the_stored_plan() {
        let (params, path, q) = setup();
        let mut c = Controller::new(
            &stop_cfg(),
            Mode::StopAtEnd,
            params.clone(),
            path,
            0.001,
            &JointState::at_rest(q),
        )
        .unwrap();
        let mut x = JointState::at_rest(q);
        let mut prev: Option<(VirtualState, f64)> = None;
        for _ in 0..30 {
            let r = c.step(&x).unwrap();
            assert!(r.u.amax() <= 60.0);
            assert!(r.z.theta_dot >= 0.0);
            if let Some((z, v)) = prev {
                let expect = z.advance(v, 0.001);
                assert!((r.z.theta - expect.theta).abs() <= 1e-12 * (1.0 + expect.theta.abs()));
                assert!((r.z.theta_dot - expect.theta_dot).abs() <= 1e-12 * (1.0 + expect.theta_dot.abs()));
                assert!(r.z.theta >= z.theta);
            }
            prev = Some((r.z, r.v));
            // crude plant: integrate the controller's own model for one sample
            let acc = robot::joint_acceleration(&x, &r.u, ModelVariant::CONTROLLER, &params).unwrap();
            x.q += x.qdot * 0.001;
            x.qdot += acc * 0.001;
        }
        assert!(c.state().z.theta > 0.0);
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let (params, path, q) = setup();
        let x = JointState::at_rest(q);
        let mut a = Controller::new(&stop_cfg(), Mode::StopAtEnd, params.clone(), path.clone(), 0.001, &x).unwrap();
        let mut b = a.clone();
        for _ in 0..5 {
            let ra = a.step(&x).unwrap();
            let rb = b.step(&x).unwrap();
            assert_eq!(ra.u, rb.u);
            assert_eq!(ra.z, rb.z);
        }
    }

    #[test]
    fn goal_state_is_held() {
        let (params, path, _) = setup();
        let cfg = stop_cfg();
        let q_end = robot::inverse_kinematics(&path.eval(1000.0), robot::Elbow::Positive, &params).unwrap();
        let x = JointState::at_rest(q_end);
        let mut c = Controller::new(&cfg, Mode::StopAtEnd, params.clone(), path, 0.001, &x).unwrap();
        assert!((c.state().z.theta - 1000.0).abs() < 1e-6);
        for _ in 0..20 {
            let r = c.step(&x).unwrap();
            assert!(r.u.amax() <= cfg.tau_bar);
            assert!(r.z.theta <= 1000.0 + 1e-6);
        }
        let model = ArmModel::controller(&params, c.path());
        let x0 = AugmentedState::new(x, c.state().z).to_vector();
        let sr = ocp::shoot(&model, &x0, &c.state().w, c.config()).unwrap();
        for node in &sr.nodes {
            assert!(ocp::OcpModel::output(&model, node).norm() < 1e-6);
        }
    }
}
