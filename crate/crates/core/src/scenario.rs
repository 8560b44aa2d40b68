//! Scenario files and the closed-loop simulation.
//!
//! A scenario is a TOML file. Top-level keys describe the run; the optional
//! sections `[ocp]`, `[robot]`, `[plant]` and `[controller]` override
//! defaults, and `[[disturbances]]` lists external torque windows:
//!
//! ```toml
//! name = "clover"
//! mode = "speed_assigned"          # or "stop_at_end"
//! waypoints = "../data/clover.txt" # relative to the scenario file
//! path_range = [0.0, 2700.0]
//! duration = 10.0
//! sample_period = 0.001
//! settle_time = 2.5
//! initial_tip_offset = [0.0, 0.0, 0.005]
//! elbow = "positive"
//!
//! [ocp]
//! thetadot_ref = 250.0
//! qdot_bar = 0.6
//!
//! [plant]
//! gravity_compensation = 0.98
//! velocity_cutoff = 50.0
//!
//! [[disturbances]]
//! t_start = 4.5
//! t_end = 6.5
//! torque = [0.0, 20.0, 0.0]
//! ```

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::augmented::{self, AugmentedState};
use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::log::{fault_code, ClosedLoopLog, LogRow};
use crate::ocp::{Mode, OcpConfig};
use crate::path::{self, SplinePath};
use crate::plant::{self, Disturbance, DisturbanceProfile, VelocityEstimator};
use crate::robot::{self, Elbow, FrictionMode, GravityMode, JointState, ModelVariant, RobotParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Fraction of gravity the robot compensates on its own.
    pub gravity_compensation: f64,
    /// Cutoff of the velocity low-pass in Hz.
    pub velocity_cutoff: f64,
    /// Hand the true joint velocity to the controller instead of the estimate.
    pub exact_state_feedback: bool,
    /// Coulomb friction law of the simulated arm.
    pub friction_mode: FrictionMode,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            gravity_compensation: plant::DEFAULT_GRAVITY_COMPENSATION,
            velocity_cutoff: plant::DEFAULT_CUTOFF_HZ,
            exact_state_feedback: false,
            friction_mode: FrictionMode::Sign,
        }
    }
}

/// Model terms used inside the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub friction_mode: FrictionMode,
    pub gravity_mode: GravityMode,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let v = ModelVariant::CONTROLLER;
        Self {
            friction_mode: v.friction_mode,
            gravity_mode: v.gravity_mode,
        }
    }
}

impl ControllerConfig {
    pub fn variant(&self) -> ModelVariant {
        ModelVariant {
            friction_mode: self.friction_mode,
            gravity_mode: self.gravity_mode,
        }
    }
}

/// Scenario file contents before the waypoints are loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub mode: Mode,
    pub waypoints: String,
    pub path_range: [f64; 2],
    pub duration: f64,
    #[serde(default = "default_sample_period")]
    pub sample_period: f64,
    #[serde(default)]
    pub settle_time: f64,
    /// Offset of the initial tip position from the start of the path (m).
    #[serde(default)]
    pub initial_tip_offset: [f64; 3],
    #[serde(default = "default_elbow")]
    pub elbow: Elbow,
    #[serde(default)]
    pub ocp: OcpConfig,
    #[serde(default)]
    pub robot: RobotParams,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
}

fn default_sample_period() -> f64 {
    0.001
}

fn default_elbow() -> Elbow {
    Elbow::Positive
}

impl ScenarioFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: origin.to_string(),
                line,
                message: e.message().to_string(),
            }
        })
    }
}

/// A validated scenario with its path built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub path: SplinePath,
    pub ocp: OcpConfig,
    pub robot: RobotParams,
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    pub disturbances: DisturbanceProfile,
    pub duration: f64,
    pub sample_period: f64,
    pub settle_time: f64,
    pub initial_state: JointState,
}

const BUILTIN: [(&str, &str, &str); 2] = [
    (
        "clover",
        include_str!("../scenarios/clover.toml"),
        include_str!("../data/clover.txt"),
    ),
    (
        "hello",
        include_str!("../scenarios/hello.toml"),
        include_str!("../data/hello.txt"),
    ),
];

impl Scenario {
    /// Reads a scenario file; the waypoint file is resolved relative to it.
    pub fn load(file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(file)?;
        let sf = ScenarioFile::parse(&text, &file.display().to_string())?;
        let base = file.parent().unwrap_or_else(|| Path::new("."));
        let points = path::load_waypoints(&base.join(&sf.waypoints))?;
        Self::from_file(sf, &points)
    }

    /// Names of the scenarios compiled into the library.
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|b| b.0).collect()
    }

    /// One of the shipped scenarios, independent of the working directory.
    pub fn builtin(name: &str) -> Result<Self> {
        let (_, toml_text, data) = BUILTIN
            .iter()
            .find(|b| b.0 == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario '{name}'")))?;
        let sf = ScenarioFile::parse(toml_text, name)?;
        let points = path::parse_waypoints(data, &sf.waypoints)?;
        Self::from_file(sf, &points)
    }

    pub fn from_file(sf: ScenarioFile, waypoints: &[Vector3<f64>]) -> Result<Self> {
        let [theta0, theta1] = sf.path_range;
        let path = SplinePath::fit_waypoints(waypoints, theta0, theta1)?;
        sf.robot.validate()?;
        let disturbances = DisturbanceProfile::new(sf.disturbances)?;
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{}: {m}", sf.name)));
        if !(sf.sample_period > 0.0 && sf.sample_period.is_finite()) {
            return bad("sample_period must be positive");
        }
        if !(sf.duration >= 0.0 && sf.duration.is_finite()) {
            return bad("duration must be non-negative");
        }
        let ratio = sf.duration / sf.sample_period;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return bad("duration must be a multiple of sample_period");
        }
        if !(sf.settle_time >= 0.0) {
            return bad("settle_time must be non-negative");
        }
        if !(sf.plant.gravity_compensation.is_finite()) {
            return bad("gravity_compensation must be finite");
        }
        if sf.ocp.theta0 < theta0 {
            return bad("ocp.theta0 lies before the start of the path");
        }
        let start = path.eval(sf.ocp.theta0) + Vector3::from(sf.initial_tip_offset);
        let q0 = robot::inverse_kinematics(&start, sf.elbow, &sf.robot)
            .ok_or_else(|| Error::InvalidConfig(format!("{}: initial tip position is out of reach", sf.name)))?;
        // Checks the weights and bounds the same way the controller will.
        crate::ocp::configure_mode(&sf.ocp, sf.mode)?;
        VelocityEstimator::new(sf.plant.velocity_cutoff, Vector3::zeros())?;
        Ok(Self {
            name: sf.name,
            mode: sf.mode,
            path,
            ocp: sf.ocp,
            robot: sf.robot,
            plant: sf.plant,
            controller: sf.controller,
            disturbances,
            duration: sf.duration,
            sample_period: sf.sample_period,
            settle_time: sf.settle_time,
            initial_state: JointState::at_rest(q0),
        })
    }

    /// Number of samples in the run.
    pub fn n_samples(&self) -> usize {
        (self.duration / self.sample_period).round() as usize
    }
}

/// Log of a run and the error that ended it early, if any.
#[derive(Debug)]
pub struct RunOutcome {
    pub log: ClosedLoopLog,
    pub error: Option<Error>,
}

/// Runs the closed loop: measure, control, advance the plant, once per sample.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutcome> {
    run_scenario_timed(sc, 1)
}

/// [`run_scenario`], with each sample's solve repeated `repeats` times on the
/// same inputs and the fastest wall time logged. The trajectory is unchanged;
/// the repeats only keep interruptions by other processes out of the timing.
pub fn run_scenario_timed(sc: &Scenario, repeats: usize) -> Result<RunOutcome> {
    let dt = sc.sample_period;
    let mut x = sc.initial_state;
    let mut estimator = VelocityEstimator::new(sc.plant.velocity_cutoff, Vector3::zeros())?;
    let mut controller = Controller::new(&sc.ocp, sc.mode, sc.robot.clone(), sc.path.clone(), dt, &x)?
        .with_variant(sc.controller.variant());
    let mut log = ClosedLoopLog::new();

    for k in 0..sc.n_samples() {
        let t = k as f64 * dt;
        let qdot_est = estimator.measure(&x.q, dt);
        let qdot_meas = if sc.plant.exact_state_feedback {
            x.qdot
        } else {
            qdot_est
        };
        let x_meas = JointState::new(x.q, qdot_meas);
        let mut fastest = f64::INFINITY;
        for _ in 1..repeats {
            fastest = fastest.min(controller.solve(&x_meas)?.1.diagnostics.wall_time);
        }
        let report = controller.step(&x_meas)?;
        let solve_time = fastest.min(report.diagnostics.wall_time);
        let e = augmented::path_error(&AugmentedState::new(x, report.z), &sc.path, &sc.robot);
        let d = &report.diagnostics;
        log.push(LogRow {
            t,
            q: x.q.into(),
            qdot: x.qdot.into(),
            qdot_est: qdot_est.into(),
            u: report.u.into(),
            theta: report.z.theta,
            theta_dot: report.z.theta_dot,
            v: report.v,
            e: e.into(),
            e_norm: e.norm(),
            cost: d.cost,
            qp_iterations: d.qp_iterations as u32,
            fault: fault_code(d.fault),
            solve_time,
        })?;
        let disturbance = sc.disturbances.torque_at(t);
        let next = plant::plant_step_with_friction(
            &x,
            &report.u,
            &disturbance,
            dt,
            sc.plant.gravity_compensation,
            sc.plant.friction_mode,
            &sc.robot,
        );
        match next {
            Ok(next) => x = next,
            Err(Error::SimulationBlowup { speed, .. }) => {
                return Ok(RunOutcome {
                    log,
                    error: Some(Error::SimulationBlowup { t: t + dt, speed }),
                })
            }
            Err(e) => return Ok(RunOutcome { log, error: Some(e) }),
        }
    }
    Ok(RunOutcome { log, error: None })
}
