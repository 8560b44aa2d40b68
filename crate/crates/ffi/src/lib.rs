//! C interface to the path-following controller and its simulation harness.
//!
//! Objects are opaque handles created by `mpfc_*_new`, `mpfc_scenario_*` or
//! `mpfc_run` and released with the matching `*_free`. Every fallible function returns
//! an [`MpfcStatus`]; on failure a message is available from
//! [`mpfc_last_error`] on the same thread. Vectors of joint quantities are
//! passed as pointers to three doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mpfc::controller::Controller;
use mpfc::log::{fault_code, LogRow};
use mpfc::plant;
use mpfc::robot::JointState;
use mpfc::scenario::{run_scenario, RunOutcome, Scenario};
use mpfc::Error;
use nalgebra::Vector3;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpfcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was malformed, such as a string that is not UTF-8.
    InvalidArgument = 2,
    /// A scenario, parameter set or path was rejected.
    InvalidConfig = 3,
    /// A scenario or waypoint file could not be parsed.
    Parse = 4,
    Io = 5,
    /// The optimal control or QP solver failed.
    Solver = 6,
    /// The simulated plant diverged.
    Simulation = 7,
    /// An index was past the end of a log.
    OutOfRange = 8,
    /// The library panicked; the handle involved should be freed.
    Panic = 9,
}

/// Scenario: path, weights, plant settings and disturbances.
pub struct MpfcScenario(Scenario);

/// Finished closed-loop run and its log.
pub struct MpfcRun(RunOutcome);

/// Controller state carried from one sample to the next.
pub struct MpfcController(Controller);

/// One sample of a closed-loop log.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpfcLogRow {
    pub t: f64,
    pub q: [f64; 3],
    /// True joint velocity of the plant.
    pub qdot: [f64; 3],
    /// Velocity handed to the controller.
    pub qdot_est: [f64; 3],
    pub u: [f64; 3],
    pub theta: f64,
    pub theta_dot: f64,
    pub v: f64,
    pub e: [f64; 3],
    pub e_norm: f64,
    pub cost: f64,
    pub qp_iterations: u32,
    /// 0 none, 1 integrator, 2 QP iteration limit, 3 QP failure.
    pub fault: u8,
    /// Solver wall time in seconds.
    pub solve_time: f64,
}

impl From<&LogRow> for MpfcLogRow {
    fn from(r: &LogRow) -> Self {
        Self {
            t: r.t,
            q: r.q,
            qdot: r.qdot,
            qdot_est: r.qdot_est,
            u: r.u,
            theta: r.theta,
            theta_dot: r.theta_dot,
            v: r.v,
            e: r.e,
            e_norm: r.e_norm,
            cost: r.cost,
            qp_iterations: r.qp_iterations,
            fault: r.fault,
            solve_time: r.solve_time,
        }
    }
}

/// Output of one controller sample.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpfcStepResult {
    /// Torques to hold until the next sample.
    pub u: [f64; 3],
    pub theta: f64,
    pub theta_dot: f64,
    pub v: f64,
    pub cost: f64,
    pub qp_iterations: u32,
    /// Same codes as [`MpfcLogRow::fault`].
    pub fault: u8,
    pub wall_time: f64,
}

/// Timing of a scenario.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpfcScenarioInfo {
    pub sample_period: f64,
    pub duration: f64,
    pub settle_time: f64,
    pub n_samples: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(MpfcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        classify(&e)
    }
}

fn classify(e: &Error) -> Fail {
    let status = match e {
        Error::InvalidParams(_) | Error::InvalidPath(_) | Error::InvalidConfig(_) => MpfcStatus::InvalidConfig,
        Error::Parse { .. } => MpfcStatus::Parse,
        Error::Io(_) => MpfcStatus::Io,
        Error::NonConvergence { .. } | Error::MaxIterations(_) | Error::Infeasible { .. } | Error::Internal(_) => {
            MpfcStatus::Solver
        }
        Error::SimulationBlowup { .. } => MpfcStatus::Simulation,
    };
    Fail(status, e.to_string())
}

fn null(what: &str) -> Fail {
    Fail(MpfcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MpfcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpfcStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            MpfcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MpfcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn vec3_arg(p: *const f64, what: &str) -> Result<Vector3<f64>, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(Vector3::from_column_slice(std::slice::from_raw_parts(p, 3)))
}

unsafe fn vec3_out(p: *mut f64, v: &Vector3<f64>) {
    ptr::copy_nonoverlapping(v.as_ptr(), p, 3);
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpfc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the message of the last failed call on this thread into `buf`.
///
/// Returns the full message length in bytes, excluding the terminating NUL,
/// or 0 if there is none. At most `capacity - 1` bytes are copied and the
/// result is always NUL-terminated when `capacity > 0`.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && capacity > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads one of the scenarios compiled into the library ("clover", "hello").
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_scenario_builtin(name: *const c_char, out: *mut *mut MpfcScenario) -> MpfcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let sc = Scenario::builtin(str_arg(name, "name")?)?;
        *out = Box::into_raw(Box::new(MpfcScenario(sc)));
        Ok(())
    })
}

/// Loads a scenario file; its waypoint file is resolved relative to it.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_scenario_load(path: *const c_char, out: *mut *mut MpfcScenario) -> MpfcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let sc = Scenario::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MpfcScenario(sc)));
        Ok(())
    })
}

/// # Safety
/// `scenario` must be null or a handle from `mpfc_scenario_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpfc_scenario_free(scenario: *mut MpfcScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `scenario` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_scenario_info(scenario: *const MpfcScenario, out: *mut MpfcScenarioInfo) -> MpfcStatus {
    guard(|| {
        let sc = &ref_arg(scenario, "scenario")?.0;
        *out_arg(out, "out")? = MpfcScenarioInfo {
            sample_period: sc.sample_period,
            duration: sc.duration,
            settle_time: sc.settle_time,
            n_samples: sc.n_samples(),
        };
        Ok(())
    })
}

/// Writes the scenario's initial joint positions and velocities.
///
/// # Safety
/// `scenario` must be a live handle; `q` and `qdot` must be valid for three doubles each.
#[no_mangle]
pub unsafe extern "C" fn mpfc_scenario_initial_state(
    scenario: *const MpfcScenario,
    q: *mut f64,
    qdot: *mut f64,
) -> MpfcStatus {
    guard(|| {
        let sc = &ref_arg(scenario, "scenario")?.0;
        if q.is_null() || qdot.is_null() {
            return Err(null("state output"));
        }
        vec3_out(q, &sc.initial_state.q);
        vec3_out(qdot, &sc.initial_state.qdot);
        Ok(())
    })
}

/// Advances the scenario's simulated arm by one sample period under torques
/// `u`, adding the disturbance active at time `t`.
///
/// # Safety
/// `scenario` must be a live handle; `q`, `qdot`, `u` must point to three
/// readable doubles and `q_next`, `qdot_next` to three writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mpfc_plant_step(
    scenario: *const MpfcScenario,
    t: f64,
    q: *const f64,
    qdot: *const f64,
    u: *const f64,
    q_next: *mut f64,
    qdot_next: *mut f64,
) -> MpfcStatus {
    guard(|| {
        let sc = &ref_arg(scenario, "scenario")?.0;
        let x = JointState::new(vec3_arg(q, "q")?, vec3_arg(qdot, "qdot")?);
        let u = vec3_arg(u, "u")?;
        if q_next.is_null() || qdot_next.is_null() {
            return Err(null("state output"));
        }
        let next = plant::plant_step_with_friction(
            &x,
            &u,
            &sc.disturbances.torque_at(t),
            sc.sample_period,
            sc.plant.gravity_compensation,
            sc.plant.friction_mode,
            &sc.robot,
        )?;
        vec3_out(q_next, &next.q);
        vec3_out(qdot_next, &next.qdot);
        Ok(())
    })
}

/// Simulates the scenario in closed loop. A run that ends early (for example
/// because the plant diverged) still returns `MPFC_STATUS_OK` and a handle;
/// query it with [`mpfc_run_status`].
///
/// # Safety
/// `scenario` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_run(scenario: *const MpfcScenario, out: *mut *mut MpfcRun) -> MpfcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let outcome = run_scenario(&ref_arg(scenario, "scenario")?.0)?;
        *out = Box::into_raw(Box::new(MpfcRun(outcome)));
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle from [`mpfc_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpfc_run_free(run: *mut MpfcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// `MPFC_STATUS_OK` if the run reached its end, otherwise the error that
/// stopped it (with its message available from [`mpfc_last_error`]).
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpfc_run_status(run: *const MpfcRun) -> MpfcStatus {
    guard(|| match &ref_arg(run, "run")?.0.error {
        None => Ok(()),
        Some(e) => Err(classify(e)),
    })
}

/// Number of logged samples.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_run_len(run: *const MpfcRun, out: *mut usize) -> MpfcStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(run, "run")?.0.log.len();
        Ok(())
    })
}

/// Copies sample `index` of the log.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_run_row(run: *const MpfcRun, index: usize, out: *mut MpfcLogRow) -> MpfcStatus {
    guard(|| {
        let rows = ref_arg(run, "run")?.0.log.rows();
        let out = out_arg(out, "out")?;
        let row = rows.get(index).ok_or_else(|| {
            Fail(
                MpfcStatus::OutOfRange,
                format!("row {index} requested from a log of {}", rows.len()),
            )
        })?;
        *out = row.into();
        Ok(())
    })
}

/// Writes the log as CSV; `with_timing` adds the solver wall-time column.
///
/// # Safety
/// `run` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpfc_run_write_csv(run: *const MpfcRun, path: *const c_char, with_timing: bool) -> MpfcStatus {
    guard(|| {
        let log = &ref_arg(run, "run")?.0.log;
        let file = File::create(str_arg(path, "path")?).map_err(Error::from)?;
        log.write_csv(BufWriter::new(file), with_timing)?;
        Ok(())
    })
}

/// Creates a controller for the scenario, starting from the given state.
///
/// # Safety
/// `scenario` must be a live handle; `q0` and `qdot0` must point to three
/// doubles each; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_controller_new(
    scenario: *const MpfcScenario,
    q0: *const f64,
    qdot0: *const f64,
    out: *mut *mut MpfcController,
) -> MpfcStatus {
    guard(|| {
        let sc = &ref_arg(scenario, "scenario")?.0;
        let x0 = JointState::new(vec3_arg(q0, "q0")?, vec3_arg(qdot0, "qdot0")?);
        let out = out_arg(out, "out")?;
        let c = Controller::new(
            &sc.ocp,
            sc.mode,
            sc.robot.clone(),
            sc.path.clone(),
            sc.sample_period,
            &x0,
        )?
        .with_variant(sc.controller.variant());
        *out = Box::into_raw(Box::new(MpfcController(c)));
        Ok(())
    })
}

/// # Safety
/// `controller` must be null or a handle from [`mpfc_controller_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpfc_controller_free(controller: *mut MpfcController) {
    if !controller.is_null() {
        drop(Box::from_raw(controller));
    }
}

/// One sample: takes the measured joint state and returns the torques to hold.
///
/// # Safety
/// `controller` must be a live handle; `q` and `qdot` must point to three
/// doubles each; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mpfc_controller_step(
    controller: *mut MpfcController,
    q: *const f64,
    qdot: *const f64,
    out: *mut MpfcStepResult,
) -> MpfcStatus {
    guard(|| {
        let c = &mut out_arg(controller, "controller")?.0;
        let x = JointState::new(vec3_arg(q, "q")?, vec3_arg(qdot, "qdot")?);
        let out = out_arg(out, "out")?;
        let r = c.step(&x)?;
        let d = r.diagnostics;
        *out = MpfcStepResult {
            u: r.u.into(),
            theta: r.z.theta,
            theta_dot: r.z.theta_dot,
            v: r.v,
            cost: d.cost,
            qp_iterations: d.qp_iterations as u32,
            fault: fault_code(d.fault),
            wall_time: d.wall_time,
        };
        Ok(())
    })
}
