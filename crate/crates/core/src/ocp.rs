//! Single-shooting discretization of the path-following optimal control
//! problem and its real-time iteration.
//!
//! The decision vector stacks one piecewise-constant input `(tau, v)` per
//! interval. Shooting integrates the augmented model with the implicit
//! midpoint rule and propagates forward sensitivities, from which a
//! Gauss-Newton QP is assembled and solved once per call to [`rti_step`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::augmented::{self, AugVector, AugmentedState, VirtualState, AUG_DIM, INPUT_DIM};
use crate::error::{Error, Result};
use crate::integrator::{gl2_step_with_sensitivity, Dynamics, Sensitivity};
use crate::path::SplinePath;
use crate::qp::QpProblem;
use crate::robot::{self, ModelVariant, RobotParams};

/// Length of a stage residual: path error (3), theta, theta_dot, tau (3), v.
pub const RESIDUAL_DIM: usize = 9;

pub type Residual = SVector<f64, RESIDUAL_DIM>;

/// Which progress objective the controller pursues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Drive theta to `theta1` and stop there.
    StopAtEnd,
    /// Drive theta_dot to `thetadot_ref`.
    SpeedAssigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    /// Prediction horizon `T` in seconds.
    pub horizon: f64,
    pub n_intervals: usize,
    /// Implicit midpoint steps per input interval.
    pub integrator_steps: usize,
    pub w_e: f64,
    pub w_theta: f64,
    pub w_thetadot: f64,
    pub r_u: f64,
    pub r_v: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub thetadot_ref: f64,
    pub tau_bar: f64,
    pub qdot_bar: f64,
    /// Fraction by which the velocity bound is tightened inside the problem,
    /// leaving room for model mismatch and motion between nodes.
    pub qdot_backoff: f64,
    #[serde(rename = "V_lo")]
    pub v_lo: f64,
    #[serde(rename = "V_hi")]
    pub v_hi: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub thetadot_lo: f64,
    pub thetadot_hi: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self::clover()
    }
}

impl OcpConfig {
    /// Speed-assigned drawing of the clover.
    pub fn clover() -> Self {
        Self {
            horizon: 0.1,
            n_intervals: 10,
            integrator_steps: 1,
            w_e: 1e7,
            w_theta: 0.0,
            w_thetadot: 3e-4,
            r_u: 0.5,
            r_v: 1e-7,
            theta0: 0.0,
            theta1: f64::INFINITY,
            thetadot_ref: 250.0,
            tau_bar: 60.0,
            qdot_bar: 0.6,
            qdot_backoff: 0.0,
            v_lo: -1e4,
            v_hi: 8e3,
            theta_lo: 0.0,
            theta_hi: f64::INFINITY,
            thetadot_lo: 0.0,
            thetadot_hi: f64::INFINITY,
        }
    }

    /// Writing "Hello" and stopping at the end of the word.
    pub fn hello() -> Self {
        Self {
            w_theta: 3e-4,
            w_thetadot: 0.0,
            theta1: 1750.0,
            thetadot_ref: 0.0,
            qdot_bar: 0.5,
            theta_hi: 1750.0,
            ..Self::clover()
        }
    }

    /// Number of decision variables `4 N`.
    pub fn n_decision(&self) -> usize {
        INPUT_DIM * self.n_intervals
    }

    pub fn interval_length(&self) -> f64 {
        self.horizon / self.n_intervals as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.n_intervals == 0 || self.integrator_steps == 0 {
            return bad("interval and integrator step counts must be at least 1");
        }
        if !(self.r_u > 0.0 && self.r_v > 0.0) {
            return bad("input weights r_u and r_v must be positive");
        }
        if !(self.w_e >= 0.0 && self.w_theta >= 0.0 && self.w_thetadot >= 0.0) {
            return bad("state weights must be non-negative");
        }
        if self.w_theta > 0.0 && !self.theta1.is_finite() {
            return bad("w_theta > 0 needs a finite theta1");
        }
        if !(self.tau_bar > 0.0 && self.qdot_bar > 0.0) {
            return bad("tau_bar and qdot_bar must be positive");
        }
        if !(0.0..1.0).contains(&self.qdot_backoff) {
            return bad("qdot_backoff must lie in [0, 1)");
        }
        if !(self.v_lo < self.v_hi) {
            return bad("V_lo must be below V_hi");
        }
        if !(self.theta_lo <= self.theta_hi && self.thetadot_lo <= self.thetadot_hi) {
            return bad("empty bounds on (theta, theta_dot)");
        }
        Ok(())
    }

    /// Joint speed limit imposed at the nodes.
    pub fn qdot_limit(&self) -> f64 {
        self.qdot_bar * (1.0 - self.qdot_backoff)
    }

    /// Lower and upper bounds of one stage input.
    pub fn input_bounds(&self) -> (SVector<f64, INPUT_DIM>, SVector<f64, INPUT_DIM>) {
        let t = self.tau_bar;
        (
            SVector::from([-t, -t, -t, self.v_lo]),
            SVector::from([t, t, t, self.v_hi]),
        )
    }

    /// Bounds of the full decision vector.
    pub fn decision_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let (lo, hi) = self.input_bounds();
        let n = self.n_decision();
        (
            DVector::from_fn(n, |i, _| lo[i % INPUT_DIM]),
            DVector::from_fn(n, |i, _| hi[i % INPUT_DIM]),
        )
    }
}

/// Sets the progress weight and the bounds on `(theta, theta_dot)` for `mode`.
///
/// The one nonzero progress weight of `cfg` is moved to the slot that
/// belongs to `mode`.
pub fn configure_mode(cfg: &OcpConfig, mode: Mode) -> Result<OcpConfig> {
    if cfg.w_theta != 0.0 && cfg.w_thetadot != 0.0 {
        return Err(Error::InvalidConfig(
            "only one of w_theta and w_thetadot may be nonzero".into(),
        ));
    }
    let weight = cfg.w_theta.max(cfg.w_thetadot);
    if !(weight > 0.0) {
        return Err(Error::InvalidConfig("a positive progress weight is required".into()));
    }
    let mut out = cfg.clone();
    out.theta_lo = cfg.theta0;
    out.thetadot_lo = 0.0;
    out.thetadot_hi = f64::INFINITY;
    match mode {
        Mode::StopAtEnd => {
            if !cfg.theta1.is_finite() {
                return Err(Error::InvalidConfig("stopping at the end needs a finite theta1".into()));
            }
            out.w_theta = weight;
            out.w_thetadot = 0.0;
            out.theta_hi = cfg.theta1;
        }
        Mode::SpeedAssigned => {
            out.w_theta = 0.0;
            out.w_thetadot = weight;
            out.theta_hi = f64::INFINITY;
        }
    }
    out.validate()?;
    Ok(out)
}

/// Dynamics of the augmented state plus the path-error output.
pub trait OcpModel: Dynamics<AUG_DIM, INPUT_DIM> {
    fn output(&self, x: &AugVector) -> Vector3<f64>;
    fn output_jacobian(&self, x: &AugVector) -> SMatrix<f64, 3, AUG_DIM>;
}

/// The arm with the timing law, following a spline path.
#[derive(Debug, Clone, Copy)]
pub struct ArmModel<'a> {
    pub params: &'a RobotParams,
    pub path: &'a SplinePath,
    pub variant: ModelVariant,
}

impl<'a> ArmModel<'a> {
    /// Model used by the controller: arctan friction, no gravity.
    pub fn controller(params: &'a RobotParams, path: &'a SplinePath) -> Self {
        Self {
            params,
            path,
            variant: ModelVariant::CONTROLLER,
        }
    }
}

fn split_input(u: &SVector<f64, INPUT_DIM>) -> (Vector3<f64>, f64) {
    (Vector3::new(u[0], u[1], u[2]), u[3])
}

impl Dynamics<AUG_DIM, INPUT_DIM> for ArmModel<'_> {
    fn rhs(&self, x: &AugVector, u: &SVector<f64, INPUT_DIM>) -> Result<AugVector> {
        let (tau, v) = split_input(u);
        let aug = AugmentedState::from_vector(x);
        Ok(augmented::augmented_rhs(&aug, &tau, v, self.variant, self.params)?.to_vector())
    }

    fn jacobians(
        &self,
        x: &AugVector,
        u: &SVector<f64, INPUT_DIM>,
    ) -> Result<(
        AugVector,
        SMatrix<f64, AUG_DIM, AUG_DIM>,
        SMatrix<f64, AUG_DIM, INPUT_DIM>,
    )> {
        let (tau, v) = split_input(u);
        let aug = AugmentedState::from_vector(x);
        let jac = robot::acceleration_jacobians(&aug.robot, &tau, self.variant, self.params)?;
        let mut f = AugVector::zeros();
        f.fixed_rows_mut::<3>(0).copy_from(&aug.robot.qdot);
        f.fixed_rows_mut::<3>(3).copy_from(&jac.qddot);
        f[6] = aug.virt.theta_dot;
        f[7] = v;
        let mut a = SMatrix::<f64, AUG_DIM, AUG_DIM>::zeros();
        a.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&jac.d_q);
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&jac.d_qdot);
        a[(6, 7)] = 1.0;
        let mut b = SMatrix::<f64, AUG_DIM, INPUT_DIM>::zeros();
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&jac.d_tau);
        b[(7, 3)] = 1.0;
        Ok((f, a, b))
    }
}

impl OcpModel for ArmModel<'_> {
    fn output(&self, x: &AugVector) -> Vector3<f64> {
        augmented::path_error(&AugmentedState::from_vector(x), self.path, self.params)
    }

    fn output_jacobian(&self, x: &AugVector) -> SMatrix<f64, 3, AUG_DIM> {
        let q = Vector3::new(x[0], x[1], x[2]);
        let mut j = SMatrix::<f64, 3, AUG_DIM>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&robot::kinematic_jacobian(&q, self.params));
        j.set_column(6, &-self.path.derivative(x[6], 1));
        j
    }
}

/// Everything shooting produces for one decision vector.
#[derive(Debug, Clone)]
pub struct ShootingResult {
    /// Augmented state at the interval boundaries, `N + 1` entries.
    pub nodes: Vec<AugVector>,
    /// `d node / d w` for each node.
    pub node_sensitivities: Vec<Sensitivity<AUG_DIM>>,
    /// Weighted stage residuals, one per quadrature point.
    pub residuals: Vec<Residual>,
    /// `d r / d w` for each residual (`9 x 4N`).
    pub residual_jacobians: Vec<DMatrix<f64>>,
    /// Quadrature weight of each residual.
    pub quadrature_weights: Vec<f64>,
    /// `sum_k h_k |r_k|^2`.
    pub cost: f64,
}

fn stage_input(w: &DVector<f64>, k: usize) -> SVector<f64, INPUT_DIM> {
    SVector::from_fn(|i, _| w[INPUT_DIM * k + i])
}

fn weight_roots(cfg: &OcpConfig) -> (f64, f64, f64, f64, f64) {
    (
        cfg.w_e.sqrt(),
        cfg.w_theta.sqrt(),
        cfg.w_thetadot.sqrt(),
        cfg.r_u.sqrt(),
        cfg.r_v.sqrt(),
    )
}

/// Weighted residual and its Jacobian at one quadrature point.
fn residual<M: OcpModel + ?Sized>(
    model: &M,
    cfg: &OcpConfig,
    x: &AugVector,
    s: &Sensitivity<AUG_DIM>,
    u: &SVector<f64, INPUT_DIM>,
    stage: usize,
) -> (Residual, DMatrix<f64>) {
    let (se, sth, sthd, su, sv) = weight_roots(cfg);
    let nw = s.ncols();
    let mut r = Residual::zeros();
    let mut jac = DMatrix::zeros(RESIDUAL_DIM, nw);

    if se > 0.0 {
        let e = model.output(x);
        r.fixed_rows_mut::<3>(0).copy_from(&(e * se));
        let de = model.output_jacobian(x) * s * se;
        jac.rows_mut(0, 3).copy_from(&de);
    }
    if sth > 0.0 {
        r[3] = sth * (x[6] - cfg.theta1);
        jac.row_mut(3).copy_from(&(s.row(6) * sth));
    }
    if sthd > 0.0 {
        r[4] = sthd * (x[7] - cfg.thetadot_ref);
        jac.row_mut(4).copy_from(&(s.row(7) * sthd));
    }
    for i in 0..3 {
        r[5 + i] = su * u[i];
        jac[(5 + i, INPUT_DIM * stage + i)] = su;
    }
    r[8] = sv * u[3];
    jac[(8, INPUT_DIM * stage + 3)] = sv;
    (r, jac)
}

/// Integrates the model over the horizon for the decision vector `w`.
pub fn shoot<M: OcpModel + ?Sized>(
    model: &M,
    x0: &AugVector,
    w: &DVector<f64>,
    cfg: &OcpConfig,
) -> Result<ShootingResult> {
    shoot_aligned(model, x0, w, cfg, cfg.interval_length())
}

/// Like [`shoot`], but the first interval lasts only `first_interval`, so the
/// nodes stay on a grid fixed in time while samples advance inside an interval.
pub fn shoot_aligned<M: OcpModel + ?Sized>(
    model: &M,
    x0: &AugVector,
    w: &DVector<f64>,
    cfg: &OcpConfig,
    first_interval: f64,
) -> Result<ShootingResult> {
    let nw = cfg.n_decision();
    check_first_interval(first_interval, cfg)?;
    if w.len() != nw {
        return Err(Error::InvalidConfig(format!(
            "decision vector has length {}, expected {nw}",
            w.len()
        )));
    }
    let steps = cfg.integrator_steps;
    let h = cfg.interval_length() / steps as f64;
    let n_quad = cfg.n_intervals * steps;

    let mut nodes = Vec::with_capacity(cfg.n_intervals + 1);
    let mut node_sens = Vec::with_capacity(cfg.n_intervals + 1);
    let mut residuals = Vec::with_capacity(n_quad);
    let mut jacobians = Vec::with_capacity(n_quad);
    let mut weights = Vec::with_capacity(n_quad);

    let mut x = *x0;
    let mut s = Sensitivity::<AUG_DIM>::zeros(nw);
    nodes.push(x);
    node_sens.push(s.clone());
    let mut cost = 0.0;
    for k in 0..cfg.n_intervals {
        let u = stage_input(w, k);
        let mut su = Sensitivity::<INPUT_DIM>::zeros(nw);
        for i in 0..INPUT_DIM {
            su[(i, INPUT_DIM * k + i)] = 1.0;
        }
        let h = if k == 0 { first_interval / steps as f64 } else { h };
        for _ in 0..steps {
            let (r, jac) = residual(model, cfg, &x, &s, &u, k);
            cost += h * r.norm_squared();
            weights.push(h);
            residuals.push(r);
            jacobians.push(jac);
            let (xn, sn) = gl2_step_with_sensitivity(model, &x, &s, &u, &su, h)?;
            x = xn;
            s = sn;
        }
        nodes.push(x);
        node_sens.push(s.clone());
    }
    Ok(ShootingResult {
        nodes,
        node_sensitivities: node_sens,
        residuals,
        residual_jacobians: jacobians,
        quadrature_weights: weights,
        cost,
    })
}

/// Gauss-Newton QP in the step `dw` around `w`.
pub fn build_qp(sr: &ShootingResult, w: &DVector<f64>, cfg: &OcpConfig) -> QpProblem {
    let nw = w.len();
    let mut h = DMatrix::zeros(nw, nw);
    let mut g = DVector::zeros(nw);
    for ((r, jac), &hk) in sr
        .residuals
        .iter()
        .zip(&sr.residual_jacobians)
        .zip(&sr.quadrature_weights)
    {
        h.gemm_tr(2.0 * hk, jac, jac, 1.0);
        g.gemv_tr(2.0 * hk, jac, r, 1.0);
    }
    let eps = 1e-8 * h.trace() / nw as f64;
    for i in 0..nw {
        h[(i, i)] += eps;
    }

    let qdot_limit = cfg.qdot_limit();
    let stage = cfg.horizon / cfg.n_intervals as f64;
    let (lo, hi) = cfg.decision_bounds();
    let lb = lo - w;
    let ub = hi - w;

    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut push = |row: DVector<f64>, b: f64| {
        rows.push(row);
        rhs.push(b);
    };
    for (x, s) in sr.nodes.iter().zip(&sr.node_sensitivities).skip(1) {
        for i in 0..3 {
            let sq = s.row(3 + i).transpose();
            push(sq.clone(), qdot_limit - x[3 + i]);
            push(-sq, qdot_limit + x[3 + i]);
        }
        let sth = s.row(6).transpose();
        let sthd = s.row(7).transpose();
        if cfg.theta_hi.is_finite() {
            if cfg.thetadot_lo >= 0.0 {
                // Stopping row: the progress left must cover one interval at the current
                // rate. It implies theta <= theta_hi and lets the plan appended at each
                // shift brake within its last interval (given v_lo allows -theta_dot / T),
                // so the next problem stays feasible.
                push(&sth + &sthd * stage, cfg.theta_hi - x[6] - stage * x[7]);
            } else {
                push(sth.clone(), cfg.theta_hi - x[6]);
            }
        }
        if cfg.theta_lo.is_finite() {
            push(-sth, x[6] - cfg.theta_lo);
        }
        if cfg.thetadot_hi.is_finite() {
            push(sthd.clone(), cfg.thetadot_hi - x[7]);
        }
        if cfg.thetadot_lo.is_finite() {
            push(-sthd, x[7] - cfg.thetadot_lo);
        }
    }
    let a = DMatrix::from_fn(rows.len(), nw, |r, c| rows[r][c]);
    QpProblem {
        h,
        g,
        a,
        b: DVector::from_vec(rhs),
        lb,
        ub,
    }
}

/// What went wrong in a real-time iteration, if anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Shooting failed; the previous plan is kept.
    Integrator,
    /// The QP hit its iteration limit; the bound-projected unconstrained step was used.
    QpIterations,
    /// The QP could not be solved at all; the previous plan is kept.
    Qp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtiDiagnostics {
    /// Cost of the warm-start plan.
    pub cost: f64,
    pub step_norm: f64,
    pub qp_iterations: usize,
    /// Largest relaxation of a linearized state constraint (0 if none).
    pub relaxation: f64,
    /// Wall time of the whole iteration in seconds.
    pub wall_time: f64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct RtiOutput {
    pub w: DVector<f64>,
    /// Predicted `(theta, theta_dot)` at the interval boundaries under the new plan.
    pub z_plan: Vec<VirtualState>,
    pub diagnostics: RtiDiagnostics,
}

fn check_first_interval(first_interval: f64, cfg: &OcpConfig) -> Result<()> {
    let full = cfg.interval_length();
    if first_interval > 0.0 && first_interval <= full * (1.0 + 1e-12) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "first interval {first_interval} must lie in (0, {full}]"
        )))
    }
}

/// Closed-form `z` trajectory of the timing law under the plan `w`.
pub fn virtual_plan(z0: VirtualState, w: &DVector<f64>, cfg: &OcpConfig) -> Vec<VirtualState> {
    virtual_plan_aligned(z0, w, cfg, cfg.interval_length())
}

/// [`virtual_plan`] with a shortened first interval, as in [`shoot_aligned`].
pub fn virtual_plan_aligned(
    z0: VirtualState,
    w: &DVector<f64>,
    cfg: &OcpConfig,
    first_interval: f64,
) -> Vec<VirtualState> {
    let dt = cfg.interval_length();
    let mut out = Vec::with_capacity(cfg.n_intervals + 1);
    let mut z = z0;
    out.push(z);
    for k in 0..cfg.n_intervals {
        z = z.advance(w[INPUT_DIM * k + 3], if k == 0 { first_interval } else { dt });
        out.push(z);
    }
    out
}

/// Projects `w` onto the input bounds.
pub fn clamp_to_bounds(w: &DVector<f64>, cfg: &OcpConfig) -> DVector<f64> {
    let (lo, hi) = cfg.decision_bounds();
    DVector::from_fn(w.len(), |i, _| w[i].clamp(lo[i], hi[i]))
}

/// One shoot, one QP, one step.
pub fn rti_step<M: OcpModel + ?Sized>(model: &M, x0: &AugVector, w_warm: &DVector<f64>, cfg: &OcpConfig) -> RtiOutput {
    rti_step_aligned(model, x0, w_warm, cfg, cfg.interval_length())
}

/// [`rti_step`] on a grid whose first interval lasts `first_interval`.
pub fn rti_step_aligned<M: OcpModel + ?Sized>(
    model: &M,
    x0: &AugVector,
    w_warm: &DVector<f64>,
    cfg: &OcpConfig,
    first_interval: f64,
) -> RtiOutput {
    let start = Instant::now();
    let z0 = VirtualState::new(x0[6], x0[7]);
    let held = |fault: Fault, cost: f64| RtiOutput {
        w: w_warm.clone(),
        z_plan: virtual_plan_aligned(z0, w_warm, cfg, first_interval),
        diagnostics: RtiDiagnostics {
            cost,
            step_norm: 0.0,
            qp_iterations: 0,
            relaxation: 0.0,
            wall_time: start.elapsed().as_secs_f64(),
            fault: Some(fault),
        },
    };

    let sr = match shoot_aligned(model, x0, w_warm, cfg, first_interval) {
        Ok(sr) => sr,
        Err(_) => return held(Fault::Integrator, f64::NAN),
    };
    let qp = build_qp(&sr, w_warm, cfg);
    let (dw, iterations, relaxation, fault) = match qp.solve_elastic() {
        Ok(sol) => (sol.x, sol.iterations, sol.relaxation, None),
        Err(Error::MaxIterations(it)) => match qp.h.clone().cholesky() {
            Some(chol) => {
                let free = -chol.solve(&qp.g);
                let dw = DVector::from_fn(free.len(), |i, _| free[i].clamp(qp.lb[i], qp.ub[i]));
                (dw, it, 0.0, Some(Fault::QpIterations))
            }
            None => return held(Fault::Qp, sr.cost),
        },
        Err(_) => return held(Fault::Qp, sr.cost),
    };
    let w = clamp_to_bounds(&(w_warm + &dw), cfg);
    let step_norm = (&w - w_warm).norm();
    RtiOutput {
        z_plan: virtual_plan_aligned(z0, &w, cfg, first_interval),
        w,
        diagnostics: RtiDiagnostics {
            cost: sr.cost,
            step_norm,
            qp_iterations: iterations,
            relaxation,
            wall_time: start.elapsed().as_secs_f64(),
            fault,
        },
    }
}

/// Drops the first stage of a plan and repeats the last one.
pub fn shift_plan(w: &DVector<f64>) -> DVector<f64> {
    let n = w.len();
    DVector::from_fn(n, |i, _| {
        let j = i + INPUT_DIM;
        if j < n {
            w[j]
        } else {
            w[i]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::gl2_step;
    use crate::robot::JointState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Linear augmented model with a linear output, for exactness checks.
    struct LinearModel {
        a: SMatrix<f64, AUG_DIM, AUG_DIM>,
        b: SMatrix<f64, AUG_DIM, INPUT_DIM>,
        c: SMatrix<f64, 3, AUG_DIM>,
        offset: Vector3<f64>,
    }

    impl LinearModel {
        fn new() -> Self {
            let mut a = SMatrix::<f64, AUG_DIM, AUG_DIM>::zeros();
            a.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
            for i in 0..3 {
                a[(3 + i, 3 + i)] = -1.0;
                a[(3 + i, i)] = -0.5;
            }
            a[(6, 7)] = 1.0;
            let mut b = SMatrix::<f64, AUG_DIM, INPUT_DIM>::zeros();
            for i in 0..3 {
                b[(3 + i, i)] = 2.0;
            }
            b[(7, 3)] = 1.0;
            let mut c = SMatrix::<f64, 3, AUG_DIM>::zeros();
            c.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
            c[(0, 6)] = -1e-3;
            Self {
                a,
                b,
                c,
                offset: Vector3::new(0.01, -0.02, 0.005),
            }
        }
    }

    impl Dynamics<AUG_DIM, INPUT_DIM> for LinearModel {
        fn rhs(&self, x: &AugVector, u: &SVector<f64, INPUT_DIM>) -> Result<AugVector> {
            Ok(self.a * x + self.b * u)
        }
        fn jacobians(
            &self,
            x: &AugVector,
            u: &SVector<f64, INPUT_DIM>,
        ) -> Result<(
            AugVector,
            SMatrix<f64, AUG_DIM, AUG_DIM>,
            SMatrix<f64, AUG_DIM, INPUT_DIM>,
        )> {
            Ok((self.rhs(x, u)?, self.a, self.b))
        }
    }

    impl OcpModel for LinearModel {
        fn output(&self, x: &AugVector) -> Vector3<f64> {
            self.c * x - self.offset
        }
        fn output_jacobian(&self, _: &AugVector) -> SMatrix<f64, 3, AUG_DIM> {
            self.c
        }
    }

    struct ZeroModel;
    impl Dynamics<AUG_DIM, INPUT_DIM> for ZeroModel {
        fn rhs(&self, _: &AugVector, _: &SVector<f64, INPUT_DIM>) -> Result<AugVector> {
            Ok(AugVector::zeros())
        }
        fn jacobians(
            &self,
            _: &AugVector,
            _: &SVector<f64, INPUT_DIM>,
        ) -> Result<(
            AugVector,
            SMatrix<f64, AUG_DIM, AUG_DIM>,
            SMatrix<f64, AUG_DIM, INPUT_DIM>,
        )> {
            Ok((AugVector::zeros(), SMatrix::zeros(), SMatrix::zeros()))
        }
    }
    impl OcpModel for ZeroModel {
        fn output(&self, _: &AugVector) -> Vector3<f64> {
            Vector3::zeros()
        }
        fn output_jacobian(&self, _: &AugVector) -> SMatrix<f64, 3, AUG_DIM> {
            SMatrix::zeros()
        }
    }

    fn zero_weights(mut cfg: OcpConfig) -> OcpConfig {
        cfg.w_e = 0.0;
        cfg.w_theta = 0.0;
        cfg.w_thetadot = 0.0;
        cfg.r_u = 0.0;
        cfg.r_v = 0.0;
        cfg
    }

    /// A short straight path in front of the arm and a state near it.
    fn arm_setup() -> (RobotParams, SplinePath, AugVector) {
        let params = RobotParams::default();
        let q = Vector3::new(0.1, 0.7, 1.2);
        let tip = robot::forward_kinematics(&q, &params);
        let pts: Vec<_> = (0..41)
            .map(|i| {
                let s = i as f64 / 40.0;
                tip + Vector3::new(0.0, 0.1 * s, 0.02 * (6.0 * s).sin())
            })
            .collect();
        let path = SplinePath::fit_waypoints(&pts, 0.0, 400.0).unwrap();
        let aug = AugmentedState::new(
            JointState::new(q + Vector3::new(0.002, -0.001, 0.001), Vector3::new(0.05, -0.1, 0.08)),
            VirtualState::new(1.0, 20.0),
        );
        (params, path, aug.to_vector())
    }

    fn random_w(rng: &mut ChaCha8Rng, cfg: &OcpConfig, scale: f64) -> DVector<f64> {
        let (lo, hi) = cfg.decision_bounds();
        DVector::from_fn(cfg.n_decision(), |i, _| scale * rng.random_range(lo[i]..hi[i]))
    }

    #[test]
    fn presets_match_table_values() {
        let h = OcpConfig::hello();
        assert_eq!(
            (h.w_theta, h.w_thetadot, h.theta1, h.qdot_bar),
            (3e-4, 0.0, 1750.0, 0.5)
        );
        let c = OcpConfig::clover();
        assert_eq!(
            (c.w_theta, c.w_thetadot, c.thetadot_ref, c.qdot_bar),
            (0.0, 3e-4, 250.0, 0.6)
        );
        assert!(c.theta1.is_infinite());
        for cfg in [h, c] {
            assert_eq!((cfg.w_e, cfg.r_u, cfg.r_v, cfg.tau_bar), (1e7, 0.5, 1e-7, 60.0));
            assert_eq!((cfg.v_lo, cfg.v_hi, cfg.theta0), (-1e4, 8e3, 0.0));
            assert_eq!((cfg.horizon, cfg.n_intervals), (0.1, 10));
            assert_eq!(cfg.n_decision(), 40);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn configure_mode_sets_weights_and_bounds() {
        let stop = configure_mode(&OcpConfig::hello(), Mode::StopAtEnd).unwrap();
        assert_eq!((stop.w_theta, stop.w_thetadot), (3e-4, 0.0));
        assert_eq!((stop.theta_lo, stop.theta_hi, stop.thetadot_lo), (0.0, 1750.0, 0.0));
        assert!(stop.thetadot_hi.is_infinite());

        let speed = configure_mode(&OcpConfig::clover(), Mode::SpeedAssigned).unwrap();
        assert_eq!((speed.w_theta, speed.w_thetadot), (0.0, 3e-4));
        assert!(speed.theta_hi.is_infinite());

        let moved = configure_mode(&OcpConfig::hello(), Mode::SpeedAssigned).unwrap();
        assert_eq!((moved.w_theta, moved.w_thetadot), (0.0, 3e-4));

        let mut both = OcpConfig::hello();
        both.w_thetadot = 1e-4;
        assert!(configure_mode(&both, Mode::StopAtEnd).is_err());
        assert!(configure_mode(&OcpConfig::clover(), Mode::StopAtEnd).is_err());
    }

    #[test]
    fn serde_uses_table_names() {
        let text = "w_e = 2.0\nV_lo = -5.0\nV_hi = 5.0\ntheta1 = inf\n";
        let cfg: OcpConfig = toml::from_str(text).unwrap();
        assert_eq!((cfg.w_e, cfg.v_lo, cfg.v_hi), (2.0, -5.0, 5.0));
        assert!(toml::from_str::<OcpConfig>("bogus = 1").is_err());
    }

    #[test]
    fn quadrature_of_constant_input_cost() {
        let cfg = OcpConfig {
            n_intervals: 1,
            r_u: 0.5,
            ..zero_weights(OcpConfig::clover())
        };
        let w = DVector::from_column_slice(&[3.0, -4.0, 12.0, 100.0]);
        let sr = shoot(&ZeroModel, &AugVector::zeros(), &w, &cfg).unwrap();
        assert!((sr.cost - cfg.horizon * 0.5 * 169.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_cost() {
        let (params, path, x0) = arm_setup();
        let model = ArmModel::controller(&params, &path);
        let cfg = zero_weights(OcpConfig::clover());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sr = shoot(&model, &x0, &random_w(&mut rng, &cfg, 0.2), &cfg).unwrap();
        assert_eq!(sr.cost, 0.0);
        assert_eq!(sr.nodes[0], x0);
        assert_eq!(sr.nodes.len(), 11);
    }

    /// RK4 on a fine grid with trapezoidal quadrature of the running cost.
    fn reference_cost(model: &ArmModel, x0: &AugVector, w: &DVector<f64>, cfg: &OcpConfig) -> f64 {
        let sub = 400;
        let h = cfg.interval_length() / sub as f64;
        let running = |x: &AugVector, u: &SVector<f64, INPUT_DIM>| {
            let e = model.output(x);
            cfg.w_e * e.norm_squared()
                + cfg.w_thetadot * (x[7] - cfg.thetadot_ref).powi(2)
                + cfg.r_u * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
                + cfg.r_v * u[3] * u[3]
        };
        let mut x = *x0;
        let mut cost = 0.0;
        for k in 0..cfg.n_intervals {
            let u = stage_input(w, k);
            for _ in 0..sub {
                let l0 = running(&x, &u);
                let k1 = model.rhs(&x, &u).unwrap();
                let k2 = model.rhs(&(x + k1 * (h / 2.0)), &u).unwrap();
                let k3 = model.rhs(&(x + k2 * (h / 2.0)), &u).unwrap();
                let k4 = model.rhs(&(x + k3 * h), &u).unwrap();
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                cost += 0.5 * h * (l0 + running(&x, &u));
            }
        }
        cost
    }

    #[test]
    fn refined_cost_matches_reference_integration() {
        let (params, path, x0) = arm_setup();
        let mut x0 = x0;
        x0.fixed_rows_mut::<3>(3).fill(0.0);
        let model = ArmModel::controller(&params, &path);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = OcpConfig {
            integrator_steps: 100,
            ..OcpConfig::clover()
        };
        for _ in 0..5 {
            let w = random_w(&mut rng, &cfg, 0.02);
            let j = shoot(&model, &x0, &w, &cfg).unwrap().cost;
            let reference = reference_cost(&model, &x0, &w, &cfg);
            assert!(((j - reference) / reference).abs() < 1e-3, "{j} vs {reference}");
        }
    }

    #[test]
    fn arm_sensitivities_match_finite_differences() {
        let (params, path, _) = arm_setup();
        let model = ArmModel::controller(&params, &path);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 0.01;
        for _ in 0..50 {
            let aug = AugmentedState::new(
                JointState::new(
                    Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
                    Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6)),
                ),
                VirtualState::new(rng.random_range(0.0..400.0), rng.random_range(0.0..250.0)),
            );
            let x = aug.to_vector();
            let u = SVector::<f64, INPUT_DIM>::from_fn(|i, _| {
                if i < 3 {
                    rng.random_range(-60.0..60.0)
                } else {
                    rng.random_range(-1e4..8e3)
                }
            });
            let xs = Sensitivity::<AUG_DIM>::from_fn(AUG_DIM + INPUT_DIM, |r, c| (r == c) as u8 as f64);
            let us = Sensitivity::<INPUT_DIM>::from_fn(AUG_DIM + INPUT_DIM, |r, c| (c == AUG_DIM + r) as u8 as f64);
            let (_, s) = gl2_step_with_sensitivity(&model, &x, &xs, &u, &us, h).unwrap();
            for p in 0..AUG_DIM + INPUT_DIM {
                let eps = if p < AUG_DIM { 1e-6 } else { 1e-4 };
                let shifted = |sign: f64| {
                    let (mut xp, mut up) = (x, u);
                    if p < AUG_DIM {
                        xp[p] += sign * eps;
                    } else {
                        up[p - AUG_DIM] += sign * eps;
                    }
                    gl2_step(&model, &xp, &up, h).unwrap()
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
                for r in 0..AUG_DIM {
                    let err = (fd[r] - s[(r, p)]).abs() / s[(r, p)].abs().max(1e-3);
                    assert!(err < 1e-5, "param {p} row {r}: {} vs {}", s[(r, p)], fd[r]);
                }
            }
        }
    }

    #[test]
    fn zero_residuals_give_zero_step() {
        let (params, path, x0) = arm_setup();
        let model = ArmModel::controller(&params, &path);
        let cfg = OcpConfig {
            r_u: 1.0,
            r_v: 1.0,
            ..zero_weights(OcpConfig::clover())
        };
        let w = DVector::zeros(cfg.n_decision());
        let sr = shoot(&model, &x0, &w, &cfg).unwrap();
        let qp = build_qp(&sr, &w, &cfg);
        assert_eq!(qp.g, DVector::zeros(40));
        // relax the state rows so the zero step is feasible
        let mut loose = qp.clone();
        loose.b.fill(1e9);
        let sol = loose.solve().unwrap();
        assert_eq!(sol.x, DVector::zeros(40));
    }

    #[test]
    fn input_only_hessian_is_scaled_identity() {
        let cfg = OcpConfig {
            n_intervals: 1,
            r_u: 0.5,
            r_v: 0.0,
            ..zero_weights(OcpConfig::clover())
        };
        let w = DVector::from_column_slice(&[1.0, 2.0, 3.0, 0.0]);
        let sr = shoot(&LinearModel::new(), &AugVector::zeros(), &w, &cfg).unwrap();
        let qp = build_qp(&sr, &w, &cfg);
        let eps = 1e-8 * (3.0 * 2.0 * cfg.horizon * 0.5) / 4.0;
        for i in 0..3 {
            assert!((qp.h[(i, i)] - eps - 2.0 * cfg.horizon * 0.5).abs() < 1e-15);
        }
        assert!((qp.h[(3, 3)] - eps).abs() < 1e-20);
    }

    #[test]
    fn hessian_matches_stacked_assembly() {
        let (params, path, x0) = arm_setup();
        let model = ArmModel::controller(&params, &path);
        let cfg = OcpConfig::clover();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_w(&mut rng, &cfg, 0.1);
        let sr = shoot(&model, &x0, &w, &cfg).unwrap();
        let qp = build_qp(&sr, &w, &cfg);
        let m = sr.residuals.len() * RESIDUAL_DIM;
        let mut stacked = DMatrix::zeros(m, w.len());
        let mut rvec = DVector::zeros(m);
        for (k, (r, j)) in sr.residuals.iter().zip(&sr.residual_jacobians).enumerate() {
            let s = (2.0 * sr.quadrature_weights[k]).sqrt();
            stacked.rows_mut(k * RESIDUAL_DIM, RESIDUAL_DIM).copy_from(&(j * s));
            rvec.rows_mut(k * RESIDUAL_DIM, RESIDUAL_DIM).copy_from(&(r * s));
        }
        let mut h = stacked.transpose() * &stacked;
        let eps = 1e-8 * h.trace() / w.len() as f64;
        h += DMatrix::identity(w.len(), w.len()) * eps;
        let g = stacked.transpose() * rvec;
        assert_eq!(qp.h.shape(), (40, 40));
        assert!((&qp.h - &h).amax() <= 1e-12 * h.amax());
        assert!((&qp.g - &g).amax() <= 1e-12 * g.amax());
        assert!(qp.h.clone().cholesky().is_some());
    }

    #[test]
    fn linear_model_converges_in_one_step() {
        let model = LinearModel::new();
        // comparable curvature in every direction, so the regularization is negligible
        let cfg = OcpConfig {
            qdot_bar: 0.02,
            w_e: 100.0,
            w_thetadot: 1.0,
            thetadot_ref: 5.0,
            r_u: 1.0,
            r_v: 1.0,
            v_lo: -100.0,
            v_hi: 100.0,
            ..OcpConfig::clover()
        };
        // starts faster than the velocity bound allows, so those rows are active
        let x0 = AugVector::from_column_slice(&[0.0, 0.0, 0.0, 0.05, -0.01, 0.0, 0.0, 1.0]);
        let w0 = DVector::zeros(cfg.n_decision());
        let first = rti_step(&model, &x0, &w0, &cfg);
        assert_eq!(first.diagnostics.fault, None);
        assert!(first.diagnostics.step_norm > 1e-3);
        let second = rti_step(&model, &x0, &first.w, &cfg);
        assert!(second.diagnostics.step_norm < 1e-8, "{}", second.diagnostics.step_norm);
        // the velocity rows are active in this instance
        let sr = shoot(&model, &x0, &first.w, &cfg).unwrap();
        let peak = sr.nodes[1..]
            .iter()
            .map(|x| x[3].abs().max(x[4].abs()))
            .fold(0.0, f64::max);
        assert!((peak - 0.02).abs() < 1e-9, "{peak}");
    }

    #[test]
    fn repeated_iterations_reach_a_fixed_point() {
        let (params, path, x0) = arm_setup();
        let model = ArmModel::controller(&params, &path);
        let cfg = OcpConfig::clover();
        let mut w = DVector::zeros(cfg.n_decision());
        let mut last = f64::INFINITY;
        for _ in 0..60 {
            let out = rti_step(&model, &x0, &w, &cfg);
            assert_eq!(out.diagnostics.fault, None);
            w = out.w;
            last = out.diagnostics.step_norm;
            if last < 1e-9 * (1.0 + w.norm()) {
                break;
            }
        }
        assert!(last < 1e-6 * (1.0 + w.norm()), "{last}");
        let again = rti_step(&model, &x0, &w, &cfg);
        assert!(again.diagnostics.step_norm < 1e-6 * (1.0 + w.norm()));

        // KKT of the linearization at the fixed point
        let sr = shoot(&model, &x0, &w, &cfg).unwrap();
        let qp = build_qp(&sr, &w, &cfg);
        let sol = qp.solve().unwrap();
        let kkt = qp.kkt_residuals(&sol);
        assert!(kkt.stationarity < 1e-8 * (1.0 + qp.g.amax()), "{kkt:?}");
        assert!(kkt.primal < 1e-10 && kkt.complementarity < 1e-8, "{kkt:?}");
    }

    #[test]
    fn gauss_newton_step_is_a_descent_direction() {
        let (params, path, x0) = arm_setup();
        let model = ArmModel::controller(&params, &path);
        let cfg = OcpConfig::clover();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let w = random_w(&mut rng, &cfg, 0.05);
            let sr = shoot(&model, &x0, &w, &cfg).unwrap();
            let mut qp = build_qp(&sr, &w, &cfg);
            qp.a = DMatrix::zeros(0, w.len());
            qp.b = DVector::zeros(0);
            let sol = qp.solve().unwrap();
            assert!(sol.x.norm() > 0.0);
            assert!(qp.g.dot(&sol.x) < 0.0);
        }
    }

    #[test]
    fn plan_stays_inside_input_bounds() {
        let (params, path, x0) = arm_setup();
        let model = ArmModel::controller(&params, &path);
        let cfg = OcpConfig::clover();
        let (lo, hi) = cfg.decision_bounds();
        let mut w = DVector::zeros(cfg.n_decision());
        for _ in 0..5 {
            w = rti_step(&model, &x0, &w, &cfg).w;
            assert!(w
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(x, (l, h))| l <= x && x <= h));
        }
    }

    #[test]
    fn integrator_failure_keeps_previous_plan() {
        struct Broken;
        impl Dynamics<AUG_DIM, INPUT_DIM> for Broken {
            fn rhs(&self, _: &AugVector, _: &SVector<f64, INPUT_DIM>) -> Result<AugVector> {
                Err(Error::Internal("broken"))
            }
            fn jacobians(
                &self,
                _: &AugVector,
                _: &SVector<f64, INPUT_DIM>,
            ) -> Result<(
                AugVector,
                SMatrix<f64, AUG_DIM, AUG_DIM>,
                SMatrix<f64, AUG_DIM, INPUT_DIM>,
            )> {
                Err(Error::Internal("broken"))
            }
        }
        impl OcpModel for Broken {
            fn output(&self, _: &AugVector) -> Vector3<f64> {
                Vector3::zeros()
            }
            fn output_jacobian(&self, _: &AugVector) -> SMatrix<f64, 3, AUG_DIM> {
                SMatrix::zeros()
            }
        }
        let cfg = OcpConfig::clover();
        let w = DVector::from_element(cfg.n_decision(), 1.0);
        let out = rti_step(&Broken, &AugVector::zeros(), &w, &cfg);
        assert_eq!(out.w, w);
        assert_eq!(out.diagnostics.fault, Some(Fault::Integrator));
    }

    #[test]
    fn virtual_plan_and_shift() {
        let cfg = OcpConfig::clover();
        let w = DVector::from_fn(40, |i, _| i as f64);
        let plan = virtual_plan(VirtualState::new(1.0, 2.0), &w, &cfg);
        assert_eq!(plan.len(), 11);
        assert_eq!(plan[1], VirtualState::new(1.0, 2.0).advance(3.0, 0.01));
        let s = shift_plan(&w);
        assert_eq!(s[0], 4.0);
        assert_eq!(s[35], 39.0);
        assert_eq!(s[39], 39.0);
    }

    #[test]
    fn aligned_shooting_shortens_only_the_first_interval() {
        let model = LinearModel::new();
        let cfg = OcpConfig::clover();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_w(&mut rng, &cfg, 0.2);
        let x0 = AugVector::from_fn(|i, _| 0.01 * i as f64);
        let full = shoot(&model, &x0, &w, &cfg).unwrap();
        let same = shoot_aligned(&model, &x0, &w, &cfg, cfg.interval_length()).unwrap();
        assert_eq!(full.nodes, same.nodes);
        assert_eq!(full.cost, same.cost);

        let first = 0.004;
        let short = shoot_aligned(&model, &x0, &w, &cfg, first).unwrap();
        let total: f64 = short.quadrature_weights.iter().sum();
        assert!((total - (cfg.horizon - cfg.interval_length() + first)).abs() < 1e-15);
        let u0 = stage_input(&w, 0);
        assert_eq!(short.nodes[1], gl2_step(&model, &x0, &u0, first).unwrap());
        let plan = virtual_plan_aligned(VirtualState::new(x0[6], x0[7]), &w, &cfg, first);
        assert!((plan[1].theta - short.nodes[1][6]).abs() < 1e-14);

        for bad in [0.0, -0.001, cfg.interval_length() * 1.01] {
            assert!(shoot_aligned(&model, &x0, &w, &cfg, bad).is_err());
        }
    }

    #[test]
    fn stop_rows_keep_the_virtual_state_in_bounds_sample_by_sample() {
        let model = LinearModel::new();
        let base = OcpConfig {
            w_e: 0.0,
            w_theta: 1e6,
            theta1: 2.0,
            r_u: 1.0,
            r_v: 1e-6,
            ..OcpConfig::hello()
        };
        let cfg = configure_mode(&base, Mode::StopAtEnd).unwrap();
        let delta = 0.001;
        let per_interval = 10;
        let mut z = VirtualState::new(0.0, 0.0);
        let mut w = DVector::zeros(cfg.n_decision());
        for k in 0..400 {
            if k > 0 && k % per_interval == 0 {
                w = shift_plan(&w);
            }
            let first = cfg.interval_length() - (k % per_interval) as f64 * delta;
            let mut x0 = AugVector::zeros();
            x0[6] = z.theta;
            x0[7] = z.theta_dot;
            let out = rti_step_aligned(&model, &x0, &w, &cfg, first);
            assert_eq!(out.diagnostics.fault, None);
            assert_eq!(out.diagnostics.relaxation, 0.0, "sample {k}");
            w = out.w;
            z = z.advance(w[3], delta);
            assert!(z.theta <= cfg.theta1 + 1e-12, "sample {k}: {z:?}");
            assert!(z.theta_dot >= -1e-12, "sample {k}: {z:?}");
        }
        assert!(cfg.theta1 - z.theta < 1e-4, "{z:?}");
    }
}
