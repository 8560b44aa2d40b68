//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;

use mpfc::acceptance::{self as acc, run_all};

/// The thresholds the suite is judged by; a change here must be deliberate.
fn tolerances_are_pinned() -> Vec<String> {
    let pinned: [(&str, f64, f64); 32] = [
        ("max tracking error (m)", acc::MAX_TRACKING_ERROR, 1e-3),
        ("run wall time (s)", acc::MAX_RUN_WALL_TIME, 60.0),
        ("settle time (s)", acc::SETTLE_TIME, 2.5),
        ("clover duration (s)", acc::CLOVER_DURATION, 10.0),
        ("min theta_dot", acc::MIN_THETA_DOT, -1e-9),
        ("torque bound", acc::TAU_BAR, 60.0),
        ("clover speed bound", acc::CLOVER_QDOT_BAR, 0.6),
        ("hello speed bound", acc::HELLO_QDOT_BAR, 0.5),
        ("speed violation share", acc::MAX_QDOT_VIOLATION_SHARE, 0.01),
        ("speed overshoot", acc::MAX_QDOT_OVERSHOOT, 0.05),
        ("theta_dot reference", acc::THETADOT_REF, 250.0),
        ("near-bound margin", acc::NEAR_BOUND_MARGIN, 0.02),
        ("near-bound share", acc::MIN_NEAR_BOUND_SHARE, 0.05),
        ("theta end", acc::THETA_END, 1750.0),
        ("theta end tolerance", acc::THETA_END_TOL, 1.0),
        ("theta overshoot", acc::THETA_OVERSHOOT_TOL, 1e-6),
        ("disturbance windows", acc::DISTURBANCE_WINDOWS as f64, 5.0),
        ("window speed ratio", acc::WINDOW_SPEED_RATIO, 0.2),
        ("pre-window period (s)", acc::PRE_WINDOW, 0.5),
        ("recovery error (m)", acc::RECOVERY_ERROR, 1e-3),
        ("recovery time (s)", acc::RECOVERY_TIME, 2.0),
        ("order ratio low", acc::RICHARDSON_LO, 3.5),
        ("order ratio high", acc::RICHARDSON_HI, 4.5),
        ("sensitivity instances", acc::SENSITIVITY_INSTANCES as f64, 50.0),
        ("sensitivity tolerance", acc::SENSITIVITY_REL_TOL, 1e-5),
        ("QP instances", acc::QP_INSTANCES as f64, 200.0),
        ("QP objective tolerance", acc::QP_OBJECTIVE_TOL, 1e-6),
        ("LQ second step", acc::LQ_SECOND_STEP_TOL, 1e-8),
        ("skew tolerance", acc::SKEW_TOL, 1e-6),
        ("gravity tolerance", acc::GRAVITY_REL_TOL, 1e-6),
        ("dynamics residual", acc::DYNAMICS_RESIDUAL_TOL, 1e-10),
        ("mean solve time (s)", acc::MEAN_SOLVE_TIME, 2e-3),
    ];
    let mut wrong: Vec<String> = pinned
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(name, got, want)| format!("{name} is {got}, expected {want}"))
        .collect();
    for (name, got, want) in [
        ("max solve time (s)", acc::MAX_SOLVE_TIME, 5e-3),
        ("real-time budget (s)", acc::REAL_TIME_BUDGET, 1e-3),
    ] {
        if got != want {
            wrong.push(format!("{name} is {got}, expected {want}"));
        }
    }
    if acc::DYNAMICS_GRID.pow(3) < 1000 {
        wrong.push(format!("dynamics grid has only {} points", acc::DYNAMICS_GRID.pow(3)));
    }
    wrong
}

fn main() -> ExitCode {
    let wrong = tolerances_are_pinned();
    for w in &wrong {
        println!("[FAIL] tolerance {w}");
    }
    let report = match run_all() {
        Ok(r) => r,
        Err(e) => {
            println!("[FAIL] acceptance suite could not run: {e}");
            return ExitCode::FAILURE;
        }
    };
    for line in report.lines() {
        println!("{line}");
    }
    let failed = report.outcomes.iter().filter(|o| !o.passed).count();
    println!(
        "acceptance: {} of {} criteria passed",
        report.outcomes.len() - failed,
        report.outcomes.len()
    );
    if wrong.is_empty() && report.all_passed() && report.outcomes.len() == 10 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
