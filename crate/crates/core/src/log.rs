//! Per-sample closed-loop records, their CSV form, and summary metrics.
//!
//! Values are rounded to nine significant digits when a row is recorded, so
//! a log written to CSV and parsed back is identical to the one in memory.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::Fault;

/// Rounds to the nine significant digits used in the CSV form.
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format_value(x).parse().unwrap_or(x)
}

fn format_value(x: f64) -> String {
    format!("{x:.8e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogRow {
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
    pub fault: u8,
    /// Wall time of the solver call in seconds; not part of the CSV unless requested.
    pub solve_time: f64,
}

impl LogRow {
    fn quantized(mut self) -> Self {
        let q3 = |a: [f64; 3]| a.map(quantize);
        self.t = quantize(self.t);
        self.q = q3(self.q);
        self.qdot = q3(self.qdot);
        self.qdot_est = q3(self.qdot_est);
        self.u = q3(self.u);
        self.theta = quantize(self.theta);
        self.theta_dot = quantize(self.theta_dot);
        self.v = quantize(self.v);
        self.e = q3(self.e);
        self.e_norm = quantize(self.e_norm);
        self.cost = quantize(self.cost);
        self.solve_time = quantize(self.solve_time);
        self
    }
}

/// Numeric code of a solver fault in the log.
pub fn fault_code(fault: Option<Fault>) -> u8 {
    match fault {
        None => 0,
        Some(Fault::Integrator) => 1,
        Some(Fault::QpIterations) => 2,
        Some(Fault::Qp) => 3,
    }
}

const COLUMNS: [&str; 25] = [
    "t",
    "q1",
    "q2",
    "q3",
    "qd1",
    "qd2",
    "qd3",
    "qd1_est",
    "qd2_est",
    "qd3_est",
    "u1",
    "u2",
    "u3",
    "theta",
    "theta_dot",
    "v",
    "e_x",
    "e_y",
    "e_z",
    "e_norm",
    "cost",
    "qp_iter",
    "fault",
    "solve_time",
    "",
];

fn header(with_timing: bool) -> Vec<&'static str> {
    let n = if with_timing { 24 } else { 23 };
    COLUMNS[..n].to_vec()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClosedLoopLog {
    rows: Vec<LogRow>,
    has_timing: bool,
}

impl ClosedLoopLog {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            has_timing: true,
        }
    }

    /// Appends a row after rounding it to CSV precision.
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        let row = row.quantized();
        if let Some(last) = self.rows.last() {
            if !(row.t > last.t) {
                return Err(Error::Internal("log times must increase"));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Whether solver wall times are known.
    pub fn has_timing(&self) -> bool {
        self.has_timing
    }

    /// Writes the CSV form. Wall times vary between runs, so they are only
    /// included on request.
    pub fn write_csv<W: Write>(&self, out: W, with_timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(header(with_timing)).map_err(to_io)?;
        for r in &self.rows {
            let mut rec: Vec<String> = Vec::with_capacity(24);
            rec.push(format_value(r.t));
            for a in [&r.q, &r.qdot, &r.qdot_est, &r.u] {
                rec.extend(a.iter().map(|x| format_value(*x)));
            }
            rec.extend([r.theta, r.theta_dot, r.v].map(format_value));
            rec.extend(r.e.iter().map(|x| format_value(*x)));
            rec.push(format_value(r.e_norm));
            rec.push(format_value(r.cost));
            rec.push(r.qp_iterations.to_string());
            rec.push(r.fault.to_string());
            if with_timing {
                rec.push(format_value(r.solve_time));
            }
            w.write_record(&rec).map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, with_timing: bool) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, with_timing)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }

    /// Parses the CSV form; `origin` names the source in error messages.
    pub fn read_csv<R: Read>(input: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let head: Vec<String> = rdr
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let has_timing = if head == header(true) {
            true
        } else if head == header(false) {
            false
        } else {
            return Err(parse_err(1, "unexpected header".into()));
        };
        let mut log = ClosedLoopLog {
            rows: Vec::new(),
            has_timing,
        };
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            let f = |j: usize| -> Result<f64> {
                rec[j]
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("column {}: {e}", head[j])))
            };
            let f3 = |j: usize| -> Result<[f64; 3]> { Ok([f(j)?, f(j + 1)?, f(j + 2)?]) };
            let int = |j: usize| -> Result<u64> {
                rec[j]
                    .parse::<u64>()
                    .map_err(|e| parse_err(line, format!("column {}: {e}", head[j])))
            };
            let row = LogRow {
                t: f(0)?,
                q: f3(1)?,
                qdot: f3(4)?,
                qdot_est: f3(7)?,
                u: f3(10)?,
                theta: f(13)?,
                theta_dot: f(14)?,
                v: f(15)?,
                e: f3(16)?,
                e_norm: f(19)?,
                cost: f(20)?,
                qp_iterations: int(21)? as u32,
                fault: int(22)? as u8,
                solve_time: if has_timing { f(23)? } else { 0.0 },
            };
            log.push(row)
                .map_err(|_| parse_err(line, "time does not increase".into()))?;
        }
        Ok(log)
    }
}

/// Limits the metrics are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub tau_bar: f64,
    pub qdot_bar: f64,
    /// Path error counted as a violation above this value (m).
    pub error_tol: f64,
    /// A velocity within this fraction of its bound counts as "at the bound".
    pub near_bound: f64,
}

impl Limits {
    pub fn new(tau_bar: f64, qdot_bar: f64) -> Self {
        Self {
            tau_bar,
            qdot_bar,
            error_tol: 1e-3,
            near_bound: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverTiming {
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub settle_time: f64,
    pub samples_after_settle: usize,
    pub max_error: f64,
    pub mean_error: f64,
    /// Samples after settling with path error above the tolerance.
    pub error_violations: usize,
    pub thetadot_mean: f64,
    pub thetadot_min: f64,
    pub thetadot_max: f64,
    /// Smallest path-parameter rate over the whole run.
    pub thetadot_min_overall: f64,
    pub theta_final: f64,
    pub theta_max: f64,
    /// Samples with some `|u_i| > tau_bar`.
    pub tau_violations: usize,
    /// Samples with some true `|qdot_i| > qdot_bar`.
    pub qdot_violations: usize,
    /// Largest `|qdot_i| / qdot_bar` over the run.
    pub qdot_peak_ratio: f64,
    /// Fraction of post-settle samples with some joint within `near_bound` of its velocity bound.
    pub qdot_near_bound_fraction: f64,
    pub faults: usize,
    pub solver_time: Option<SolverTiming>,
}

/// Aggregates the rows with `t >= settle_time` (violations over all rows).
pub fn compute_metrics(log: &ClosedLoopLog, settle_time: f64, limits: &Limits) -> Result<Summary> {
    let rows = log.rows();
    let end = rows.last().map(|r| r.t).unwrap_or(0.0);
    if rows.is_empty() || !(settle_time <= end) {
        return Err(Error::InvalidConfig(format!(
            "settle time {settle_time} s is not inside the logged run (ends at {end} s)"
        )));
    }
    let after: Vec<&LogRow> = rows.iter().filter(|r| r.t >= settle_time).collect();
    let n_after = after.len() as f64;
    let amax = |a: &[f64; 3]| a.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let max_error = after.iter().map(|r| r.e_norm).fold(0.0, f64::max);
    let mean_error = after.iter().map(|r| r.e_norm).sum::<f64>() / n_after;
    let error_violations = after.iter().filter(|r| r.e_norm > limits.error_tol).count();
    let thetadot_mean = after.iter().map(|r| r.theta_dot).sum::<f64>() / n_after;
    let thetadot_min = after.iter().map(|r| r.theta_dot).fold(f64::INFINITY, f64::min);
    let thetadot_max = after.iter().map(|r| r.theta_dot).fold(f64::NEG_INFINITY, f64::max);
    let near = after
        .iter()
        .filter(|r| amax(&r.qdot) >= (1.0 - limits.near_bound) * limits.qdot_bar)
        .count();

    let solver_time = log.has_timing().then(|| {
        let mut times: Vec<f64> = rows.iter().map(|r| r.solve_time).collect();
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let median = if n % 2 == 1 {
            times[n / 2]
        } else {
            0.5 * (times[n / 2 - 1] + times[n / 2])
        };
        SolverTiming {
            max: times[n - 1],
            mean: times.iter().sum::<f64>() / n as f64,
            median,
        }
    });

    Ok(Summary {
        samples: rows.len(),
        settle_time,
        samples_after_settle: after.len(),
        max_error,
        mean_error,
        error_violations,
        thetadot_mean,
        thetadot_min,
        thetadot_max,
        thetadot_min_overall: rows.iter().map(|r| r.theta_dot).fold(f64::INFINITY, f64::min),
        theta_final: rows[rows.len() - 1].theta,
        theta_max: rows.iter().map(|r| r.theta).fold(f64::NEG_INFINITY, f64::max),
        tau_violations: rows.iter().filter(|r| amax(&r.u) > limits.tau_bar).count(),
        qdot_violations: rows.iter().filter(|r| amax(&r.qdot) > limits.qdot_bar).count(),
        qdot_peak_ratio: rows.iter().map(|r| amax(&r.qdot)).fold(0.0, f64::max) / limits.qdot_bar,
        qdot_near_bound_fraction: near as f64 / n_after,
        faults: rows.iter().filter(|r| r.fault != 0).count(),
        solver_time,
    })
}
