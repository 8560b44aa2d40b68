//! Regenerates the shipped waypoint files `data/clover.txt` and `data/hello.txt`.
//!
//! Both curves lie in a vertical board plane in front of the robot and are
//! resampled to equal arc length, so the path parameter advances in
//! proportion to the distance drawn.
//!
//! Run with `cargo run --example gen_paths -- <output-dir>`.

use std::f64::consts::PI;
use std::path::PathBuf;

use mpfc::path::format_waypoints;
use nalgebra::{Vector2, Vector3};

/// Distance of the board from the robot base (m).
const BOARD_X: f64 = 0.35;

const CLOVER_CENTER: [f64; 2] = [0.0, 0.58];
const CLOVER_RADIUS: f64 = 0.1;
/// Times the three leaves are drawn.
const CLOVER_PASSES: usize = 6;
const CLOVER_SEGMENTS: usize = 2700;

const HELLO_ORIGIN: [f64; 2] = [-0.42, 0.38];
const HELLO_HEIGHT: f64 = 0.3;
/// Horizontal stretch of the glyphs, which keeps the turns wide.
const HELLO_WIDTH: f64 = 0.45;
const HELLO_SEGMENTS: usize = 1800;

/// Control polygon of a looped single-stroke "Hello", letter height 1.
/// The stroke is the cubic B-spline of this polygon, so every turn is rounded.
#[rustfmt::skip]
const HELLO_STROKE: [[f64; 2]; 80] = [
    // H: tall loop, hump, second tall loop
    [0.00, 0.00], [0.06, 0.30], [0.12, 0.62], [0.17, 0.85], [0.17, 0.97], [0.11, 1.02], [0.05, 0.95],
    [0.05, 0.70], [0.06, 0.35], [0.08, 0.10], [0.11, -0.02], [0.16, -0.02], [0.20, 0.08], [0.23, 0.30],
    [0.28, 0.55], [0.34, 0.72], [0.38, 0.86], [0.38, 0.97], [0.32, 1.02], [0.27, 0.95], [0.28, 0.70],
    [0.29, 0.35], [0.31, 0.10], [0.34, -0.02], [0.39, -0.01], [0.44, 0.06],
    // e
    [0.52, 0.16], [0.58, 0.27], [0.58, 0.38], [0.52, 0.44], [0.46, 0.40], [0.44, 0.28], [0.46, 0.12],
    [0.52, 0.02], [0.60, 0.00], [0.66, 0.04],
    // l
    [0.72, 0.25], [0.78, 0.55], [0.83, 0.80], [0.83, 0.96], [0.77, 1.04], [0.70, 0.97], [0.69, 0.75],
    [0.71, 0.40], [0.73, 0.10], [0.77, 0.00], [0.83, 0.01], [0.88, 0.06],
    // l
    [0.94, 0.25], [1.00, 0.55], [1.05, 0.80], [1.05, 0.96], [0.99, 1.04], [0.92, 0.97], [0.91, 0.75],
    [0.93, 0.40], [0.95, 0.10], [0.99, 0.00], [1.05, 0.01], [1.10, 0.06],
    // o and the exit stroke
    [1.14, 0.16], [1.17, 0.30], [1.22, 0.42], [1.29, 0.45], [1.35, 0.38], [1.36, 0.22], [1.32, 0.07],
    [1.25, 0.01], [1.18, 0.04], [1.15, 0.15], [1.17, 0.30], [1.24, 0.40], [1.32, 0.43], [1.40, 0.41],
    [1.48, 0.36], [1.56, 0.29], [1.64, 0.21], [1.72, 0.13], [1.80, 0.06], [1.88, 0.00],
];

/// Uniform cubic B-spline of `ctrl`, with the end points repeated so the curve starts and ends on them.
fn bspline(ctrl: &[Vector2<f64>], samples_per_span: usize) -> Vec<Vector2<f64>> {
    let mut p = vec![ctrl[0]; 2];
    p.extend_from_slice(ctrl);
    p.extend([ctrl[ctrl.len() - 1]; 2]);
    let mut out = Vec::new();
    for i in 0..p.len() - 3 {
        for j in 0..samples_per_span {
            let t = j as f64 / samples_per_span as f64;
            let (t2, t3) = (t * t, t * t * t);
            let b0 = (1.0 - t).powi(3) / 6.0;
            let b1 = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0;
            let b2 = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0;
            let b3 = t3 / 6.0;
            out.push(p[i] * b0 + p[i + 1] * b1 + p[i + 2] * b2 + p[i + 3] * b3);
        }
    }
    out.push(*ctrl.last().unwrap());
    out
}

/// Samples `n + 1` points at equal arc length along a densely sampled curve.
fn resample(dense: &[Vector2<f64>], n: usize) -> Vec<Vector2<f64>> {
    let mut cum = vec![0.0];
    for w in dense.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n + 1);
    let mut j = 0;
    for i in 0..=n {
        let s = total * i as f64 / n as f64;
        while j + 2 < cum.len() && cum[j + 1] < s {
            j += 1;
        }
        let span = cum[j + 1] - cum[j];
        let a = if span > 0.0 {
            ((s - cum[j]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(dense[j] * (1.0 - a) + dense[j + 1] * a);
    }
    out
}

fn on_board(p: &[Vector2<f64>]) -> Vec<Vector3<f64>> {
    p.iter().map(|v| Vector3::new(BOARD_X, v[0], v[1])).collect()
}

fn length(p: &[Vector3<f64>]) -> f64 {
    p.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Three-leaved rose `r = R cos 3phi`, traced `CLOVER_PASSES` times.
fn clover() -> Vec<Vector3<f64>> {
    let m = 200_000;
    let dense: Vec<_> = (0..=m)
        .map(|i| {
            let phi = PI * CLOVER_PASSES as f64 * i as f64 / m as f64;
            let r = CLOVER_RADIUS * (3.0 * phi).cos();
            Vector2::new(CLOVER_CENTER[0] + r * phi.cos(), CLOVER_CENTER[1] + r * phi.sin())
        })
        .collect();
    on_board(&resample(&dense, CLOVER_SEGMENTS))
}

fn hello() -> Vec<Vector3<f64>> {
    let ctrl: Vec<_> = HELLO_STROKE
        .iter()
        .map(|p| {
            Vector2::new(
                HELLO_ORIGIN[0] + HELLO_WIDTH * p[0],
                HELLO_ORIGIN[1] + HELLO_HEIGHT * p[1],
            )
        })
        .collect();
    on_board(&resample(&bspline(&ctrl, 4000), HELLO_SEGMENTS))
}

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;
    let c = clover();
    let h = hello();
    std::fs::write(
        dir.join("clover.txt"),
        format_waypoints(&c, "three-leaved rose, equal arc-length spacing, x y z in m"),
    )?;
    std::fs::write(
        dir.join("hello.txt"),
        format_waypoints(&h, "cursive \"Hello\", equal arc-length spacing, x y z in m"),
    )?;
    println!("clover: {} points, {:.3} m", c.len(), length(&c));
    println!("hello: {} points, {:.3} m", h.len(), length(&h));
    Ok(())
}
