//! Piecewise-polynomial parametrization of the reference path.
//!
//! The parameter interval `[theta0, theta1]` is split into `n` equal
//! segments. Segment `i` covers `[k_i, k_{i+1})` (the last one is closed) and
//! holds one polynomial per output dimension, stored in the local variable
//! `theta - k_i` so that large parameter values do not cost precision.
//! Outside the interval the path is extended by its endpoint values.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Knot continuity tolerance for values (m) and first derivatives (m per unit theta).
pub const CONTINUITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SplinePath {
    theta0: f64,
    theta1: f64,
    delta_theta: f64,
    n_segments: usize,
    order: usize,
    // segment-major, `order + 1` coefficients per segment
    coeffs: Vec<Vector3<f64>>,
}

impl SplinePath {
    /// Builds a path from per-segment coefficients in the local variable.
    ///
    /// `coeffs[i][j]` multiplies `(theta - k_i)^j`.
    pub fn new(theta0: f64, theta1: f64, coeffs: Vec<Vec<Vector3<f64>>>) -> Result<Self> {
        if !(theta0.is_finite() && theta1.is_finite() && theta0 < theta1) {
            return Err(Error::InvalidPath(format!(
                "need finite theta0 < theta1, got [{theta0}, {theta1}]"
            )));
        }
        let n_segments = coeffs.len();
        if n_segments == 0 {
            return Err(Error::InvalidPath("at least one segment is required".into()));
        }
        let order = coeffs[0].len().saturating_sub(1);
        if order == 0 || coeffs.iter().any(|c| c.len() != order + 1) {
            return Err(Error::InvalidPath(
                "every segment needs the same polynomial order >= 1".into(),
            ));
        }
        let path = Self {
            theta0,
            theta1,
            delta_theta: (theta1 - theta0) / n_segments as f64,
            n_segments,
            order,
            coeffs: coeffs.into_iter().flatten().collect(),
        };
        path.check_continuity()?;
        Ok(path)
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn theta1(&self) -> f64 {
        self.theta1
    }

    pub fn delta_theta(&self) -> f64 {
        self.delta_theta
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Coefficients of segment `i`, lowest power first.
    pub fn segment_coeffs(&self, i: usize) -> &[Vector3<f64>] {
        let stride = self.order + 1;
        &self.coeffs[i * stride..(i + 1) * stride]
    }

    /// Parameter value of knot `i` (`0..=n_segments`).
    pub fn knot(&self, i: usize) -> f64 {
        if i == self.n_segments {
            self.theta1
        } else {
            self.theta0 + i as f64 * self.delta_theta
        }
    }

    /// Index of the segment owning `theta`, for `theta` inside the interval.
    pub fn segment_index(&self, theta: f64) -> usize {
        let last = self.n_segments - 1;
        let guess = ((theta - self.theta0) / self.delta_theta).floor();
        let mut i = if guess < 0.0 { 0 } else { (guess as usize).min(last) };
        // The floor can be off by one next to a knot; settle it against the knot values.
        while i > 0 && theta < self.knot(i) {
            i -= 1;
        }
        while i < last && theta >= self.knot(i + 1) {
            i += 1;
        }
        i
    }

    fn segment_poly(&self, i: usize, local: f64, deriv: usize) -> Vector3<f64> {
        let c = self.segment_coeffs(i);
        if deriv > self.order {
            return Vector3::zeros();
        }
        // Horner on the differentiated polynomial.
        let mut acc = Vector3::zeros();
        for j in (deriv..=self.order).rev() {
            let falling: f64 = ((j - deriv + 1)..=j).map(|k| k as f64).product();
            acc = acc * local + c[j] * falling;
        }
        acc
    }

    /// Position on the path; constant extension outside `[theta0, theta1]`.
    pub fn eval(&self, theta: f64) -> Vector3<f64> {
        self.derivative(theta, 0)
    }

    /// `order`-th derivative with respect to theta (0 gives the position).
    ///
    /// Derivatives vanish outside `[theta0, theta1]`.
    pub fn derivative(&self, theta: f64, order: usize) -> Vector3<f64> {
        let theta = if theta < self.theta0 {
            if order > 0 {
                return Vector3::zeros();
            }
            self.theta0
        } else if theta > self.theta1 {
            if order > 0 {
                return Vector3::zeros();
            }
            self.theta1
        } else {
            theta
        };
        let i = self.segment_index(theta);
        self.segment_poly(i, theta - self.knot(i), order)
    }

    fn check_continuity(&self) -> Result<()> {
        for i in 1..self.n_segments {
            let local = self.knot(i) - self.knot(i - 1);
            for d in 0..=1.min(self.order) {
                let left = self.segment_poly(i - 1, local, d);
                let right = self.segment_poly(i, 0.0, d);
                if (left - right).amax() > CONTINUITY_TOL {
                    return Err(Error::InvalidPath(format!(
                        "derivative {d} jumps by {:e} at knot {i}",
                        (left - right).amax()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Natural cubic spline through `points` on an equidistant partition.
    ///
    /// Knot `k` sits at `theta0 + k * (theta1 - theta0) / (points.len() - 1)`
    /// and evaluates to `points[k]`.
    pub fn fit_waypoints(points: &[Vector3<f64>], theta0: f64, theta1: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidPath("at least two waypoints are required".into()));
        }
        if let Some(k) = points.windows(2).position(|w| (w[1] - w[0]).norm() < 1e-9) {
            return Err(Error::InvalidPath(format!("waypoints {k} and {} coincide", k + 1)));
        }
        if !(theta0.is_finite() && theta1.is_finite() && theta0 < theta1) {
            return Err(Error::InvalidPath(format!(
                "need finite theta0 < theta1, got [{theta0}, {theta1}]"
            )));
        }
        let n = points.len() - 1;
        let h = (theta1 - theta0) / n as f64;
        let m = natural_second_derivatives(points, h);
        let coeffs = (0..n)
            .map(|i| {
                let (y0, y1) = (points[i], points[i + 1]);
                let (m0, m1) = (m[i], m[i + 1]);
                vec![
                    y0,
                    (y1 - y0) / h - (2.0 * m0 + m1) * (h / 6.0),
                    m0 * 0.5,
                    (m1 - m0) / (6.0 * h),
                ]
            })
            .collect();
        Self::new(theta0, theta1, coeffs)
    }

    /// Local minimizer of the distance between `point` and the path.
    ///
    /// A coarse scan locates the closest sample (ties within 1 nm go to the
    /// sample nearest `theta_hint`), then golden-section search refines it
    /// inside the neighbouring sample cells. The result lies in `[theta0, theta1]`.
    pub fn project(&self, point: &Vector3<f64>, theta_hint: f64) -> f64 {
        const SAMPLES_PER_SEGMENT: usize = 4;
        let n_samples = self.n_segments * SAMPLES_PER_SEGMENT;
        let step = (self.theta1 - self.theta0) / n_samples as f64;
        let sample = |k: usize| {
            if k == n_samples {
                self.theta1
            } else {
                self.theta0 + k as f64 * step
            }
        };
        let dist = |theta: f64| (self.eval(theta) - point).norm();

        let dists: Vec<f64> = (0..=n_samples).map(|k| dist(sample(k))).collect();
        let d_min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let best = (0..=n_samples)
            .filter(|&k| dists[k] <= d_min + 1e-9)
            .min_by(|&a, &b| {
                let da = (sample(a) - theta_hint).abs();
                let db = (sample(b) - theta_hint).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0);

        let lo = sample(best.saturating_sub(1));
        let hi = sample((best + 1).min(n_samples));
        let tol = 1e-9 * (self.theta1 - self.theta0);
        golden_section(dist, lo, hi, tol)
    }
}

/// Second derivatives of the natural cubic spline (Thomas algorithm).
fn natural_second_derivatives(y: &[Vector3<f64>], h: f64) -> Vec<Vector3<f64>> {
    let n = y.len() - 1;
    let mut m = vec![Vector3::zeros(); n + 1];
    if n < 2 {
        return m;
    }
    // Interior rows: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1]) / h^2
    let interior = n - 1;
    let mut c_prime = vec![0.0; interior];
    let mut d_prime = vec![Vector3::zeros(); interior];
    for r in 0..interior {
        let i = r + 1;
        let rhs = (y[i + 1] - 2.0 * y[i] + y[i - 1]) * (6.0 / (h * h));
        if r == 0 {
            c_prime[r] = 1.0 / 4.0;
            d_prime[r] = rhs / 4.0;
        } else {
            let denom = 4.0 - c_prime[r - 1];
            c_prime[r] = 1.0 / denom;
            d_prime[r] = (rhs - d_prime[r - 1]) / denom;
        }
    }
    for r in (0..interior).rev() {
        let next = if r + 1 < interior { m[r + 2] } else { Vector3::zeros() };
        m[r + 1] = d_prime[r] - next * c_prime[r];
    }
    m
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // Endpoints may beat the interior when the minimum sits on the boundary.
    let mid = 0.5 * (a + b);
    [a, mid, b]
        .into_iter()
        .map(|t| (t, f(t)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(t, _)| t)
        .unwrap_or(mid)
}

/// Reads a waypoint file: one point per line, three numbers separated by
/// whitespace or commas, `#` starts a comment.
pub fn load_waypoints(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = fs::read_to_string(path)?;
    parse_waypoints(&text, &path.display().to_string())
}

pub fn parse_waypoints(text: &str, origin: &str) -> Result<Vec<Vector3<f64>>> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if fields.len() != 3 || fields.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(format!("expected three finite numbers, got {line:?}")));
        }
        points.push(Vector3::new(fields[0], fields[1], fields[2]));
    }
    Ok(points)
}

pub fn format_waypoints(points: &[Vector3<f64>], header: &str) -> String {
    let mut out = String::new();
    for line in header.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    for p in points {
        out.push_str(&format!("{:.9} {:.9} {:.9}\n", p[0], p[1], p[2]));
    }
    out
}
