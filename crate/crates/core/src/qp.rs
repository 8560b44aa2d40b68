//! Dense primal active-set solver for strictly convex QPs
//!
//! ```text
//! minimize    1/2 x' H x + g' x
//! subject to  A x <= b,   lb <= x <= ub
//! ```
//!
//! The problem is Jacobi-scaled and the general rows are normalized before
//! solving. Each iteration solves the equality-constrained subproblem on the
//! working set through the Schur complement of a Cholesky factor of `H`.
//! Ties among blocking constraints and among negative multipliers go to the
//! lowest constraint index (bounds first, upper before lower, then rows).
//!
//! A feasible start is always available for the bounds. General rows that
//! are violated there are handled by an elastic phase that minimizes their
//! total violation first.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Feasibility tolerance on normalized rows in the scaled space.
const FEAS_TOL: f64 = 1e-11;
/// Curvature of the elastic phase; small enough that the violation term dominates.
const ELASTIC_CURVATURE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    /// General inequality rows `A x <= b` (may have zero rows).
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda_rows: DVector<f64>,
    pub lambda_lower: DVector<f64>,
    pub lambda_upper: DVector<f64>,
    pub iterations: usize,
    /// Largest amount by which a general row had to be relaxed (0 if feasible).
    pub relaxation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual: f64,
}

impl QpProblem {
    /// Box-constrained problem without general rows.
    pub fn with_bounds(h: DMatrix<f64>, g: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            lb,
            ub,
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.dim();
        let ok = self.h.shape() == (n, n)
            && self.a.ncols() == n
            && self.a.nrows() == self.b.len()
            && self.lb.len() == n
            && self.ub.len() == n;
        if !ok {
            return Err(Error::Internal("QP data has inconsistent dimensions"));
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| l > u) {
            return Err(Error::Infeasible {
                violation: f64::INFINITY,
            });
        }
        Ok(())
    }

    /// Solves the QP; fails with [`Error::Infeasible`] if the rows cannot be met.
    pub fn solve(&self) -> Result<QpSolution> {
        self.solve_impl(false)
    }

    /// Like [`solve`](Self::solve), but rows that cannot be satisfied are
    /// relaxed by the least total amount and the remaining problem is solved.
    pub fn solve_elastic(&self) -> Result<QpSolution> {
        self.solve_impl(true)
    }

    fn solve_impl(&self, elastic: bool) -> Result<QpSolution> {
        self.check_shapes()?;
        let scaled = Scaled::new(self);
        let n = self.dim();

        // Start at the origin projected onto the box.
        let y0 = DVector::from_fn(n, |j, _| 0.0f64.clamp(scaled.lb[j], scaled.ub[j]));
        let mut b = scaled.b.clone();
        let violated: Vec<usize> = (0..b.len())
            .filter(|&r| scaled.a.row(r).dot(&y0.transpose()) - b[r] > FEAS_TOL * (1.0 + b[r].abs()))
            .collect();

        let mut iterations = 0;
        let mut relaxation = 0.0f64;
        let start = if violated.is_empty() {
            y0
        } else {
            let (y, slack, it) = elastic_phase(&scaled, &y0, &violated)?;
            iterations += it;
            let worst = slack.iter().cloned().fold(0.0, f64::max);
            if worst > FEAS_TOL {
                if !elastic {
                    return Err(Error::Infeasible { violation: worst });
                }
                for (k, &r) in violated.iter().enumerate() {
                    if slack[k] > 0.0 {
                        b[r] += slack[k];
                        relaxation = relaxation.max(slack[k] * scaled.row_scale[r]);
                    }
                }
            }
            y
        };

        let core = Core {
            h: &scaled.h,
            c: &scaled.g,
            a: &scaled.a,
            b: &b,
            lb: &scaled.lb,
            ub: &scaled.ub,
        };
        let out = core.run(start, max_iterations(n, b.len()))?;
        iterations += out.iterations;
        Ok(scaled.unscale(out, iterations, relaxation))
    }

    /// KKT residuals of a candidate solution with its multipliers.
    pub fn kkt_residuals(&self, sol: &QpSolution) -> KktResiduals {
        let x = &sol.x;
        let grad = &self.h * x + &self.g;
        let stat = &grad + self.a.transpose() * &sol.lambda_rows + &sol.lambda_upper - &sol.lambda_lower;
        let row_slack = &self.b - &self.a * x;
        let mut primal = 0.0f64;
        let mut comp = 0.0f64;
        let mut dual = 0.0f64;
        for r in 0..self.b.len() {
            primal = primal.max(-row_slack[r]);
            comp = comp.max((sol.lambda_rows[r] * row_slack[r]).abs());
            dual = dual.max(-sol.lambda_rows[r]);
        }
        for j in 0..self.dim() {
            primal = primal.max(self.lb[j] - x[j]).max(x[j] - self.ub[j]);
            if sol.lambda_lower[j] != 0.0 {
                comp = comp.max((sol.lambda_lower[j] * (x[j] - self.lb[j])).abs());
            }
            if sol.lambda_upper[j] != 0.0 {
                comp = comp.max((sol.lambda_upper[j] * (self.ub[j] - x[j])).abs());
            }
            dual = dual.max(-sol.lambda_lower[j]).max(-sol.lambda_upper[j]);
        }
        KktResiduals {
            stationarity: stat.amax(),
            primal,
            complementarity: comp,
            dual,
        }
    }
}

fn max_iterations(n: usize, m: usize) -> usize {
    20 * (n + m) + 100
}

/// Jacobi-scaled copy of the problem: `x = D y`, rows normalized to unit max-norm.
struct Scaled {
    d: DVector<f64>,
    row_scale: DVector<f64>,
    h: DMatrix<f64>,
    g: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
}

impl Scaled {
    fn new(p: &QpProblem) -> Self {
        let n = p.dim();
        let d = DVector::from_fn(n, |j, _| {
            let hjj = p.h[(j, j)];
            if hjj > 0.0 {
                1.0 / hjj.sqrt()
            } else {
                1.0
            }
        });
        let h = DMatrix::from_fn(n, n, |i, j| p.h[(i, j)] * d[i] * d[j]);
        let g = p.g.component_mul(&d);
        let mut a = p.a.clone();
        for j in 0..n {
            a.column_mut(j).scale_mut(d[j]);
        }
        let m = p.b.len();
        let mut row_scale = DVector::from_element(m, 1.0);
        let mut b = p.b.clone();
        for r in 0..m {
            let norm = a.row(r).amax();
            if norm > 0.0 {
                row_scale[r] = norm;
                a.row_mut(r).scale_mut(1.0 / norm);
                b[r] /= norm;
            }
        }
        let lb = p.lb.component_div(&d);
        let ub = p.ub.component_div(&d);
        Self {
            d,
            row_scale,
            h,
            g,
            a,
            b,
            lb,
            ub,
        }
    }

    fn unscale(&self, out: CoreOutput, iterations: usize, relaxation: f64) -> QpSolution {
        QpSolution {
            x: out.y.component_mul(&self.d),
            lambda_rows: out.lambda_rows.component_div(&self.row_scale),
            lambda_lower: out.lambda_lower.component_div(&self.d),
            lambda_upper: out.lambda_upper.component_div(&self.d),
            iterations,
            relaxation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Con {
    Upper(usize),
    Lower(usize),
    Row(usize),
}

impl Con {
    fn index(self) -> usize {
        match self {
            Con::Upper(j) => 2 * j,
            Con::Lower(j) => 2 * j + 1,
            Con::Row(r) => usize::MAX / 2 + r,
        }
    }
}

struct CoreOutput {
    y: DVector<f64>,
    lambda_rows: DVector<f64>,
    lambda_lower: DVector<f64>,
    lambda_upper: DVector<f64>,
    iterations: usize,
}

struct SubspaceStep {
    p: DVector<f64>,
    lambda: DVector<f64>,
    /// The reduced gradient is below tolerance; `p` is rounding noise.
    stationary: bool,
}

/// Active-set iteration on already scaled data.
struct Core<'a> {
    h: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    lb: &'a DVector<f64>,
    ub: &'a DVector<f64>,
}

impl Core<'_> {
    fn n(&self) -> usize {
        self.c.len()
    }

    fn normal_dot(&self, con: Con, p: &DVector<f64>) -> f64 {
        match con {
            Con::Upper(j) => p[j],
            Con::Lower(j) => -p[j],
            Con::Row(r) => self.a.row(r).transpose().dot(p),
        }
    }

    fn rhs(&self, con: Con) -> f64 {
        match con {
            Con::Upper(j) => self.ub[j],
            Con::Lower(j) => -self.lb[j],
            Con::Row(r) => self.b[r],
        }
    }

    fn candidates(&self) -> impl Iterator<Item = Con> + '_ {
        let bounds = (0..self.n()).flat_map(move |j| {
            let up = self.ub[j].is_finite().then_some(Con::Upper(j));
            let lo = self.lb[j].is_finite().then_some(Con::Lower(j));
            up.into_iter().chain(lo)
        });
        bounds.chain((0..self.b.len()).map(Con::Row))
    }

    fn working_matrix(&self, working: &[Con]) -> DMatrix<f64> {
        let n = self.n();
        let mut aw = DMatrix::zeros(working.len(), n);
        for (k, &con) in working.iter().enumerate() {
            match con {
                Con::Upper(j) => aw[(k, j)] = 1.0,
                Con::Lower(j) => aw[(k, j)] = -1.0,
                Con::Row(r) => aw.row_mut(k).copy_from(&self.a.row(r)),
            }
        }
        aw
    }

    /// Removes roundoff drift off the working set by a minimum-norm
    /// correction, then places bound constraints exactly.
    fn restore(&self, working: &[Con], y: &mut DVector<f64>) {
        if working.is_empty() {
            return;
        }
        let aw = self.working_matrix(working);
        let target = DVector::from_iterator(working.len(), working.iter().map(|&c| self.rhs(c)));
        let resid = &aw * &*y - target;
        if resid.amax() > 0.0 {
            let gram = &aw * aw.transpose();
            if let Some(z) = gram.lu().solve(&resid) {
                *y -= aw.transpose() * z;
            }
        }
        for &con in working {
            match con {
                Con::Upper(j) => y[j] = self.ub[j],
                Con::Lower(j) => y[j] = self.lb[j],
                Con::Row(_) => {}
            }
        }
    }

    /// Range-space step on the working set: `p` minimizes the model within
    /// the working set and `lambda` are its multipliers. With `H = L L^T` and `V = L^-1 A_W^T`, the multipliers
    /// solve the Schur complement system `V^T V lambda = -V^T L^-1 grad`.
    fn subspace_step(
        &self,
        l: &DMatrix<f64>,
        working: &[Con],
        grad: &DVector<f64>,
        stationary_tol: f64,
    ) -> Result<SubspaceStep> {
        const SINGULAR: Error = Error::Internal("singular QP Hessian factor");
        let u = l.solve_lower_triangular(grad).ok_or(SINGULAR)?;
        let (lambda, reduced) = if working.is_empty() {
            (DVector::zeros(0), grad.clone())
        } else {
            let awt = self.working_matrix(working).transpose();
            let v = l.solve_lower_triangular(&awt).ok_or(SINGULAR)?;
            let lambda = (v.transpose() * &v)
                .cholesky()
                .ok_or(Error::Internal("dependent constraints in QP working set"))?
                .solve(&-(v.transpose() * &u));
            let reduced = grad + &awt * &lambda;
            (lambda, reduced)
        };
        let w = l.solve_lower_triangular(&reduced).ok_or(SINGULAR)?;
        let p = -l.tr_solve_lower_triangular(&w).ok_or(SINGULAR)?;
        Ok(SubspaceStep {
            stationary: reduced.amax() <= stationary_tol,
            p,
            lambda,
        })
    }

    fn run(&self, mut y: DVector<f64>, max_iter: usize) -> Result<CoreOutput> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Internal("empty QP"));
        }
        let l = self
            .h
            .clone()
            .cholesky()
            .ok_or(Error::Internal("QP Hessian is not positive definite"))?
            .l();
        let mut working: Vec<Con> = Vec::new();
        let g_scale = 1.0 + self.c.amax();

        for iter in 0..max_iter {
            let hy = self.h * &y;
            let grad = &hy + self.c;
            let stationary_tol = 1e-11 * (g_scale + hy.amax());
            let step = self.subspace_step(&l, &working, &grad, stationary_tol)?;
            let lambda = step.lambda;
            let p = if step.stationary { DVector::zeros(n) } else { step.p };

            if p.amax() <= 1e-13 * (1.0 + y.amax()) {
                // Subspace minimizer: check multiplier signs.
                let lam_tol = 1e-10 * (g_scale + grad.amax());
                let mut drop: Option<(usize, f64)> = None;
                for (k, &l) in lambda.iter().enumerate() {
                    if l < -lam_tol {
                        let better = match drop {
                            None => true,
                            Some((kb, lb)) => {
                                l < lb - 1e-14 * lb.abs()
                                    || (l <= lb + 1e-14 * lb.abs() && working[k].index() < working[kb].index())
                            }
                        };
                        if better {
                            drop = Some((k, l));
                        }
                    }
                }
                match drop {
                    Some((k, _)) => {
                        working.remove(k);
                        continue;
                    }
                    None => {
                        let mut out = CoreOutput {
                            y,
                            lambda_rows: DVector::zeros(self.b.len()),
                            lambda_lower: DVector::zeros(n),
                            lambda_upper: DVector::zeros(n),
                            iterations: iter + 1,
                        };
                        for (k, &con) in working.iter().enumerate() {
                            let l = lambda[k].max(0.0);
                            match con {
                                Con::Upper(j) => out.lambda_upper[j] = l,
                                Con::Lower(j) => out.lambda_lower[j] = l,
                                Con::Row(r) => out.lambda_rows[r] = l,
                            }
                        }
                        return Ok(out);
                    }
                }
            }

            // Ratio test over constraints outside the working set.
            let p_scale = p.amax();
            let mut alpha = 1.0;
            let mut blocking: Option<Con> = None;
            for con in self.candidates() {
                if working.contains(&con) {
                    continue;
                }
                let ap = self.normal_dot(con, &p);
                if ap <= 1e-14 * p_scale {
                    continue;
                }
                let slack = (self.rhs(con) - self.normal_dot(con, &y)).max(0.0);
                let step = slack / ap;
                let take = match blocking {
                    None => step < alpha,
                    Some(b) => step < alpha || (step == alpha && con.index() < b.index()),
                };
                if take {
                    alpha = step;
                    blocking = Some(con);
                }
            }
            y += &p * alpha;
            if let Some(con) = blocking {
                working.push(con);
            }
            self.restore(&working, &mut y);
        }
        Err(Error::MaxIterations(max_iter))
    }
}

/// Minimizes the total violation of `violated` rows (plus a tiny proximal
/// term) from the bound-feasible start `y0`. Returns the point and slacks.
fn elastic_phase(s: &Scaled, y0: &DVector<f64>, violated: &[usize]) -> Result<(DVector<f64>, Vec<f64>, usize)> {
    let n = y0.len();
    let nv = violated.len();
    let m = s.b.len();
    let dim = n + nv;

    let mut h = DMatrix::zeros(dim, dim);
    let mut c = DVector::zeros(dim);
    for j in 0..n {
        let width = s.ub[j] - s.lb[j];
        let w = if width.is_finite() && width > 0.0 {
            1.0 / (width * width)
        } else {
            1.0
        };
        h[(j, j)] = ELASTIC_CURVATURE * w;
        c[j] = -ELASTIC_CURVATURE * w * y0[j];
    }
    for k in 0..nv {
        h[(n + k, n + k)] = ELASTIC_CURVATURE;
        c[n + k] = 1.0;
    }
    let mut a = DMatrix::zeros(m, dim);
    a.view_mut((0, 0), (m, n)).copy_from(&s.a);
    for (k, &r) in violated.iter().enumerate() {
        a[(r, n + k)] = -1.0;
    }
    let mut lb = DVector::from_element(dim, 0.0);
    let mut ub = DVector::from_element(dim, f64::INFINITY);
    lb.rows_mut(0, n).copy_from(&s.lb);
    ub.rows_mut(0, n).copy_from(&s.ub);

    let mut start = DVector::zeros(dim);
    start.rows_mut(0, n).copy_from(y0);
    for (k, &r) in violated.iter().enumerate() {
        start[n + k] = (s.a.row(r).transpose().dot(y0) - s.b[r]).max(0.0);
    }

    let core = Core {
        h: &h,
        c: &c,
        a: &a,
        b: &s.b,
        lb: &lb,
        ub: &ub,
    };
    let out = core.run(start, max_iterations(dim, m))?;
    let y = out.y.rows(0, n).into_owned();
    // Recompute slacks from the point to stay consistent with the rows.
    let slack = violated
        .iter()
        .map(|&r| (s.a.row(r).transpose().dot(&y) - s.b[r]).max(0.0))
        .collect();
    Ok((y, slack, out.iterations))
}
