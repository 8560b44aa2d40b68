//! One-stage Gauss-Legendre (implicit midpoint) integration with forward
//! sensitivity propagation.
//!
//! A step solves the stage equation `K = f(x + h/2 K, u)` by Newton's method
//! and returns `x + h K`. Sensitivities are obtained by differentiating the
//! converged stage equation, so they are exact derivatives of the discrete map.

use nalgebra::{Const, DMatrix, Dyn, OMatrix, SMatrix, SVector, LU};

use crate::error::{Error, Result};

/// Newton iteration cap for the stage equation.
pub const MAX_NEWTON_ITERATIONS: usize = 20;
/// Stage residual tolerance, relative to `1 + |K|`.
pub const NEWTON_TOL: f64 = 1e-12;

/// Sensitivity of an `N`-vector with respect to a dynamic number of parameters.
pub type Sensitivity<const N: usize> = OMatrix<f64, Const<N>, Dyn>;

/// Right-hand side `x' = f(x, u)` together with its Jacobians.
pub trait Dynamics<const N: usize, const M: usize> {
    fn rhs(&self, x: &SVector<f64, N>, u: &SVector<f64, M>) -> Result<SVector<f64, N>>;

    /// `(f, df/dx, df/du)` at `(x, u)`.
    fn jacobians(
        &self,
        x: &SVector<f64, N>,
        u: &SVector<f64, M>,
    ) -> Result<(SVector<f64, N>, SMatrix<f64, N, N>, SMatrix<f64, N, M>)>;
}

/// LU factors of the stage matrix `I - h/2 A`.
fn stage_lu<const N: usize>(a: &SMatrix<f64, N, N>, h: f64) -> LU<f64, Dyn, Dyn> {
    let a = DMatrix::from_column_slice(N, N, a.as_slice());
    (DMatrix::identity(N, N) - a * (0.5 * h)).lu()
}

struct Stage<const N: usize, const M: usize> {
    k: SVector<f64, N>,
    a: SMatrix<f64, N, N>,
    b: SMatrix<f64, N, M>,
}

fn solve_stage<D, const N: usize, const M: usize>(
    dynamics: &D,
    x: &SVector<f64, N>,
    u: &SVector<f64, M>,
    h: f64,
) -> Result<Stage<N, M>>
where
    D: Dynamics<N, M> + ?Sized,
{
    let mut k = dynamics.rhs(x, u)?;
    let mut residual = f64::INFINITY;
    for _ in 0..=MAX_NEWTON_ITERATIONS {
        let mid = x + k * (0.5 * h);
        let (f, a, b) = dynamics.jacobians(&mid, u)?;
        let g = k - f;
        residual = g.amax();
        if residual <= NEWTON_TOL * (1.0 + k.amax()) {
            return Ok(Stage { k, a, b });
        }
        let rhs = DMatrix::from_column_slice(N, 1, g.as_slice());
        let dk = stage_lu(&a, h).solve(&rhs).ok_or(Error::NonConvergence {
            residual,
            iterations: 0,
        })?;
        k -= SVector::<f64, N>::from_column_slice(dk.as_slice());
        if !k.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    Err(Error::NonConvergence {
        residual,
        iterations: MAX_NEWTON_ITERATIONS,
    })
}

/// One implicit midpoint step of length `h` with the input held constant.
pub fn gl2_step<D, const N: usize, const M: usize>(
    dynamics: &D,
    x: &SVector<f64, N>,
    u: &SVector<f64, M>,
    h: f64,
) -> Result<SVector<f64, N>>
where
    D: Dynamics<N, M> + ?Sized,
{
    let stage = solve_stage(dynamics, x, u, h)?;
    Ok(x + stage.k * h)
}

/// One implicit midpoint step that also maps `dx/dw` and `du/dw` to `dx+/dw`.
pub fn gl2_step_with_sensitivity<D, const N: usize, const M: usize>(
    dynamics: &D,
    x: &SVector<f64, N>,
    x_sens: &Sensitivity<N>,
    u: &SVector<f64, M>,
    u_sens: &Sensitivity<M>,
    h: f64,
) -> Result<(SVector<f64, N>, Sensitivity<N>)>
where
    D: Dynamics<N, M> + ?Sized,
{
    let stage = solve_stage(dynamics, x, u, h)?;
    // (I - h/2 A) dK = A dx + B du
    let forcing = stage.a * x_sens + stage.b * u_sens;
    let forcing = DMatrix::from_column_slice(N, forcing.ncols(), forcing.as_slice());
    let dk = stage_lu(&stage.a, h)
        .solve(&forcing)
        .ok_or(Error::Internal("singular stage matrix in sensitivity propagation"))?;
    let dk = Sensitivity::<N>::from_column_slice(dk.as_slice());
    Ok((x + stage.k * h, x_sens + dk * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SMatrix, SVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Zero;
    impl Dynamics<2, 1> for Zero {
        fn rhs(&self, _: &SVector<f64, 2>, _: &SVector<f64, 1>) -> Result<SVector<f64, 2>> {
            Ok(SVector::zeros())
        }
        fn jacobians(
            &self,
            _: &SVector<f64, 2>,
            _: &SVector<f64, 1>,
        ) -> Result<(SVector<f64, 2>, SMatrix<f64, 2, 2>, SMatrix<f64, 2, 1>)> {
            Ok((SVector::zeros(), SMatrix::zeros(), SMatrix::zeros()))
        }
    }

    struct Linear<const N: usize, const M: usize> {
        a: SMatrix<f64, N, N>,
        b: SMatrix<f64, N, M>,
    }
    impl<const N: usize, const M: usize> Dynamics<N, M> for Linear<N, M> {
        fn rhs(&self, x: &SVector<f64, N>, u: &SVector<f64, M>) -> Result<SVector<f64, N>> {
            Ok(self.a * x + self.b * u)
        }
        fn jacobians(
            &self,
            x: &SVector<f64, N>,
            u: &SVector<f64, M>,
        ) -> Result<(SVector<f64, N>, SMatrix<f64, N, N>, SMatrix<f64, N, M>)> {
            Ok((self.a * x + self.b * u, self.a, self.b))
        }
    }

    struct Cubic;
    impl Dynamics<1, 1> for Cubic {
        fn rhs(&self, x: &SVector<f64, 1>, _: &SVector<f64, 1>) -> Result<SVector<f64, 1>> {
            Ok(SVector::from([-x[0].powi(3)]))
        }
        fn jacobians(
            &self,
            x: &SVector<f64, 1>,
            u: &SVector<f64, 1>,
        ) -> Result<(SVector<f64, 1>, SMatrix<f64, 1, 1>, SMatrix<f64, 1, 1>)> {
            Ok((self.rhs(x, u)?, SMatrix::from([[-3.0 * x[0] * x[0]]]), SMatrix::zeros()))
        }
    }

    /// Damped pendulum with input torque and a quadratic drag term.
    struct Pendulum;
    impl Dynamics<2, 1> for Pendulum {
        fn rhs(&self, x: &SVector<f64, 2>, u: &SVector<f64, 1>) -> Result<SVector<f64, 2>> {
            Ok(SVector::from([
                x[1],
                -9.0 * x[0].sin() - 0.3 * x[1] * x[1].abs() + 2.0 * u[0],
            ]))
        }
        fn jacobians(
            &self,
            x: &SVector<f64, 2>,
            u: &SVector<f64, 1>,
        ) -> Result<(SVector<f64, 2>, SMatrix<f64, 2, 2>, SMatrix<f64, 2, 1>)> {
            let a = SMatrix::<f64, 2, 2>::new(0.0, 1.0, -9.0 * x[0].cos(), -0.6 * x[1].abs());
            let b = SMatrix::<f64, 2, 1>::new(0.0, 2.0);
            Ok((self.rhs(x, u)?, a, b))
        }
    }

    #[test]
    fn zero_rhs_is_identity() {
        let x = SVector::from([1.5, -2.0]);
        assert_eq!(gl2_step(&Zero, &x, &SVector::from([3.0]), 0.1).unwrap(), x);
        let s = Sensitivity::<2>::identity(2);
        let su = Sensitivity::<1>::zeros(2);
        let (_, s1) = gl2_step_with_sensitivity(&Zero, &x, &s, &SVector::from([0.0]), &su, 0.1).unwrap();
        assert_eq!(s1, s);
    }

    #[test]
    fn scalar_linear_matches_closed_form() {
        let sys = Linear::<1, 1> {
            a: SMatrix::from([[-3.0]]),
            b: SMatrix::zeros(),
        };
        let (h, a) = (0.1, -3.0);
        let x = SVector::from([2.0]);
        let x1 = gl2_step(&sys, &x, &SVector::zeros(), h).unwrap();
        let exact = 2.0 * (1.0 + h * a / 2.0) / (1.0 - h * a / 2.0);
        assert!((x1[0] - exact).abs() < 1e-14);
    }

    #[test]
    fn linear_sensitivity_is_transition_matrix() {
        let a = SMatrix::<f64, 2, 2>::new(0.0, 1.0, -4.0, -0.5);
        let b = SMatrix::<f64, 2, 1>::new(0.0, 1.0);
        let sys = Linear { a, b };
        let h = 0.05;
        let i = SMatrix::<f64, 2, 2>::identity();
        let lu = (i - a * (h / 2.0)).lu();
        let phi = lu.solve(&(i + a * (h / 2.0))).unwrap();
        let gamma = lu.solve(&b).unwrap() * h;
        let x_sens = Sensitivity::<2>::from_column_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let u_sens = Sensitivity::<1>::from_column_slice(&[0.0, 0.0, 1.0]);
        let (_, s) = gl2_step_with_sensitivity(
            &sys,
            &SVector::from([0.3, 0.1]),
            &x_sens,
            &SVector::from([1.0]),
            &u_sens,
            h,
        )
        .unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((s[(r, c)] - phi[(r, c)]).abs() < 1e-14);
            }
            assert!((s[(r, 2)] - gamma[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn second_order_convergence() {
        let integrate = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut x = SVector::from([1.0]);
            for _ in 0..steps {
                x = gl2_step(&Cubic, &x, &SVector::zeros(), h).unwrap();
            }
            x[0]
        };
        // x' = -x^3, x(0) = 1  =>  x(t) = 1 / sqrt(1 + 2t)
        let exact = 1.0 / 3f64.sqrt();
        let e1 = (integrate(20) - exact).abs();
        let e2 = (integrate(40) - exact).abs();
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 0.02;
        let eps = 1e-6;
        for _ in 0..50 {
            let x = SVector::from([rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)]);
            let u = SVector::from([rng.random_range(-1.0..1.0)]);
            // parameters: (x0_1, x0_2, u)
            let xs = Sensitivity::<2>::from_column_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
            let us = Sensitivity::<1>::from_column_slice(&[0.0, 0.0, 1.0]);
            let (_, s) = gl2_step_with_sensitivity(&Pendulum, &x, &xs, &u, &us, h).unwrap();
            for p in 0..3 {
                let shift = |sign: f64| {
                    let mut xp = x;
                    let mut up = u;
                    if p < 2 {
                        xp[p] += sign * eps;
                    } else {
                        up[0] += sign * eps;
                    }
                    gl2_step(&Pendulum, &xp, &up, h).unwrap()
                };
                let fd = (shift(1.0) - shift(-1.0)) / (2.0 * eps);
                for r in 0..2 {
                    let err = (fd[r] - s[(r, p)]).abs() / s[(r, p)].abs().max(1e-3);
                    assert!(err < 1e-5, "param {p} row {r}: {} vs {}", s[(r, p)], fd[r]);
                }
            }
        }
    }

    #[test]
    fn stiff_blowup_reports_nonconvergence() {
        struct Explosive;
        impl Dynamics<1, 1> for Explosive {
            fn rhs(&self, x: &SVector<f64, 1>, _: &SVector<f64, 1>) -> Result<SVector<f64, 1>> {
                Ok(SVector::from([x[0].powi(2) * 1e3]))
            }
            fn jacobians(
                &self,
                x: &SVector<f64, 1>,
                u: &SVector<f64, 1>,
            ) -> Result<(SVector<f64, 1>, SMatrix<f64, 1, 1>, SMatrix<f64, 1, 1>)> {
                Ok((self.rhs(x, u)?, SMatrix::from([[2e3 * x[0]]]), SMatrix::zeros()))
            }
        }
        let r = gl2_step(&Explosive, &SVector::from([10.0]), &SVector::zeros(), 1.0);
        assert!(matches!(r, Err(Error::NonConvergence { .. })));
    }
}
