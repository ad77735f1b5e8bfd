//! Constant-kernel (alpha = 0) analytic baseline.
//!
//! For K = 2 the scaling profile is known in closed form,
//! phi(x) = (w^2 / rho) exp(-w x / rho), and its Bernstein transform
//! B(xi) = integral of (1 - e^(-x xi)) phi(x) dx solves the quadratic ODE
//!
//!   w xi B'(xi) + B(xi)^2 - w B(xi) = 0.
//!
//! Substituting the closed form B(xi) = w xi / (xi + w / rho) into the ODE
//! gives zero identically, which makes this module an end-to-end oracle for
//! the solver and the grid machinery.

use serde::Serialize;

use crate::error::{CoagError, Result};
use crate::grid::{GridHandle, SizeGrid};
use crate::kernel::KernelSpec;
use crate::profile::Profile;

/// Sampled Bernstein transform: values[i] approximates B(xi[i]).
#[derive(Debug, Clone, Serialize)]
pub struct BernsteinSamples {
    pub xi: Vec<f64>,
    pub values: Vec<f64>,
}

/// The exact constant-kernel profile (w^2 / rho) e^(-w x / rho) on a grid.
pub fn explicit_profile(w: f64, rho: f64, grid: &GridHandle) -> Result<Profile> {
    let spec = KernelSpec::new(0.0, w, rho)?;
    Profile::from_fn(grid.clone(), spec, |x| (w * w / rho) * (-w * x / rho).exp())
}

/// Closed-form transform of the explicit profile, used as a derived oracle.
pub fn explicit_bernstein(w: f64, rho: f64, xi: f64) -> f64 {
    w * xi / (xi + w / rho)
}

/// Logarithmically spaced sample points, endpoints included.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err(CoagError::InvalidConfig(format!("log_spaced({lo}, {hi}, {n})")));
    }
    let la = lo.ln();
    let lb = hi.ln();
    Ok((0..n).map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp()).collect())
}

/// Bernstein transform of a profile by grid quadrature.
///
/// The integrand 1 - e^(-x xi) is computed through expm1 so small x xi do
/// not lose precision.
pub fn bernstein_transform(p: &Profile, xi: &[f64]) -> Result<BernsteinSamples> {
    if xi.iter().any(|&v| !(v > 0.0)) {
        return Err(CoagError::InvalidConfig("Bernstein sample points must be positive".into()));
    }
    let grid: &SizeGrid = p.grid();
    let mut values = Vec::with_capacity(xi.len());
    for &s in xi {
        let integrand: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(p.values().iter())
            .map(|(&x, &v)| -(-x * s).exp_m1() * v)
            .collect();
        values.push(grid.integrate(&integrand)?);
    }
    Ok(BernsteinSamples { xi: xi.to_vec(), values })
}

/// Pointwise residual of w xi B' + B^2 - w B with B' from finite differences
/// in log xi.
///
/// Interior points use a five-point centered stencil (fourth order), the
/// near-boundary points a three-point one, and the endpoints one-sided
/// differences, so only stencil error pollutes the ends.
pub fn bernstein_ode_residual(samples: &BernsteinSamples, w: f64) -> Result<Vec<f64>> {
    let n = samples.xi.len();
    if n < 3 {
        return Err(CoagError::TooFewPoints { needed: 3, got: n });
    }
    if samples.values.len() != n {
        return Err(CoagError::LengthMismatch { expected: n, got: samples.values.len() });
    }
    let u: Vec<f64> = samples.xi.iter().map(|x| x.ln()).collect();
    let b = &samples.values;
    let d = (u[n - 1] - u[0]) / (n - 1) as f64;
    for i in 1..n {
        if ((u[i] - u[i - 1]) - d).abs() > 1e-9 * d.abs() {
            return Err(CoagError::InvalidConfig(
                "Bernstein samples must be log-uniform for the stencil".into(),
            ));
        }
    }
    // xi dB/dxi = dB/d(log xi)
    let db_dlog = |i: usize| -> f64 {
        if i >= 2 && i + 2 < n {
            (-b[i + 2] + 8.0 * b[i + 1] - 8.0 * b[i - 1] + b[i - 2]) / (12.0 * d)
        } else if i >= 1 && i + 1 < n {
            (b[i + 1] - b[i - 1]) / (2.0 * d)
        } else if i == 0 {
            (-3.0 * b[0] + 4.0 * b[1] - b[2]) / (2.0 * d)
        } else {
            (3.0 * b[n - 1] - 4.0 * b[n - 2] + b[n - 3]) / (2.0 * d)
        }
    };
    Ok((0..n).map(|i| w * db_dlog(i) + b[i] * b[i] - w * b[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn grid(x_min: f64, x_max: f64, n: usize) -> GridHandle {
        Arc::new(SizeGrid::geometric(x_min, x_max, n).unwrap())
    }

    /// Composite Simpson rule, independent of the grid machinery.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 0 { n } else { n + 1 };
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let c = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += c * f(a + h * i as f64);
        }
        acc * h / 3.0
    }

    #[test]
    fn closed_form_transform_solves_the_ode_identically() {
        // Oracle check done before trusting the closed form anywhere else:
        // substitute B = w xi / (xi + w/rho) with its analytic derivative.
        for (w, rho) in [(1.0, 1.0), (2.0, 1.0), (1.0, 3.0), (0.5, 0.7)] {
            for xi in [1e-3, 0.1, 1.0, 10.0, 1e3] {
                let b = explicit_bernstein(w, rho, xi);
                let db = w * (w / rho) / (xi + w / rho).powi(2);
                let res = w * xi * db + b * b - w * b;
                assert!(res.abs() < 1e-12, "w={w} rho={rho} xi={xi}: {res}");
            }
        }
    }

    #[test]
    fn closed_form_matches_independent_quadrature() {
        let (w, rho) = (2.0, 1.5);
        for xi in [0.3, 1.0, 4.0] {
            let numeric = simpson(
                |x| (1.0 - (-x * xi).exp()) * (w * w / rho) * (-w * x / rho).exp(),
                0.0,
                80.0,
                20000,
            );
            assert!((numeric - explicit_bernstein(w, rho, xi)).abs() < 1e-8);
        }
    }

    #[test]
    fn explicit_profile_has_prescribed_moments() {
        let g = grid(1e-6, 1e3, 4000);
        let p = explicit_profile(1.0, 1.0, &g).unwrap();
        assert!((p.moments().m1 - 1.0).abs() < 1e-5);
        assert!((p.moments().m0 - 1.0).abs() < 1e-5);

        let p = explicit_profile(2.0, 1.0, &g).unwrap();
        assert!((p.moments().m0 - 2.0).abs() < 1e-4);

        let p = explicit_profile(1.0, 3.0, &g).unwrap();
        assert!((p.moments().m1 - 3.0).abs() < 1e-4);
    }

    #[test]
    fn transform_of_unit_exponential() {
        let g = grid(1e-6, 1e3, 2000);
        let p = explicit_profile(1.0, 1.0, &g).unwrap();
        let s = bernstein_transform(&p, &[1.0]).unwrap();
        assert!((s.values[0] - 0.5).abs() < 1e-4);
        // Saturation limit for large xi is M_0
        let s = bernstein_transform(&p, &[1e6]).unwrap();
        assert!((s.values[0] - p.moments().m0).abs() < 1e-6);
    }

    #[test]
    fn transform_of_zero_profile_is_zero() {
        let g = grid(1e-3, 10.0, 32);
        let spec = KernelSpec::new(0.0, 1.0, 1.0).unwrap();
        let p = Profile::new(g.clone(), vec![0.0; 32], spec).unwrap();
        let s = bernstein_transform(&p, &log_spaced(0.01, 100.0, 40).unwrap()).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transform_is_monotone_and_concave_in_xi() {
        let g = grid(1e-6, 1e3, 2000);
        let p = explicit_profile(1.0, 1.0, &g).unwrap();
        let xi = log_spaced(1e-2, 1e3, 120).unwrap();
        let s = bernstein_transform(&p, &xi).unwrap();
        for i in 1..s.values.len() {
            assert!(s.values[i] >= s.values[i - 1]);
        }
        // Concavity in xi via second divided differences
        for i in 1..s.values.len() - 1 {
            let (x0, x1, x2) = (xi[i - 1], xi[i], xi[i + 1]);
            let (y0, y1, y2) = (s.values[i - 1], s.values[i], s.values[i + 1]);
            let dd = ((y2 - y1) / (x2 - x1) - (y1 - y0) / (x1 - x0)) / (x2 - x0);
            assert!(dd <= 1e-7, "xi={x1}: {dd}");
        }
    }

    #[test]
    fn ode_residual_small_on_explicit_transform() {
        let g = grid(1e-6, 1e3, 6000);
        let p = explicit_profile(1.0, 1.0, &g).unwrap();
        let xi = log_spaced(1e-2, 1e3, 200).unwrap();
        let s = bernstein_transform(&p, &xi).unwrap();
        let res = bernstein_ode_residual(&s, 1.0).unwrap();
        for i in 2..xi.len() - 2 {
            if (0.1..=10.0).contains(&xi[i]) {
                assert!(res[i].abs() <= 1e-6, "xi={}: {}", xi[i], res[i]);
            }
        }
    }

    #[test]
    fn ode_residual_vanishes_on_constant_solutions() {
        let xi = log_spaced(0.1, 10.0, 50).unwrap();
        let zero = BernsteinSamples { xi: xi.clone(), values: vec![0.0; 50] };
        assert!(bernstein_ode_residual(&zero, 1.3).unwrap().iter().all(|&r| r == 0.0));
        let w = 1.3;
        let flat = BernsteinSamples { xi, values: vec![w; 50] };
        assert!(bernstein_ode_residual(&flat, w).unwrap().iter().all(|&r| r.abs() < 1e-12));
    }

    #[test]
    fn ode_residual_needs_three_points() {
        let s = BernsteinSamples { xi: vec![1.0, 2.0], values: vec![0.5, 0.6] };
        assert!(matches!(bernstein_ode_residual(&s, 1.0), Err(CoagError::TooFewPoints { .. })));
    }
}
