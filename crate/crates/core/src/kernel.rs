//! Inverse power law coagulation kernel K(x, x*) = 2 (x x*)^-alpha.
//!
//! The kernel is homogeneous of degree lambda = -2 alpha <= 0, so the
//! mean particle size of a self-similar solution grows like
//! sigma(t) = (1 + w (1 - lambda) t)^(1/(1 - lambda)).

use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};

/// Kernel exponent together with the self-similar speed and prescribed mass.
///
/// Every solver run is parameterized by the triple (alpha, w, rho); alpha = 0
/// selects the constant kernel K = 2 used as the analytic baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub alpha: f64,
    pub w: f64,
    pub rho: f64,
}

impl KernelSpec {
    pub fn new(alpha: f64, w: f64, rho: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite() && w > 0.0 && w.is_finite() && rho > 0.0 && rho.is_finite())
        {
            return Err(CoagError::InvalidKernel { alpha, w, rho });
        }
        Ok(Self { alpha, w, rho })
    }

    /// Kernel value 2 (x x*)^-alpha, symmetric in its arguments.
    pub fn eval(&self, x: f64, x_star: f64) -> Result<f64> {
        if !(x > 0.0 && x_star > 0.0) {
            return Err(CoagError::DomainError { x, x_star });
        }
        Ok(2.0 * (x * x_star).powf(-self.alpha))
    }

    /// Homogeneity degree lambda = -2 alpha.
    pub fn homogeneity(&self) -> f64 {
        -2.0 * self.alpha
    }

    /// Mean size sigma(t) = (1 + w (1 + 2 alpha) t)^(1/(1 + 2 alpha)).
    ///
    /// sigma(0) = 1 and sigma solves sigma' = w sigma^lambda.
    pub fn mean_size(&self, t: f64) -> f64 {
        let p = 1.0 + 2.0 * self.alpha;
        (1.0 + self.w * p * t).powf(1.0 / p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(alpha: f64) -> KernelSpec {
        KernelSpec::new(alpha, 1.0, 1.0).unwrap()
    }

    #[test]
    fn unit_sizes_give_two_for_any_alpha() {
        for alpha in [0.0, 0.25, 0.5, 1.0, 2.0] {
            assert_eq!(spec(alpha).eval(1.0, 1.0).unwrap(), 2.0);
        }
    }

    #[test]
    fn inverse_square_root_value() {
        // 2 * 4^(-1/2) = 1
        assert!((spec(0.5).eval(4.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_kernel_at_alpha_zero() {
        assert_eq!(spec(0.0).eval(3.7, 0.01).unwrap(), 2.0);
    }

    #[test]
    fn rejects_nonpositive_sizes() {
        assert!(spec(0.5).eval(0.0, 1.0).is_err());
        assert!(spec(0.5).eval(1.0, -2.0).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(KernelSpec::new(-0.1, 1.0, 1.0).is_err());
        assert!(KernelSpec::new(0.5, 0.0, 1.0).is_err());
        assert!(KernelSpec::new(0.5, 1.0, -1.0).is_err());
    }

    #[test]
    fn homogeneity_degree() {
        assert_eq!(spec(0.5).homogeneity(), -1.0);
        assert_eq!(spec(0.0).homogeneity(), 0.0);
        assert_eq!(spec(1.0).homogeneity(), -2.0);
    }

    #[test]
    fn kernel_scales_with_homogeneity_degree() {
        let k = spec(0.7);
        let lambda = k.homogeneity();
        for xi in [0.5, 2.0, 10.0] {
            for (x, y) in [(0.3, 1.7), (2.0, 2.0), (1e-3, 50.0)] {
                let lhs = k.eval(xi * x, xi * y).unwrap();
                let rhs = xi.powf(lambda) * k.eval(x, y).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
            }
        }
    }

    #[test]
    fn mean_size_examples() {
        assert_eq!(KernelSpec::new(0.5, 1.0, 1.0).unwrap().mean_size(0.0), 1.0);
        let s = KernelSpec::new(0.5, 1.0, 1.0).unwrap().mean_size(4.0);
        assert!((s - 3.0).abs() < 1e-14);
        let e = KernelSpec::new(0.0, 1.0, 1.0).unwrap().mean_size(std::f64::consts::E - 1.0);
        assert!((e - std::f64::consts::E).abs() < 1e-14);
    }

    #[test]
    fn mean_size_solves_its_ode() {
        // sigma' = w sigma^lambda, checked by central differences.
        for (alpha, w) in [(0.0, 1.0), (0.5, 2.0), (1.0, 0.7)] {
            let k = KernelSpec::new(alpha, w, 1.0).unwrap();
            let lambda = k.homogeneity();
            for t in [0.1, 1.0, 10.0, 100.0] {
                let h = 1e-5 * (1.0 + t);
                let d = (k.mean_size(t + h) - k.mean_size(t - h)) / (2.0 * h);
                let want = w * k.mean_size(t).powf(lambda);
                assert!((d - want).abs() <= 1e-6 * want.abs(), "t={t} alpha={alpha}");
            }
        }
    }

    #[test]
    fn mean_size_is_increasing() {
        let k = spec(0.25);
        let mut prev = k.mean_size(0.0);
        for i in 1..100 {
            let s = k.mean_size(i as f64 * 0.5);
            assert!(s > prev);
            prev = s;
        }
    }
}
