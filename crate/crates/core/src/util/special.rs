//! Reference activation functions and their exact derivatives.
//!
//! These are the targets the fitting code approximates and the fixed
//! activations the model zoo can use directly, so they need full f64
//! accuracy; `erf` comes from libm.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx GELU = Phi(x) + x * phi(x).
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // GELU(1) = 1 * Phi(1) = 0.841344746...
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-14);
        assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-14);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_derivative(x) - fd).abs() < 1e-8,
                "x={x}: {} vs {}",
                gelu_derivative(x),
                fd
            );
        }
    }

    #[test]
    fn silu_midpoint() {
        assert!((silu(0.0)).abs() < 1e-15);
        assert!((silu(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }
}
