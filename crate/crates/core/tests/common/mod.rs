//! Shared test oracles: central finite differences and tolerance checks,
//! independent of the autodiff implementation they validate.

#![allow(dead_code)]

use nora_core::util::rng::{self, SeededRng};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-9;

/// Central finite-difference gradient of a scalar function of a flat vector.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let original = work[i];
        work[i] = original + step;
        let plus = f(&work);
        work[i] = original - step;
        let minus = f(&work);
        work[i] = original;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative agreement with a small absolute floor for near-zero gradients.
pub fn grads_close(analytic: &[f64], numeric: &[f64], rel_tol: f64) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!(
            "length mismatch: {} vs {}",
            analytic.len(),
            numeric.len()
        ));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        if err > rel_tol * a.abs().max(n.abs()) && err > ABS_FLOOR {
            return Err(format!(
                "index {i}: analytic {a:.12e} vs numeric {n:.12e} (err {err:.3e})"
            ));
        }
    }
    Ok(())
}

pub fn uniform_vec(rng: &mut SeededRng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng::uniform(rng, lo, hi)).collect()
}
