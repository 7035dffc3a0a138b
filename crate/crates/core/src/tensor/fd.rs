//! Finite-difference gradient verification.
//!
//! Independent oracle for every backward implementation: central
//! differences at f64 with h = 1e-5, compared against the analytic
//! gradient with a floored relative error.

use super::{Real, Tensor};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Floored relative error between an analytic and a numerical gradient.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Check d(loss)/d(leaf) for a scalar-valued builder. `build` receives a
/// leaf tensor (already marked as requiring grad for the analytic pass,
/// plain data for the probe passes) and returns the loss.
pub fn check_gradient(
    shape: &[usize],
    init: &[f64],
    build: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<f64> {
    let leaf = Tensor::from_vec(shape, init.to_vec())?.requires_grad();
    let loss = build(&leaf)?;
    let grads = loss.backward()?;
    let analytic = grads
        .get(&leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; init.len()]);

    let mut numeric = Vec::with_capacity(init.len());
    let mut probe = init.to_vec();
    for i in 0..init.len() {
        let orig = probe[i];
        probe[i] = orig + DEFAULT_STEP;
        let up = build(&Tensor::from_vec(shape, probe.clone())?)?.item();
        probe[i] = orig - DEFAULT_STEP;
        let down = build(&Tensor::from_vec(shape, probe.clone())?)?.item();
        probe[i] = orig;
        numeric.push((up - down) / (2.0 * DEFAULT_STEP));
    }
    Ok(max_rel_err(&analytic, &numeric))
}

/// Convenience wrapper asserting the default tolerance.
pub fn assert_gradient(
    shape: &[usize],
    init: &[f64],
    build: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) {
    let err = check_gradient(shape, init, build).expect("gradient check failed to run");
    assert!(
        err < DEFAULT_TOL,
        "finite-difference mismatch: rel err {err:.3e} >= {DEFAULT_TOL:.0e}"
    );
}

/// Deterministic pseudo-random values in [-1, 1] for check inputs.
pub fn probe_values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

impl<T: Real> Tensor<T> {
    /// Copy into an f64 tensor (verification paths).
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_vec(
            self.shape(),
            self.data().iter().map(|v| v.as_f64()).collect(),
        )
        .expect("shape preserved")
    }
}
