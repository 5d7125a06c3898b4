//! Pointwise shallow-lake dynamics, the local Hamiltonian, and the
//! closed-form optimal control.
//!
//! All functions here are pure; the spatial coupling (diffusion on the state,
//! anti-diffusion on the costate) lives in [`crate::cansys`].

use crate::error::{Error, Result};

/// Scalar constants of the shallow-lake model.
///
/// `b` is the phosphorus degradation rate and doubles as the primary
/// bifurcation parameter; `d = 0` recovers the 0D model per spatial point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Discount rate (1/time).
    pub r: f64,
    /// Pollution-cost weight in the objective.
    pub gamma: f64,
    /// Phosphorus degradation rate (1/time).
    pub b: f64,
    /// Diffusion coefficient (length^2/time).
    pub d: f64,
}

impl ModelParams {
    pub fn new(r: f64, gamma: f64, b: f64, d: f64) -> Result<Self> {
        if !(r > 0.0) || !(gamma > 0.0) || !(b > 0.0) || !(d >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "model parameters must satisfy r > 0, gamma > 0, b > 0, D >= 0 (got r={r}, gamma={gamma}, b={b}, D={d})"
            )));
        }
        Ok(Self { r, gamma, b, d })
    }

    /// Same parameters with the degradation rate replaced; used by the
    /// continuation in `b`.
    pub fn with_b(&self, b: f64) -> Self {
        Self { b, ..*self }
    }
}

/// A single spatial site of the canonical system: phosphorus stock and
/// costate. The associated load is `k = -1/q`, which requires `q < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState {
    pub p: f64,
    pub q: f64,
}

impl PointState {
    /// The load this costate prescribes, `k = -1/q`.
    pub fn control(&self) -> Result<f64> {
        optimal_control(self.q)
    }
}

/// Sediment recycling term g(P) = P^2 / (1 + P^2).
#[inline]
pub fn recycling(p: f64) -> f64 {
    p * p / (1.0 + p * p)
}

/// g'(P) = 2P / (1 + P^2)^2.
#[inline]
pub fn recycling_d1(p: f64) -> f64 {
    let s = 1.0 + p * p;
    2.0 * p / (s * s)
}

/// g''(P) = (2 - 6P^2) / (1 + P^2)^3.
#[inline]
pub fn recycling_d2(p: f64) -> f64 {
    let s = 1.0 + p * p;
    (2.0 - 6.0 * p * p) / (s * s * s)
}

/// Current-value objective density J_c(P, k) = ln k - gamma P^2.
pub fn current_objective(p: f64, k: f64, params: &ModelParams) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::NonpositiveControl { value: k });
    }
    Ok(k.ln() - params.gamma * p * p)
}

/// Interior maximizer of the Hamiltonian in k, namely k* = -1/q.
pub fn optimal_control(q: f64) -> Result<f64> {
    if !(q < 0.0) {
        return Err(Error::CostateSign { index: 0, value: q });
    }
    Ok(-1.0 / q)
}

/// Reaction part of the state equation: dP/dt = k - bP + g(P).
pub fn state_rhs(p: f64, k: f64, params: &ModelParams) -> f64 {
    k - params.b * p + recycling(p)
}

/// Costate equation: dq/dt = 2 gamma P + q (r + b - g'(P)).
pub fn costate_rhs(p: f64, q: f64, params: &ModelParams) -> f64 {
    2.0 * params.gamma * p + q * (params.r + params.b - recycling_d1(p))
}

/// Local current-value Hamiltonian H = J_c(P, k) + q (k - bP + g(P)).
pub fn hamiltonian(p: f64, q: f64, k: f64, params: &ModelParams) -> Result<f64> {
    Ok(current_objective(p, k, params)? + q * state_rhs(p, k, params))
}
