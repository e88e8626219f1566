//! Equation parameters and derived exponents.
//!
//! The equation under study is u_t = Δu^m − |x|^σ u^p on ℝ^N, restricted to
//! the exponent range 1 < m < p, σ > 0. Everything downstream (profile ODE,
//! shooting, PDE runs) is gated on a validated [`Params`] value, and all
//! derived constants live in [`Exponents`] so they are computed exactly once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failures for the admissible exponent range.
#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("diffusion exponent must satisfy m > 1, got m = {0}")]
    DiffusionExponent(f64),
    #[error("absorption exponent must satisfy p > m, got p = {p}, m = {m}")]
    AbsorptionExponent { p: f64, m: f64 },
    #[error("weight exponent must satisfy sigma > 0, got sigma = {0} (use Params::homogeneous for the sigma = 0 test case)")]
    WeightExponent(f64),
    #[error("spatial dimension must satisfy N >= 1, got N = {0}")]
    Dimension(u32),
    #[error("parameters must be finite")]
    NonFinite,
}

/// The quadruple (m, p, σ, N) defining the equation.
///
/// `sigma == 0` is admitted only through [`Params::homogeneous`], which exists
/// so the exact spatially homogeneous solution can be used as a solver oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Diffusion exponent m > 1.
    pub m: f64,
    /// Absorption exponent p > m.
    pub p: f64,
    /// Weight exponent σ > 0 (0 only in homogeneous-test mode).
    pub sigma: f64,
    /// Spatial dimension N ≥ 1.
    pub dim: u32,
    homogeneous_test: bool,
}

impl Params {
    /// Validates and builds a parameter set in the admissible range.
    pub fn new(m: f64, p: f64, sigma: f64, dim: u32) -> Result<Self, ParamsError> {
        if !(m.is_finite() && p.is_finite() && sigma.is_finite()) {
            return Err(ParamsError::NonFinite);
        }
        if m <= 1.0 {
            return Err(ParamsError::DiffusionExponent(m));
        }
        if p <= m {
            return Err(ParamsError::AbsorptionExponent { p, m });
        }
        if sigma <= 0.0 {
            return Err(ParamsError::WeightExponent(sigma));
        }
        if dim < 1 {
            return Err(ParamsError::Dimension(dim));
        }
        Ok(Self { m, p, sigma, dim, homogeneous_test: false })
    }

    /// σ = 0 variant, admitted only for tests against the explicit
    /// homogeneous solution u(t) = ((p−1)t + A^{1−p})^{−1/(p−1)}.
    pub fn homogeneous(m: f64, p: f64, dim: u32) -> Result<Self, ParamsError> {
        if !(m.is_finite() && p.is_finite()) {
            return Err(ParamsError::NonFinite);
        }
        if m <= 1.0 {
            return Err(ParamsError::DiffusionExponent(m));
        }
        if p <= m {
            return Err(ParamsError::AbsorptionExponent { p, m });
        }
        if dim < 1 {
            return Err(ParamsError::Dimension(dim));
        }
        Ok(Self { m, p, sigma: 0.0, dim, homogeneous_test: true })
    }

    pub fn is_homogeneous_test(&self) -> bool {
        self.homogeneous_test
    }

    /// Dimension as a float, used throughout the numerics.
    pub fn n(&self) -> f64 {
        f64::from(self.dim)
    }

    /// Derives every exponent constant by direct substitution.
    pub fn exponents(&self) -> Exponents {
        Exponents::derive(self)
    }

    /// Canonical `m=..,p=..,sigma=..,N=..` string used as registry key stem.
    pub fn canonical(&self) -> String {
        format!("m={},p={},sigma={},N={}", self.m, self.p, self.sigma, self.dim)
    }
}

/// All derived constants of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    /// Denominator constant L = σ(m−1) + 2(p−1).
    pub l: f64,
    /// Time-decay exponent α = (σ+2)/L.
    pub alpha: f64,
    /// Spatial-spread exponent β = (p−m)/L.
    pub beta: f64,
    /// Critical exponent p_F(σ) = m + (σ+2)/N.
    pub p_fujita: f64,
    /// Critical tail exponent θ* = (σ+2)/(p−m).
    pub theta_star: f64,
    /// Porous-medium exponent η = 1/(mN − N + 2).
    pub eta: f64,
    /// Critical decay constant K_p = (1/(p−1))^{1/(p−1)}.
    pub k_p: f64,
    /// Rescaling power γ = L/(p−m).
    pub gamma_crit: f64,
    /// Stationary-solution constant C_*, present only when the defining
    /// bracket (mσ+2p)/(p−m) − N is positive.
    pub c_star: Option<f64>,
}

impl Exponents {
    pub fn derive(params: &Params) -> Self {
        let Params { m, p, sigma, .. } = *params;
        let n = params.n();
        let l = sigma * (m - 1.0) + 2.0 * (p - 1.0);
        let alpha = (sigma + 2.0) / l;
        let beta = (p - m) / l;
        let p_fujita = m + (sigma + 2.0) / n;
        let theta_star = (sigma + 2.0) / (p - m);
        let eta = 1.0 / (m * n - n + 2.0);
        let k_p = (1.0 / (p - 1.0)).powf(1.0 / (p - 1.0));
        let gamma_crit = l / (p - m);
        let bracket = (m * sigma + 2.0 * p) / (p - m) - n;
        let c_star = if bracket > 0.0 {
            Some((m * (sigma + 2.0) / (p - m) * bracket).powf(1.0 / (p - m)))
        } else {
            None
        };
        Self { l, alpha, beta, p_fujita, theta_star, eta, k_p, gamma_crit, c_star }
    }

    /// Critical decay rate σ/(p−1), the tail exponent paired with `k_p`.
    pub fn critical_decay(&self, params: &Params) -> f64 {
        params.sigma / (params.p - 1.0)
    }
}

/// Position of the initial-data tail exponent θ relative to the thresholds
/// θ* = (σ+2)/(p−m), θ^ = N and p_F(σ).
///
/// θ = 0 encodes data with a horizontal asymptote (no decay); θ = +∞ encodes
/// compactly supported data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeLabel {
    /// θ < θ*: attracted by the critical-decay self-similar solution.
    SlowestDecay,
    /// θ = θ*: attracted by the matching slow-decay self-similar solution.
    CriticalTail,
    /// θ > N with p > p_F(σ): asymptotic simplification toward Barenblatt.
    FastIntegrable,
    /// θ* < θ < N with p > p_F(σ): simplification toward the W_{θ,l} family.
    FastNonIntegrable,
    /// θ = N with p > p_F(σ): logarithmic time-scale correction.
    BorderlineN,
    /// θ > θ* with p ≤ p_F(σ): outside the proven range.
    OpenCase,
}

/// Classifies the large-time regime from the data tail exponent.
///
/// `theta` must be ≥ 0; `f64::INFINITY` is accepted for compact support.
pub fn classify_regime(params: &Params, theta: f64) -> RegimeLabel {
    assert!(theta >= 0.0 && !theta.is_nan(), "tail exponent must be >= 0");
    let exps = params.exponents();
    let n = params.n();
    if theta < exps.theta_star {
        RegimeLabel::SlowestDecay
    } else if theta == exps.theta_star {
        RegimeLabel::CriticalTail
    } else if params.p <= exps.p_fujita {
        RegimeLabel::OpenCase
    } else if theta > n {
        RegimeLabel::FastIntegrable
    } else if theta == n {
        RegimeLabel::BorderlineN
    } else {
        RegimeLabel::FastNonIntegrable
    }
}
