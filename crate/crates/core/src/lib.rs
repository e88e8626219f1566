//! Numerical laboratory for the radial dynamics of u_t = Δu^m − |x|^σ u^p
//! with p > m > 1 and σ > 0: self-similar profiles by shooting, a monotone
//! finite-volume solver for the Cauchy problem, closed-form references, and
//! the large-time verification experiments built on top of them.

pub mod ode;
pub mod params;

pub use ode::{
    classify_tail, integrate_and_classify, integrate_profile, series_start, IntegrationControls,
    OdeError, ProfileOde, ProfileTrajectory, Sample, TailClass, Termination,
};
pub use params::{classify_regime, Exponents, Params, ParamsError, RegimeLabel};
