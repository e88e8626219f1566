//! Radial profile ODE engine.
//!
//! Integrates the generalized profile equation
//!
//!   (f^m)'' + (N−1)/ξ (f^m)' + a f + b ξ f' − [absorption] ξ^σ f^p = 0,
//!   f(0) = A > 0, f'(0) = 0,
//!
//! as a first-order system in (g, g') with g = f^m. The g-variables keep the
//! system regular up to the contact point where a profile touches zero, which
//! the f-variables do not (the equation is degenerate at f = 0). The singular
//! origin is handled by a second-order series start at a small ξ0 > 0.
//!
//! With `absorption` on and (a, b) = (α, β) this is the self-similar profile
//! equation of u_t = Δu^m − |x|^σ u^p; with absorption off and
//! (a, b) = (θ/γ, 1/γ), γ = (m−1)θ + 2, it is the pure porous-medium profile
//! equation, so one engine serves both the weighted-absorption profiles and
//! the Barenblatt / W_{θ,l} references.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Exponents, Params};

/// Relative drift below which a tail functional counts as flat.
pub const DRIFT_TOL: f64 = 1e-3;
/// Relative band around K_p accepted for a critical-decay verdict.
pub const BAND_TOL: f64 = 1e-2;
/// Relative growth of ξ^{σ/(p−1)} f above which a tail counts as divergent.
pub const GROWTH_TOL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("shooting value must be positive and finite, got {0}")]
    InvalidShot(f64),
    #[error("invalid integration controls: {0}")]
    InvalidControls(&'static str),
    #[error("adaptive step collapsed at xi = {xi:.6e} (g = {g:.6e}, g' = {dg:.6e}, h = {h:.3e})")]
    StepSizeUnderflow { xi: f64, g: f64, dg: f64, h: f64 },
    #[error("step budget {budget} exhausted at xi = {xi:.6e}")]
    StepBudgetExhausted { xi: f64, budget: u64 },
}

/// Power evaluation with fast paths for the exponents that actually occur
/// (m = 2, 3 and integer p dominate every configured run).
#[derive(Debug, Clone, Copy)]
enum Pow {
    One,
    Sqrt,
    Cbrt,
    Int(i32),
    General(f64),
}

impl Pow {
    fn new(e: f64) -> Self {
        if (e - 1.0).abs() < 1e-14 {
            Pow::One
        } else if (e - 0.5).abs() < 1e-14 {
            Pow::Sqrt
        } else if (e - 1.0 / 3.0).abs() < 1e-14 {
            Pow::Cbrt
        } else if (e - e.round()).abs() < 1e-12 && e.round().abs() <= 64.0 {
            Pow::Int(e.round() as i32)
        } else {
            Pow::General(e)
        }
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Pow::One => x,
            Pow::Sqrt => x.sqrt(),
            Pow::Cbrt => x.cbrt(),
            Pow::Int(k) => x.powi(k),
            Pow::General(e) => x.powf(e),
        }
    }
}

/// The generalized profile equation: coefficients of the f and ξ f' terms
/// plus the optional weighted absorption term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProfileOde {
    pub m: f64,
    pub dim: u32,
    /// Weight exponent of the absorption term (unused when `absorption` is off).
    pub sigma: f64,
    /// Absorption exponent (unused when `absorption` is off).
    pub p: f64,
    /// Coefficient of f.
    pub a_coef: f64,
    /// Coefficient of ξ f'.
    pub b_coef: f64,
    pub absorption: bool,
}

impl ProfileOde {
    /// Full self-similar profile equation with (a, b) = (α, β).
    pub fn selfsim(params: &Params) -> Self {
        let e = params.exponents();
        Self {
            m: params.m,
            dim: params.dim,
            sigma: params.sigma,
            p: params.p,
            a_coef: e.alpha,
            b_coef: e.beta,
            absorption: true,
        }
    }

    /// Pure porous-medium profile equation for the self-similar family with
    /// tail exponent θ: (a, b) = (θ/γ, 1/γ), γ = (m−1)θ + 2.
    pub fn pme(m: f64, dim: u32, theta: f64) -> Self {
        let gamma = (m - 1.0) * theta + 2.0;
        Self {
            m,
            dim,
            sigma: 0.0,
            p: m + 1.0, // inert without absorption
            a_coef: theta / gamma,
            b_coef: 1.0 / gamma,
            absorption: false,
        }
    }

    fn n(&self) -> f64 {
        f64::from(self.dim)
    }
}

/// Knobs for a single profile integration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntegrationControls {
    /// Integration stops at ξ = xi_max if nothing else happened first.
    pub xi_max: f64,
    /// Series-start abscissa; default 1e-8 · max(1, A^{(m−1)/2}).
    pub xi0: Option<f64>,
    pub rel_tol: f64,
    /// Absolute tolerance on g; default 1e-2 · f_floor^m.
    pub abs_tol: Option<f64>,
    /// Contact event fires at f ≤ f_floor_rel · A. Kept far below any
    /// genuine tail value reached before xi_max so that power-law decay is
    /// never mistaken for contact.
    pub f_floor_rel: f64,
    /// Contact/Crossing split: |g'| at the event below contact_tol · max|g'|
    /// counts as contact. Ties resolve toward Crossing.
    pub contact_tol: f64,
    /// Geometric spacing of logged samples.
    pub sample_ratio: f64,
    /// Sample density bound: consecutive |Δf| relative to the running max.
    pub max_rel_jump: f64,
    /// Hard cap on accepted + rejected steps; near-threshold dips can be
    /// arbitrarily deep and this keeps a single probe bounded.
    pub max_steps: u64,
}

impl Default for IntegrationControls {
    fn default() -> Self {
        Self {
            xi_max: 2e3,
            xi0: None,
            rel_tol: 1e-10,
            abs_tol: None,
            f_floor_rel: 1e-30,
            contact_tol: 1e-6,
            sample_ratio: 1.01,
            max_rel_jump: 0.05,
            max_steps: 5_000_000,
        }
    }
}

impl IntegrationControls {
    /// Reference-oracle settings used to produce registry golden values.
    pub fn reference() -> Self {
        Self { rel_tol: 1e-12, ..Self::default() }
    }

    pub fn default_xi0(ode: &ProfileOde, a_shoot: f64) -> f64 {
        1e-8 * 1.0f64.max(a_shoot.powf((ode.m - 1.0) / 2.0))
    }

    fn validate(&self) -> Result<(), OdeError> {
        if !(self.xi_max > 0.0) {
            return Err(OdeError::InvalidControls("xi_max must be positive"));
        }
        if let Some(x0) = self.xi0 {
            if !(x0 > 0.0 && x0 < self.xi_max) {
                return Err(OdeError::InvalidControls("xi0 must lie in (0, xi_max)"));
            }
        }
        if !(self.rel_tol > 0.0 && self.f_floor_rel > 0.0 && self.contact_tol > 0.0) {
            return Err(OdeError::InvalidControls("tolerances must be positive"));
        }
        if !(self.sample_ratio > 1.0) {
            return Err(OdeError::InvalidControls("sample_ratio must exceed 1"));
        }
        Ok(())
    }
}

/// Why an integration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    ReachedXiMax,
    /// f reached the floor; `slope` is (f^m)' there.
    ContactZero { xi: f64, slope: f64 },
    Overflow { xi: f64 },
}

/// Asymptotic verdict for a terminated trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TailClass {
    /// ξ^{θ*} f plateaus at K > 0.
    SlowDecay { k_est: f64 },
    /// ξ^{σ/(p−1)} f plateaus within the K_p band.
    CriticalDecay { k_est: f64 },
    /// f reached zero with (f^m)' below −contact_tol.
    Crossing,
    /// f reached zero with vanishing (f^m)': admissible interface.
    Contact,
    /// ξ^{σ/(p−1)} f grows beyond the growth bound.
    Divergent,
    /// No verdict within xi_max.
    Indeterminate,
}

impl TailClass {
    pub fn is_slow_decay(&self) -> bool {
        matches!(self, TailClass::SlowDecay { .. })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Sample {
    pub xi: f64,
    pub f: f64,
    /// (f^m)'(ξ)
    pub dg: f64,
}

/// Sampled solution of a profile integration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileTrajectory {
    pub ode: ProfileOde,
    /// A = f(0).
    pub shooting_value: f64,
    pub xi0: f64,
    pub samples: Vec<Sample>,
    pub termination: Termination,
    pub tail: TailClass,
    /// max |（f^m)'| observed along the run; the contact threshold is
    /// contact_tol times this.
    pub max_abs_dg: f64,
    pub contact_tol: f64,
}

impl ProfileTrajectory {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least the start sample")
    }

    /// ξ ↦ ξ^e f(ξ) over the stored samples.
    pub fn tail_functional(&self, e: f64) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.xi, s.xi.powf(e) * s.f)).collect()
    }

    /// Median of ξ^e f over the trailing decade; the robust plateau estimate.
    pub fn plateau_estimate(&self, e: f64) -> f64 {
        let xi_end = self.last().xi;
        let mut vals: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.xi >= xi_end / 10.0)
            .map(|s| s.xi.powf(e) * s.f)
            .collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals[vals.len() / 2]
    }
}

/// Second-order expansion of g = f^m at a small ξ0, matching the leading
/// orders of the profile equation as ξ → 0:
///
///   g(ξ) = A^m − (a A / 2N) ξ²,   g'(ξ) = −(a A / N) ξ.
///
/// The absorption term contributes only at O(ξ^{σ+2}) and is dropped.
pub fn series_start(ode: &ProfileOde, a_shoot: f64, xi0: f64) -> (f64, f64) {
    let n = ode.n();
    let gm = a_shoot.powf(ode.m);
    let c = ode.a_coef * a_shoot / (2.0 * n);
    (gm - c * xi0 * xi0, -2.0 * c * xi0)
}

struct Kernel {
    n_minus_1: f64,
    m: f64,
    a: f64,
    b: f64,
    p_exp: f64,
    absorption: bool,
    inv_m: Pow,
    m_minus_1: Pow,
    pow_p: Pow,
    pow_sigma: Pow,
    /// Denominator guard for 1/f^{m−1} below the floor.
    f_guard: f64,
}

impl Kernel {
    fn new(ode: &ProfileOde, f_floor: f64) -> Self {
        Self {
            n_minus_1: ode.n() - 1.0,
            m: ode.m,
            a: ode.a_coef,
            b: ode.b_coef,
            p_exp: ode.p,
            absorption: ode.absorption,
            inv_m: Pow::new(1.0 / ode.m),
            m_minus_1: Pow::new(ode.m - 1.0),
            pow_p: Pow::new(ode.p),
            pow_sigma: Pow::new(ode.sigma),
            f_guard: f_floor,
        }
    }

    #[inline]
    fn rhs(&self, xi: f64, y: [f64; 2]) -> [f64; 2] {
        let g = y[0].max(0.0);
        let h = y[1];
        let f = self.inv_m.apply(g);
        // b ξ f' = b ξ g' / (m f^{m−1}), with the denominator frozen at the
        // floor once f drops below it (the event machinery stops us there).
        let fm1 = self.m_minus_1.apply(f.max(self.f_guard));
        let transport = self.b * xi * h / (self.m * fm1);
        let mut ddg = -self.n_minus_1 / xi * h - self.a * f - transport;
        if self.absorption {
            ddg += self.pow_sigma.apply(xi) * self.pow_p.apply(f);
        }
        [h, ddg]
    }

    /// Second row of ∂rhs/∂(g, h); the first row is (0, 1).
    #[inline]
    fn jac(&self, xi: f64, y: [f64; 2]) -> [f64; 2] {
        let g = y[0].max(0.0);
        let h = y[1];
        let f = self.inv_m.apply(g);
        let fm1 = self.m_minus_1.apply(f.max(self.f_guard));
        let mut j21 = 0.0;
        let j22 = -self.n_minus_1 / xi - self.b * xi / (self.m * fm1);
        if f > self.f_guard && g > 0.0 {
            let dfdg = 1.0 / (self.m * fm1);
            j21 = -self.a * dfdg
                + self.b * xi * h * (self.m - 1.0) / (self.m * self.m * g * fm1);
            if self.absorption {
                let fp1 = self.pow_p.apply(f) / f; // f^{p-1}
                j21 += self.pow_sigma.apply(xi) * self.p_exp * fp1 * dfdg;
            }
        }
        [j21, j22]
    }
}

/// ESDIRK tableau: explicit first stage, constant diagonal γ, stiffly
/// accurate (b equals the last stage row, so the last stage is FSAL).
struct Esdirk {
    stages: usize,
    gamma: f64,
    c: [f64; 7],
    a: [[f64; 7]; 7],
    b: [f64; 7],
    b_emb: [f64; 7],
    /// 1/(embedded order + 1), the step-controller exponent.
    err_exp: f64,
}

/// Kvaerno(4,2,3): 4 stages, order 3, embedded order 2, A/L-stable.
const KVAERNO423: Esdirk = {
    const G: f64 = 0.4358665215;
    Esdirk {
        stages: 4,
        gamma: G,
        c: [0.0, 0.871733043, 1.0, 1.0, 0.0, 0.0, 0.0],
        a: [
            [0.0; 7],
            [G, G, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.490563388419108, 0.073570090080892, G, 0.0, 0.0, 0.0, 0.0],
            [0.308809969973036, 1.490563388254106, -1.235239879727145, G, 0.0, 0.0, 0.0],
            [0.0; 7],
            [0.0; 7],
            [0.0; 7],
        ],
        b: [0.308809969973036, 1.490563388254106, -1.235239879727145, G, 0.0, 0.0, 0.0],
        b_emb: [0.490563388419108, 0.073570090080892, G, 0.0, 0.0, 0.0, 0.0],
        err_exp: 1.0 / 3.0,
    }
};

/// Kvaerno(7,4,5): 7 stages, order 5, embedded order 4, A/L-stable.
const KVAERNO745: Esdirk = {
    const G: f64 = 0.26;
    Esdirk {
        stages: 7,
        gamma: G,
        c: [0.0, 0.52, 1.230333209967908, 0.895765984350076, 0.436393609858648, 1.0, 1.0],
        a: [
            [0.0; 7],
            [G, G, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.13, 0.84033320996790809, G, 0.0, 0.0, 0.0, 0.0],
            [0.22371961478320505, 0.47675532319799699, -0.06470895363112615, G, 0.0, 0.0, 0.0],
            [
                0.16648564323248321,
                0.10450018841591720,
                0.03631482272098715,
                -0.13090704451073998,
                G,
                0.0,
                0.0,
            ],
            [
                0.13855640231268224,
                0.0,
                -0.04245337201752043,
                0.02446657898003141,
                0.61943039072480676,
                G,
                0.0,
            ],
            [
                0.13659751177640291,
                0.0,
                -0.05496908796538376,
                -0.04118626728321046,
                0.62993304899016403,
                0.06962479448202728,
                G,
            ],
        ],
        b: [
            0.13659751177640291,
            0.0,
            -0.05496908796538376,
            -0.04118626728321046,
            0.62993304899016403,
            0.06962479448202728,
            G,
        ],
        b_emb: [
            0.13855640231268224,
            0.0,
            -0.04245337201752043,
            0.02446657898003141,
            0.61943039072480676,
            G,
            0.0,
        ],
        err_exp: 0.2,
    }
};

struct StepResult {
    y: [f64; 2],
    err: [f64; 2],
    k_last: [f64; 2],
}

/// One ESDIRK step with modified Newton on each implicit stage (the iteration
/// matrix I − hγJ is shared across stages). Returns None when Newton fails,
/// which the caller treats as a rejected step.
///
/// The embedded error difference is filtered through (I − hγJ)^{-1} so the
/// estimate stays realistic on the stiff transport mode.
fn esdirk_step(
    kernel: &Kernel,
    tab: &Esdirk,
    xi: f64,
    y: [f64; 2],
    k1: [f64; 2],
    h: f64,
    newton_scale: [f64; 2],
) -> Option<StepResult> {
    let hg = h * tab.gamma;
    let j2 = kernel.jac(xi, y);
    let m12 = -hg;
    let m21 = -hg * j2[0];
    let m22 = 1.0 - hg * j2[1];
    let det = m22 - m12 * m21;
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let solve = |r: [f64; 2]| {
        [(m22 * r[0] - m12 * r[1]) * inv_det, (r[1] - m21 * r[0]) * inv_det]
    };

    let mut k = [[0.0f64; 2]; 7];
    k[0] = k1;
    for i in 1..tab.stages {
        let mut z = y;
        for (j, kj) in k.iter().enumerate().take(i) {
            z[0] += h * tab.a[i][j] * kj[0];
            z[1] += h * tab.a[i][j] * kj[1];
        }
        let xi_i = xi + tab.c[i] * h;
        let mut ki = k[i - 1];
        let mut converged = false;
        let mut prev_norm = f64::INFINITY;
        for it in 0..12 {
            let yi = [z[0] + hg * ki[0], z[1] + hg * ki[1]];
            let fi = kernel.rhs(xi_i, yi);
            if !(fi[0].is_finite() && fi[1].is_finite()) {
                return None;
            }
            let d = solve([ki[0] - fi[0], ki[1] - fi[1]]);
            ki[0] -= d[0];
            ki[1] -= d[1];
            // Corrections act on y through hγ·k: converge them well below the
            // step-error scale.
            let norm = (hg * d[0] / newton_scale[0])
                .abs()
                .max((hg * d[1] / newton_scale[1]).abs());
            if !norm.is_finite() {
                return None;
            }
            if norm < 0.03 {
                converged = true;
                break;
            }
            if it > 2 && norm > 0.9 * prev_norm {
                break;
            }
            prev_norm = norm;
        }
        if !converged {
            return None;
        }
        k[i] = ki;
    }

    let mut y_new = y;
    let mut err_raw = [0.0f64; 2];
    for j in 0..tab.stages {
        y_new[0] += h * tab.b[j] * k[j][0];
        y_new[1] += h * tab.b[j] * k[j][1];
        let db = tab.b[j] - tab.b_emb[j];
        err_raw[0] += h * db * k[j][0];
        err_raw[1] += h * db * k[j][1];
    }
    let err = solve(err_raw);
    Some(StepResult { y: y_new, err, k_last: k[tab.stages - 1] })
}

/// Integrates the profile equation from the series start at ξ0.
///
/// Stops at the first of: f ≤ f_floor (contact event, localized within the
/// step), ξ ≥ xi_max, or magnitude overflow. Samples are logged at
/// geometrically spaced ξ plus wherever f moves fast.
pub fn integrate_profile(
    ode: &ProfileOde,
    a_shoot: f64,
    controls: &IntegrationControls,
) -> Result<ProfileTrajectory, OdeError> {
    if !(a_shoot > 0.0 && a_shoot.is_finite()) {
        return Err(OdeError::InvalidShot(a_shoot));
    }
    controls.validate()?;

    let xi0 = controls.xi0.unwrap_or_else(|| IntegrationControls::default_xi0(ode, a_shoot));
    let f_floor = controls.f_floor_rel * a_shoot;
    let g_floor = f_floor.powf(ode.m);
    let abs_tol = controls.abs_tol.unwrap_or(1e-2 * g_floor).max(1e-300);
    let g_overflow = 1e60 * 1.0f64.max(a_shoot.powf(ode.m));
    let kernel = Kernel::new(ode, f_floor);
    let inv_m = Pow::new(1.0 / ode.m);

    let (g0, dg0) = series_start(ode, a_shoot, xi0);
    let mut xi = xi0;
    let mut y = [g0, dg0];
    let mut k1 = kernel.rhs(xi, y);
    let mut h = 0.01 * xi0;

    let est_samples = ((controls.xi_max / xi0).ln() / controls.sample_ratio.ln()) as usize + 16;
    let mut samples = Vec::with_capacity(est_samples.min(1 << 20));
    samples.push(Sample { xi, f: inv_m.apply(y[0].max(0.0)), dg: y[1] });
    let mut next_sample = xi0 * controls.sample_ratio;
    let mut f_running_max = samples[0].f;
    let mut max_abs_dg = y[1].abs();
    let mut last_sample_f = samples[0].f;

    let mut termination = None;
    let mut rejected_in_a_row = 0u32;
    let mut grew_last = true;
    // Local slope-magnitude memory: keeps the g'-error scale sane where g'
    // sweeps through zero at the bottom of a near-contact dip.
    let mut dg_mag_recent = y[1].abs();
    let mut steps_taken: u64 = 0;

    while termination.is_none() {
        if xi >= controls.xi_max {
            termination = Some(Termination::ReachedXiMax);
            break;
        }
        steps_taken += 1;
        if steps_taken > controls.max_steps {
            return Err(OdeError::StepBudgetExhausted { xi, budget: controls.max_steps });
        }
        // TODO: remove debug instrumentation
        if steps_taken % 500_000 == 0 && std::env::var("ODE_DEBUG").is_ok() {
            eprintln!(
                "step {steps_taken}: xi={xi:.6e} h={h:.3e} g={:.6e} dg={:.6e} next_sample={next_sample:.6e} rej={rejected_in_a_row}",
                y[0], y[1]
            );
        }
        let h_min = 1e-14 * xi.max(xi0);
        let mut h_try = h.min(controls.xi_max - xi).min((next_sample - xi).max(h_min));

        let step = dopri5_step(&kernel, xi, y, k1, h_try);
        let finite = step.y[0].is_finite() && step.y[1].is_finite();
        let mut err_ratio = f64::INFINITY;
        let mut dbg_e = [0.0f64; 2];
        if finite {
            let motion = y[1].abs() * h_try;
            let sc0 = abs_tol + controls.rel_tol * y[0].abs().max(step.y[0].abs()).max(motion);
            let slope_scale = y[0].abs() / xi.max(1e-300);
            let sc1 = abs_tol
                + controls.rel_tol
                    * y[1]
                        .abs()
                        .max(step.y[1].abs())
                        .max(slope_scale)
                        .max(0.1 * dg_mag_recent);
            let e0 = step.err[0] / sc0;
            let e1 = step.err[1] / sc1;
            dbg_e = [e0, e1];
            err_ratio = (0.5 * (e0 * e0 + e1 * e1)).sqrt();
        }
        if steps_taken % 500_000 == 0 && std::env::var("ODE_DEBUG").is_ok() {
            eprintln!("   e0={:.3e} e1={:.3e} err_ratio={err_ratio:.3e}", dbg_e[0], dbg_e[1]);
            eprintln!("   raw err=[{:.3e},{:.3e}] k1=[{:.6e},{:.6e}]", step.err[0], step.err[1], k1[0], k1[1]);
            let probe_rhs = |dxi: f64| kernel.rhs(xi + dxi, [y[0] + y[1] * dxi, y[1]]);
            for dxi in [0.0, 0.5 * h_try, h_try] {
                let r = probe_rhs(dxi);
                eprintln!("   rhs(xi+{dxi:.2e}) = [{:.9e}, {:.9e}]", r[0], r[1]);
            }
        }

        if err_ratio <= 1.0 {
            rejected_in_a_row = 0;
            let xi_new = xi + h_try;
            // Contact event: localize g = g_floor inside the step.
            if step.y[0] <= g_floor {
                let (xi_ev, y_ev) = localize_contact(&kernel, xi, y, k1, h_try, g_floor);
                max_abs_dg = max_abs_dg.max(y_ev[1].abs());
                samples.push(Sample { xi: xi_ev, f: inv_m.apply(y_ev[0].max(0.0)), dg: y_ev[1] });
                termination = Some(Termination::ContactZero { xi: xi_ev, slope: y_ev[1] });
                break;
            }
            if step.y[0] >= g_overflow {
                samples.push(Sample { xi: xi_new, f: inv_m.apply(step.y[0]), dg: step.y[1] });
                termination = Some(Termination::Overflow { xi: xi_new
                });
                break;
            }
            xi = xi_new;
            y = step.y;
            k1 = step.k_last;
            max_abs_dg = max_abs_dg.max(y[1].abs());
            dg_mag_recent = y[1].abs().max(0.9 * dg_mag_recent);
            let f_here = inv_m.apply(y[0].max(0.0));
            f_running_max = f_running_max.max(f_here);

            let on_sample = xi >= next_sample - 1e-12 * xi;
            let fast_move =
                (f_here - last_sample_f).abs() > 0.5 * controls.max_rel_jump * f_running_max;
            if on_sample || fast_move {
                samples.push(Sample { xi, f: f_here, dg: y[1] });
                last_sample_f = f_here;
                if on_sample {
                    next_sample = next_sample.max(xi) * controls.sample_ratio;
                }
            }
            if xi >= controls.xi_max {
                if samples.last().map(|s| s.xi < xi).unwrap_or(true) {
                    samples.push(Sample { xi, f: f_here, dg: y[1] });
                }
                termination = Some(Termination::ReachedXiMax);
                break;
            }
            // Standard step growth, held back right after a rejection.
            let cap = if grew_last { 5.0 } else { 1.0 };
            let fac = if err_ratio > 0.0 {
                (0.9 * err_ratio.powf(-0.2)).clamp(0.2, cap)
            } else {
                cap
            };
            h = h_try * fac;
            grew_last = true;
        } else {
            rejected_in_a_row += 1;
            grew_last = false;
            let fac = if err_ratio.is_finite() {
                (0.9 * err_ratio.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.1
            };
            h_try *= fac;
            h = h_try;
            if h < h_min || rejected_in_a_row > 200 {
                // A collapsing step with f already microscopic and falling is
                // the degenerate contact layer, not a failure: the remaining
                // gap to the zero is below resolution.
                let f_here = inv_m.apply(y[0].max(0.0));
                if f_here <= 1e-4 * f_running_max && y[1] < 0.0 {
                    if samples.last().map(|s| s.xi < xi).unwrap_or(true) {
                        samples.push(Sample { xi, f: f_here, dg: y[1] });
                    }
                    termination = Some(Termination::ContactZero { xi, slope: y[1] });
                    break;
                }
                return Err(OdeError::StepSizeUnderflow { xi, g: y[0], dg: y[1], h });
            }
        }
    }

    let termination = termination.expect("loop sets termination before exit");
    Ok(ProfileTrajectory {
        ode: *ode,
        shooting_value: a_shoot,
        xi0,
        samples,
        termination,
        tail: TailClass::Indeterminate,
        max_abs_dg,
        contact_tol: controls.contact_tol,
    })
}

/// Regula falsi on the step length until g lands at the floor.
fn localize_contact(
    kernel: &Kernel,
    xi: f64,
    y: [f64; 2],
    k1: [f64; 2],
    h_full: f64,
    g_floor: f64,
) -> (f64, [f64; 2]) {
    let mut lo = 0.0f64;
    let mut g_lo = y[0];
    let mut hi = h_full;
    let full = dopri5_step(kernel, xi, y, k1, h_full);
    let mut g_hi = full.y[0];
    let mut best = (xi + h_full, full.y);
    for _ in 0..80 {
        let denom = g_lo - g_hi;
        let mut h_t = if denom.abs() > 0.0 {
            lo + (g_lo - g_floor) * (hi - lo) / denom
        } else {
            0.5 * (lo + hi)
        };
        if !(h_t > lo && h_t < hi) {
            h_t = 0.5 * (lo + hi);
        }
        let trial = dopri5_step(kernel, xi, y, k1, h_t);
        if trial.y[0] > g_floor {
            lo = h_t;
            g_lo = trial.y[0];
        } else {
            hi = h_t;
            g_hi = trial.y[0];
            best = (xi + h_t, trial.y);
        }
        if (g_hi - g_floor).abs() <= 0.05 * g_floor || (hi - lo) <= 1e-14 * xi.max(h_full) {
            break;
        }
    }
    best
}

/// Tail verdict from the trailing window of a terminated trajectory.
///
/// `window` is the trailing fraction of samples inspected, further capped to
/// the last ξ-decade so drift is always measured on a bounded range.
pub fn classify_tail(
    traj: &ProfileTrajectory,
    params: &Params,
    exps: &Exponents,
    window: f64,
) -> TailClass {
    assert!(window > 0.0 && window <= 0.5, "window must lie in (0, 1/2]");
    match traj.termination {
        Termination::ContactZero { slope, .. } => {
            let threshold = traj.contact_tol * traj.max_abs_dg;
            if slope.abs() <= threshold {
                return TailClass::Contact;
            }
            return TailClass::Crossing;
        }
        Termination::Overflow { .. } => return TailClass::Divergent,
        Termination::ReachedXiMax => {}
    }

    let n = traj.samples.len();
    let take = ((n as f64 * window).ceil() as usize).clamp(4, n);
    let xi_end = traj.last().xi;
    let tail: Vec<&Sample> = traj.samples[n - take..]
        .iter()
        .filter(|s| s.xi >= xi_end / 10.0)
        .collect();
    if tail.len() < 4 {
        return TailClass::Indeterminate;
    }

    let crit_exp = exps.critical_decay(params);
    let phi2: Vec<f64> = tail.iter().map(|s| s.xi.powf(crit_exp) * s.f).collect();
    let phi1: Vec<f64> = tail.iter().map(|s| s.xi.powf(exps.theta_star) * s.f).collect();

    if let Some(k) = flat_level(&phi2) {
        if (k - exps.k_p).abs() <= BAND_TOL * exps.k_p {
            return TailClass::CriticalDecay { k_est: k };
        }
    }
    if let Some(k) = flat_level(&phi1) {
        if k > 0.0 {
            return TailClass::SlowDecay { k_est: k };
        }
    }
    let increasing = phi2.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
    if increasing && phi2[phi2.len() - 1] > phi2[0] * (1.0 + GROWTH_TOL) {
        return TailClass::Divergent;
    }
    TailClass::Indeterminate
}

/// Median if the values are flat to within DRIFT_TOL, else None.
fn flat_level(vals: &[f64]) -> Option<f64> {
    let mut sorted = vals.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let med = sorted[sorted.len() / 2];
    if med == 0.0 {
        return None;
    }
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    if ((hi - lo) / med.abs()) < DRIFT_TOL {
        Some(med)
    } else {
        None
    }
}

/// Convenience: integrate and classify in one call.
pub fn integrate_and_classify(
    ode: &ProfileOde,
    params: &Params,
    exps: &Exponents,
    a_shoot: f64,
    controls: &IntegrationControls,
    window: f64,
) -> Result<ProfileTrajectory, OdeError> {
    let mut traj = integrate_profile(ode, a_shoot, controls)?;
    traj.tail = classify_tail(&traj, params, exps, window);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_params() -> Params {
        Params::new(2.0, 3.0, 1.0, 1).unwrap()
    }

    /// Barenblatt profile for m=2, N=1, D=1: f(ξ) = (1 − ξ²/12)_+,
    /// k = (m−1)/(2m(mN−N+2)) = 1/12.
    fn barenblatt_profile(xi: f64) -> f64 {
        (1.0 - xi * xi / 12.0).max(0.0)
    }

    #[test]
    fn series_start_matches_expansion() {
        let ode = ProfileOde { a_coef: 0.6, ..ProfileOde::selfsim(&default_params()) };
        let (g, dg) = series_start(&ode, 1.0, 1e-6);
        assert!((g - (1.0 - 0.3e-12)).abs() < 1e-18);
        assert!((dg + 0.6e-6).abs() < 1e-18);

        let ode3 = ProfileOde::pme(2.0, 3, 1.0); // a = 1/5... use explicit a below
        let ode3 = ProfileOde { a_coef: 1.0, ..ode3 };
        let (g, dg) = series_start(&ode3, 2.0, 1e-3);
        assert!((g - (4.0 - (2.0 / 6.0) * 1e-6)).abs() < 1e-15);
        assert!((dg + (2.0 / 3.0) * 1e-3).abs() < 1e-15);
    }

    #[test]
    fn series_start_limits() {
        let ode = ProfileOde::selfsim(&default_params());
        for a in [0.3, 1.0, 7.5] {
            let (g, dg) = series_start(&ode, a, 1e-12);
            assert!((g - a * a).abs() < 1e-12 * a * a);
            assert!(dg.abs() < 1e-10);
        }
    }

    /// Substituting the series back into the equation must leave a residual
    /// of order ξ^{min(2, σ)} relative to the leading terms.
    #[test]
    fn series_start_residual_scales_away() {
        let params = default_params(); // σ = 1 → residual O(ξ)
        let ode = ProfileOde::selfsim(&params);
        let a = 1.3;
        let kernel = Kernel::new(&ode, 1e-30);
        let resid = |xi: f64| {
            let (g, dg) = series_start(&ode, a, xi);
            // g'' from the series is the constant −aA/N; the kernel returns the
            // equation's value of g''. Residual = difference.
            let ddg_series = -ode.a_coef * a / ode.n();
            let ddg_eq = kernel.rhs(xi, [g, dg])[1];
            (ddg_eq - ddg_series).abs()
        };
        let r1 = resid(1e-4);
        let r2 = resid(1e-6);
        // σ = 1: residual ~ ξ^σ A^p, so two decades in ξ shrink it ~100×.
        assert!(r2 < r1 * 1e-1, "residual did not vanish: {r1:.3e} -> {r2:.3e}");
        assert!(r1 < 1e-3);
    }

    #[test]
    fn barenblatt_profile_oracle() {
        // Absorption off, (a, b) = (Nη, η): Barenblatt with D = 1 is exact.
        let ode = ProfileOde::pme(2.0, 1, 1.0);
        assert!((ode.a_coef - 1.0 / 3.0).abs() < 1e-15);
        assert!((ode.b_coef - 1.0 / 3.0).abs() < 1e-15);
        let controls = IntegrationControls { xi_max: 10.0, ..Default::default() };
        let traj = integrate_profile(&ode, 1.0, &controls).unwrap();

        let edge = 12.0f64.sqrt();
        match traj.termination {
            Termination::ContactZero { xi, .. } => {
                assert!((xi - edge).abs() < 1e-6, "contact at {xi}, expected {edge}")
            }
            other => panic!("expected contact, got {other:?}"),
        }
        let mut worst = 0.0f64;
        for s in &traj.samples {
            if s.xi <= 0.99 * edge {
                let exact = barenblatt_profile(s.xi);
                worst = worst.max((s.f - exact).abs() / exact);
            }
        }
        assert!(worst < 1e-6, "sup relative error {worst:.3e}");

        // Contact verdict: (f^m)' vanishes at the interface since m/(m−1) > 1.
        let params = default_params();
        let exps = params.exponents();
        assert_eq!(classify_tail(&traj, &params, &exps, 0.25), TailClass::Contact);
    }

    #[test]
    fn refinement_convergence() {
        // Positive decaying profile (ξ^{-1} tail), so the endpoint is regular.
        let ode = ProfileOde::pme(2.0, 2, 1.0);
        let base = IntegrationControls { xi_max: 50.0, rel_tol: 1e-8, ..Default::default() };
        let fine = IntegrationControls { rel_tol: 0.5e-8, ..base };
        let t1 = integrate_profile(&ode, 1.0, &base).unwrap();
        let t2 = integrate_profile(&ode, 1.0, &fine).unwrap();
        let f1 = t1.last().f;
        let f2 = t2.last().f;
        assert!(
            (f1 - f2).abs() / f2.abs().max(1e-300) < 10.0 * base.rel_tol,
            "halving tolerance moved the endpoint too much: {f1:.15e} vs {f2:.15e}"
        );
    }

    /// For p > p_F(σ) (θ* < N) small shots land on the slow-decay branch and
    /// large shots leave it; for p < p_F (θ* > N) small shots cross instead.
    #[test]
    fn shot_classes_split_by_fujita_position() {
        let fast = Params::new(2.0, 6.0, 1.0, 1).unwrap();
        let exps = fast.exponents();
        let ode = ProfileOde::selfsim(&fast);
        let controls = IntegrationControls::default();

        let lo = integrate_and_classify(&ode, &fast, &exps, 1e-4, &controls, 0.25).unwrap();
        assert!(lo.tail.is_slow_decay(), "A = 1e-4 should decay slowly, got {:?}", lo.tail);

        let hi = integrate_and_classify(&ode, &fast, &exps, 1e3, &controls, 0.25).unwrap();
        assert!(
            !hi.tail.is_slow_decay() && hi.tail != TailClass::Indeterminate,
            "A = 1e3 should leave the slow-decay class, got {:?}",
            hi.tail
        );

        let slow = default_params();
        let sexps = slow.exponents();
        let sode = ProfileOde::selfsim(&slow);
        let lo = integrate_and_classify(&sode, &slow, &sexps, 1e-4, &controls, 0.25).unwrap();
        assert_eq!(lo.tail, TailClass::Crossing, "p < p_F small shots cross");
    }

    #[test]
    fn synthetic_power_tails_classify_exactly() {
        let params = default_params();
        let exps = params.exponents();
        // f = ξ^{−3}: φ1 ≡ 1.
        let traj = synthetic_tail(|xi| xi.powi(-3), &params);
        match classify_tail(&traj, &params, &exps, 0.25) {
            TailClass::SlowDecay { k_est } => assert!((k_est - 1.0).abs() < 1e-12),
            other => panic!("expected slow decay, got {other:?}"),
        }
        // f = K_p ξ^{−1/2}: φ2 ≡ K_p.
        let kp = exps.k_p;
        let traj = synthetic_tail(move |xi| kp * xi.powf(-0.5), &params);
        match classify_tail(&traj, &params, &exps, 0.25) {
            TailClass::CriticalDecay { k_est } => assert!((k_est - kp).abs() < 1e-12),
            other => panic!("expected critical decay, got {other:?}"),
        }
    }

    /// Rescaling f_λ(ξ) = λ^{−2/(m−1)} f(λξ) maps a slow-decay constant K to
    /// λ^{−2/(m−1)−θ*} K: the tail verdict must transform accordingly.
    #[test]
    fn classify_tail_is_scale_consistent() {
        let params = default_params();
        let exps = params.exponents();
        let lambda: f64 = 1.7;
        let scale = lambda.powf(-2.0 / (params.m - 1.0));
        let k_expected = lambda.powf(-2.0 / (params.m - 1.0) - exps.theta_star);

        let base = |xi: f64| xi.powi(-3);
        let rescaled = move |xi: f64| scale * base(lambda * xi);
        let traj = synthetic_tail(rescaled, &params);
        match classify_tail(&traj, &params, &exps, 0.25) {
            TailClass::SlowDecay { k_est } => {
                assert!(
                    ((k_est - k_expected) / k_expected).abs() < 1e-12,
                    "K = {k_est}, expected {k_expected}"
                );
            }
            other => panic!("expected slow decay, got {other:?}"),
        }
    }

    #[test]
    fn tail_functional_transforms() {
        let params = default_params();
        let traj = synthetic_tail(|xi| xi.powi(-2), &params);
        for (xi, v) in traj.tail_functional(0.0) {
            assert!((v - xi.powi(-2)).abs() < 1e-15);
        }
        for (_, v) in traj.tail_functional(2.0) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    /// Two shots with A1 < A2 stay pointwise ordered while both remain
    /// positive and decreasing.
    #[test]
    fn monotone_comparison_in_shooting_value() {
        let params = default_params();
        let ode = ProfileOde::selfsim(&params);
        let controls = IntegrationControls {
            xi_max: 100.0,
            xi0: Some(1e-9),
            ..Default::default()
        };
        let t1 = integrate_profile(&ode, 0.4, &controls).unwrap();
        let t2 = integrate_profile(&ode, 0.9, &controls).unwrap();
        // Compare on the shared geometric sample grid.
        let map2: std::collections::BTreeMap<u64, f64> =
            t2.samples.iter().map(|s| (s.xi.to_bits(), s.f)).collect();
        let mut compared = 0;
        for s in &t1.samples {
            if let Some(&f2) = map2.get(&s.xi.to_bits()) {
                if s.f > 0.0 && f2 > 0.0 {
                    assert!(s.f < f2, "ordering violated at xi = {}: {} >= {}", s.xi, s.f, f2);
                    compared += 1;
                }
            }
        }
        assert!(compared > 100, "expected a dense shared grid, compared {compared}");
    }

    #[test]
    fn samples_are_strictly_increasing_and_dense() {
        let ode = ProfileOde::selfsim(&default_params());
        let traj = integrate_profile(&ode, 1.0, &IntegrationControls::default()).unwrap();
        let mut fmax = 0.0f64;
        for w in traj.samples.windows(2) {
            assert!(w[1].xi > w[0].xi);
            fmax = fmax.max(w[0].f);
            assert!((w[1].f - w[0].f).abs() <= 0.05 * fmax + 1e-300);
        }
        assert!((traj.samples[0].f - 1.0).abs() < 1e-10);
    }

    fn synthetic_tail(f: impl Fn(f64) -> f64, params: &Params) -> ProfileTrajectory {
        let ode = ProfileOde::selfsim(params);
        let mut samples = Vec::new();
        let mut xi = 1.0;
        while xi <= 1e4 {
            samples.push(Sample { xi, f: f(xi), dg: 0.0 });
            xi *= 1.01;
        }
        ProfileTrajectory {
            ode,
            shooting_value: f(1.0),
            xi0: 1.0,
            samples,
            termination: Termination::ReachedXiMax,
            tail: TailClass::Indeterminate,
            max_abs_dg: 1.0,
            contact_tol: 1e-6,
        }
    }
}
