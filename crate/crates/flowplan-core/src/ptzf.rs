//! Prescribed-time zeroing schedules: reference signals r̄(t) that reach
//! zero exactly at t = T_pre under the blow-up-weighted dynamics
//! ṙ = −T_pre/(T_pre−t)² · γ_r(t, r), plus the free-generation budget that
//! sizes r̄(0) so the early flow stays unguided.
//!
//! The dynamics are integrated in the warped coordinate σ = t/(T_pre−t),
//! where they read dr/dσ = −γ_r(t(σ), r) and are not stiff; the raw t-form
//! has an unbounded local Lipschitz constant near T_pre and explicit
//! stepping on a t-grid diverges there.

use alloc::vec::Vec;

use crate::fmath;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PtzfError {
    /// Equality residuals must be nonnegative.
    InvalidResidual,
    /// The gain ordering c_PT > c_g > 0 is required by the budget formulas.
    InvalidGainOrdering,
}

impl core::fmt::Display for PtzfError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PtzfError::InvalidResidual => write!(f, "equality residual must be nonnegative"),
            PtzfError::InvalidGainOrdering => {
                write!(f, "free-generation budget requires c_PT > c_g > 0")
            }
        }
    }
}

impl core::error::Error for PtzfError {}

/// Rate map γ_r(t, r); must be extended class-K in r (strictly increasing,
/// zero at zero) for the zeroing guarantee to hold.
#[derive(Clone, Copy, Debug)]
pub enum RateMap {
    Linear { c_gamma: f64 },
    Custom(fn(f64, f64) -> f64),
}

impl RateMap {
    #[inline]
    fn rate(&self, t: f64, r: f64) -> f64 {
        match self {
            RateMap::Linear { c_gamma } => c_gamma * r,
            RateMap::Custom(f) => f(t, r),
        }
    }
}

// Warped-coordinate integration constants: checkpoint spacing, RK4 sub-step,
// and the σ beyond which checkpoints are not precomputed.
const CHECKPOINT_DSIGMA: f64 = 0.5;
const SUBSTEP_DSIGMA: f64 = 0.005;
const SIGMA_CAP: f64 = 2000.0;

#[inline]
fn sigma_of_t(t: f64, t_pre: f64) -> f64 {
    t / (t_pre - t)
}

#[inline]
fn t_of_sigma(sigma: f64, t_pre: f64) -> f64 {
    t_pre * sigma / (1.0 + sigma)
}

#[derive(Clone, Debug)]
enum Mode {
    ClosedFormLinear {
        c_gamma: f64,
    },
    Numeric {
        rate: RateMap,
        /// r at σ = σ_activation + k·CHECKPOINT_DSIGMA.
        checkpoints: Vec<f64>,
    },
}

/// A zeroing schedule r̄: value r0 until t = c_r·T_pre (free-generation
/// phase), decay afterwards, exactly zero for t ≥ T_pre.
#[derive(Clone, Debug)]
pub struct ZeroingSchedule {
    pub t_pre: f64,
    pub c_r: f64,
    pub r0: f64,
    mode: Mode,
}

impl ZeroingSchedule {
    /// Linear rate γ_r = c_γ·r evaluated in closed form:
    /// r(t) = r0·e^{−c_γ·(σ(t) − σ(c_r·T_pre))}, which for c_r = 0 is the
    /// familiar r0·e^{−c_γ·t/(T_pre−t)}.
    pub fn closed_form_linear(r0: f64, c_gamma: f64, c_r: f64, t_pre: f64) -> Self {
        assert!(t_pre > 0.0 && (0.0..1.0).contains(&c_r));
        ZeroingSchedule { t_pre, c_r, r0, mode: Mode::ClosedFormLinear { c_gamma } }
    }

    /// Numerically integrated schedule for a general rate map.
    pub fn numeric(r0: f64, rate: RateMap, c_r: f64, t_pre: f64) -> Self {
        assert!(t_pre > 0.0 && (0.0..1.0).contains(&c_r));
        let sigma_a = c_r / (1.0 - c_r);
        let mut checkpoints = Vec::new();
        let mut r = r0;
        checkpoints.push(r);
        let mut sigma = sigma_a;
        while r != 0.0 && sigma < SIGMA_CAP {
            r = integrate_sigma(&rate, t_pre, r, sigma, sigma + CHECKPOINT_DSIGMA);
            if r.abs() < 1e-290 {
                r = 0.0;
            }
            checkpoints.push(r);
            sigma += CHECKPOINT_DSIGMA;
        }
        ZeroingSchedule { t_pre, c_r, r0, mode: Mode::Numeric { rate, checkpoints } }
    }

    /// The identically-zero schedule.
    pub fn zero() -> Self {
        ZeroingSchedule::closed_form_linear(0.0, 1.0, 0.0, 1.0)
    }

    /// Schedule value and time derivative at `t`. Both are exactly zero for
    /// t ≥ T_pre; before the activation time c_r·T_pre the value holds at r0
    /// with zero derivative.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        if self.r0 == 0.0 || t >= self.t_pre {
            return (0.0, 0.0);
        }
        let t_act = self.c_r * self.t_pre;
        if t < t_act {
            return (self.r0, 0.0);
        }
        let sigma = sigma_of_t(t, self.t_pre);
        let sigma_a = self.c_r / (1.0 - self.c_r);
        let value = match &self.mode {
            Mode::ClosedFormLinear { c_gamma } => {
                self.r0 * fmath::exp(-c_gamma * (sigma - sigma_a))
            }
            Mode::Numeric { rate, checkpoints } => {
                let k = (((sigma - sigma_a) / CHECKPOINT_DSIGMA) as usize)
                    .min(checkpoints.len() - 1);
                let r_k = checkpoints[k];
                if r_k == 0.0 {
                    0.0
                } else {
                    let sigma_k = sigma_a + k as f64 * CHECKPOINT_DSIGMA;
                    integrate_sigma(rate, self.t_pre, r_k, sigma_k, sigma)
                }
            }
        };
        if value == 0.0 {
            return (0.0, 0.0);
        }
        let gamma = match &self.mode {
            Mode::ClosedFormLinear { c_gamma } => c_gamma * value,
            Mode::Numeric { rate, .. } => rate.rate(t, value),
        };
        let omt = self.t_pre - t;
        let deriv = -self.t_pre / (omt * omt) * gamma;
        (value, deriv)
    }
}

/// RK4 on dr/dσ = −γ_r(t(σ), r) from σ_from to σ_to. The step is limited so
/// |Δr| stays a small fraction of |r| per step, which keeps strongly
/// superlinear rates (large |r| transients) inside the stability region.
fn integrate_sigma(rate: &RateMap, t_pre: f64, mut r: f64, s_from: f64, s_to: f64) -> f64 {
    let mut s = s_from;
    while s < s_to {
        let k1 = -rate.rate(t_of_sigma(s, t_pre), r);
        let h = SUBSTEP_DSIGMA
            .min(s_to - s)
            .min(0.05 * (r.abs() + 1e-3) / (k1.abs() + 1e-30));
        let k2 = -rate.rate(t_of_sigma(s + 0.5 * h, t_pre), r + 0.5 * h * k1);
        let k3 = -rate.rate(t_of_sigma(s + 0.5 * h, t_pre), r + 0.5 * h * k2);
        let k4 = -rate.rate(t_of_sigma(s + h, t_pre), r + h * k3);
        r += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        s += h;
    }
    r
}

/// Schedule for an aggregated equality residual: r̄(0) = margin·g0.
pub fn make_equality_schedule(g0: f64, margin: f64) -> Result<ZeroingSchedule, PtzfError> {
    make_equality_schedule_with(g0, margin, 1.0, 0.0, 1.0)
}

pub fn make_equality_schedule_with(
    g0: f64,
    margin: f64,
    c_gamma: f64,
    c_r: f64,
    t_pre: f64,
) -> Result<ZeroingSchedule, PtzfError> {
    if g0 < 0.0 {
        return Err(PtzfError::InvalidResidual);
    }
    Ok(ZeroingSchedule::closed_form_linear(margin * g0, c_gamma, c_r, t_pre))
}

/// Schedule for a barrier residual: positive initial residuals get the
/// safety margin, already-safe (negative) residuals are tracked as-is so the
/// schedule stays nonpositive.
pub fn make_inequality_schedule_with(
    h0: f64,
    margin: f64,
    c_gamma: f64,
    c_r: f64,
    t_pre: f64,
) -> ZeroingSchedule {
    let r0 = if h0 > 0.0 { margin * h0 } else { h0 };
    ZeroingSchedule::closed_form_linear(r0, c_gamma, c_r, t_pre)
}

/// Coefficients sizing the schedule start value so the guidance stays
/// inactive on the free-generation window [0, c_r·T_pre].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeGenerationBudget {
    pub xi_t0: f64,
    pub xi_td: f64,
    /// Bound on the prior flow norm over the window.
    pub v_bar: f64,
}

impl FreeGenerationBudget {
    /// ξ_T0 = c_PT/(c_PT−c_g) · e^{c_g·c_r/(1−c_r)} / (1−c_r)²,
    /// ξ_T∂ = e^{c_g·c_r/(1−c_r)}/(c_PT−c_g) · (1 + c_PT·c_r/(1−c_r)²).
    pub fn new(c_pt: f64, c_g: f64, c_r: f64, v_bar: f64) -> Result<Self, PtzfError> {
        if !(c_pt > c_g && c_g > 0.0) {
            return Err(PtzfError::InvalidGainOrdering);
        }
        assert!((0.0..1.0).contains(&c_r));
        let omc = 1.0 - c_r;
        let boost = fmath::exp(c_g * c_r / omc);
        let xi_t0 = c_pt / (c_pt - c_g) * boost / (omc * omc);
        let xi_td = boost / (c_pt - c_g) * (1.0 + c_pt * c_r / (omc * omc));
        Ok(FreeGenerationBudget { xi_t0, xi_td, v_bar })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Equality,
    Inequality,
}

/// Minimal schedule start value guaranteeing zero guidance on the
/// free-generation window: ξ_T0·residual + ξ_T∂·L·v̄.
pub fn free_generation_floor(
    budget: &FreeGenerationBudget,
    residual: f64,
    lipschitz: f64,
    kind: ScheduleKind,
) -> Result<f64, PtzfError> {
    if kind == ScheduleKind::Equality && residual < 0.0 {
        return Err(PtzfError::InvalidResidual);
    }
    Ok(budget.xi_t0 * residual + budget.xi_td * lipschitz * budget.v_bar)
}
