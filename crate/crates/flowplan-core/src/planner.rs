//! Guided sampling: binds closed-form velocity fields, constraint encoders,
//! zeroing schedules, and the per-step correction QP into three planning
//! modes — full-trajectory flow, state flow with virtual actions, and
//! predictive control over (initial state, action sequence).

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::constraints::{
    action_barrier, aggregate_equality, dyn_consistency, initial_alignment, state_barrier,
};
use crate::dynamics::Model;
use crate::field::{FieldError, VelocityField, EPS_T};
use crate::fmath;
use crate::guidance::{
    assemble, solve, ClassKGain, GuidanceError, RowSpec, SparseRow,
};
use crate::linalg::{norm2, Mat};
use crate::ode::{self, OdeError, Trace, DEFAULT_STEPS};
use crate::ptzf::{
    free_generation_floor, make_equality_schedule_with, make_inequality_schedule_with,
    FreeGenerationBudget, PtzfError, ScheduleKind, ZeroingSchedule,
};
use crate::scene::Scene;
use crate::traj::{TrajLayout, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub enum PlanError {
    Ode(OdeError),
    Guidance(GuidanceError),
    Schedule(PtzfError),
}

impl From<OdeError> for PlanError {
    fn from(e: OdeError) -> Self {
        PlanError::Ode(e)
    }
}

impl From<GuidanceError> for PlanError {
    fn from(e: GuidanceError) -> Self {
        PlanError::Guidance(e)
    }
}

impl From<PtzfError> for PlanError {
    fn from(e: PtzfError) -> Self {
        PlanError::Schedule(e)
    }
}

impl core::fmt::Display for PlanError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PlanError::Ode(e) => write!(f, "{e}"),
            PlanError::Guidance(e) => write!(f, "{e}"),
            PlanError::Schedule(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for PlanError {}

/// Sizing inputs for schedule start values that guarantee an exactly silent
/// guidance QP on the free-generation window [0, c_r·t_pre]. `c_pt` becomes
/// the class-K gain applied by the sampler (overriding `c_gain`), `c_g` is
/// the schedule decay rate (must stay below `c_pt`), and `v_bar` bounds the
/// prior flow speed over the window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FloorSpec {
    pub c_pt: f64,
    pub c_g: f64,
    pub v_bar: f64,
    pub lipschitz_eq: f64,
    pub lipschitz_ineq: f64,
}

/// Knobs shared by every planning mode.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Prescribed time at which every schedule reaches exactly zero.
    pub t_pre: f64,
    /// Fraction of t_pre during which schedules hold their start value.
    pub c_r: f64,
    /// Schedule decay rate (linear rate map).
    pub c_gamma: f64,
    /// Class-K gain multiplying the blow-up factor.
    pub c_gain: f64,
    /// Blow-up clamp; `None` picks √(c_gain·dt) so the discrete certificate
    /// update stays a contraction on the Euler grid.
    pub clamp_eps: Option<f64>,
    /// Schedule start value multiplier: over the initial residuals, or over
    /// the computed floor when `floor` is set.
    pub margin: f64,
    /// When set, schedule start values are sized by the free-generation
    /// floor instead of the initial residuals.
    pub floor: Option<FloorSpec>,
    /// Uniform guidance penalty diagonal.
    pub p_u: f64,
    /// Explicit penalty diagonal overriding `p_u` (length = flow dim).
    pub p_u_diag: Option<Vec<f64>>,
    /// State-block penalty multiplier for the split-flow mode.
    pub p_state_ratio: f64,
    /// Slack penalty, one shared weight for all rows.
    pub p_delta: f64,
    pub tol_eq: f64,
    pub tol_ineq: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_STEPS,
            t_pre: 1.0,
            c_r: 0.3,
            c_gamma: 1.0,
            c_gain: 2.0,
            clamp_eps: None,
            margin: 2.0,
            floor: None,
            p_u: 1.0,
            p_u_diag: None,
            p_state_ratio: 10.0,
            p_delta: 1e3,
            tol_eq: 1e-4,
            tol_ineq: 1e-4,
        }
    }
}

impl SamplerConfig {
    pub fn dt(&self) -> f64 {
        (1.0 - EPS_T) / self.steps as f64
    }

    /// Class-K gain coefficient actually applied: `c_gain`, or the floor
    /// spec's `c_pt` when floor sizing is active (its budget formulas assume
    /// that gain).
    pub fn effective_c_gain(&self) -> f64 {
        self.floor.map_or(self.c_gain, |f| f.c_pt)
    }

    /// Effective blow-up clamp: explicit value, or the stability-scaled
    /// default keeping gain·φ_max·dt ≈ 1.
    pub fn resolved_clamp(&self) -> f64 {
        self.clamp_eps
            .unwrap_or_else(|| fmath::sqrt(self.effective_c_gain() * self.dt()).max(EPS_T))
    }

    fn gain(&self) -> ClassKGain {
        ClassKGain::new(self.effective_c_gain(), self.resolved_clamp())
    }

    fn p_u_vec(&self, dim: usize) -> Vec<f64> {
        match &self.p_u_diag {
            Some(d) => {
                assert_eq!(d.len(), dim, "penalty diagonal length mismatch");
                d.clone()
            }
            None => vec![self.p_u; dim],
        }
    }

    fn schedule_for(&self, residual: f64, kind: ScheduleKind) -> Result<ZeroingSchedule, PlanError> {
        match &self.floor {
            None => match kind {
                ScheduleKind::Equality => Ok(make_equality_schedule_with(
                    residual,
                    self.margin,
                    self.c_gamma,
                    self.c_r,
                    self.t_pre,
                )?),
                ScheduleKind::Inequality => Ok(make_inequality_schedule_with(
                    residual,
                    self.margin,
                    self.c_gamma,
                    self.c_r,
                    self.t_pre,
                )),
            },
            Some(fs) => {
                let budget = FreeGenerationBudget::new(fs.c_pt, fs.c_g, self.c_r, fs.v_bar)?;
                let (lip, res) = match kind {
                    ScheduleKind::Equality => (fs.lipschitz_eq, residual),
                    ScheduleKind::Inequality => (fs.lipschitz_ineq, residual.abs()),
                };
                // `margin` scales the computed floor (1.0 = exactly at it).
                let r0 = self.margin * free_generation_floor(&budget, res, lip, kind)?;
                Ok(ZeroingSchedule::closed_form_linear(r0, fs.c_g, self.c_r, self.t_pre))
            }
        }
    }
}

/// Velocity over flow coordinates.
pub type VelocityFn<'a> = dyn Fn(f64, &[f64], &mut [f64]) -> Result<(), FieldError> + 'a;

/// Constraints expressed over flow coordinates: an aggregated equality
/// (value, gradient) and a fixed-length list of inequality rows
/// (residual, gradient). Row count and order must not change between calls.
pub struct ConstraintSet<'a> {
    pub equality: Option<Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a>>,
    pub barriers: Option<Box<dyn Fn(&[f64]) -> Vec<(f64, SparseRow)> + 'a>>,
}

impl ConstraintSet<'_> {
    pub fn empty() -> Self {
        ConstraintSet { equality: None, barriers: None }
    }
}

/// Per-step guidance record: time, correction norm, worst row activation,
/// worst slack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDiag {
    pub t: f64,
    pub u_norm: f64,
    pub rho_max: f64,
    pub delta_max: f64,
}

/// Result of one guided integration in flow coordinates.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub flow: Vec<f64>,
    pub trace: Trace,
    /// Final residuals within the configured tolerances.
    pub certified: bool,
    pub initial_equality: f64,
    pub initial_max_barrier: Option<f64>,
    pub final_equality: f64,
    pub final_max_barrier: Option<f64>,
    pub diagnostics: Vec<StepDiag>,
}

/// ∫‖u_t‖² dt on the integration grid (snap segment included).
pub fn guidance_energy(steps: usize, diags: &[StepDiag]) -> f64 {
    assert_eq!(diags.len(), steps + 1, "one record per Euler step plus the snap");
    let dt = (1.0 - EPS_T) / steps as f64;
    let mut e = 0.0;
    for (i, d) in diags.iter().enumerate() {
        let w = if i < steps { dt } else { EPS_T };
        e += w * d.u_norm * d.u_norm;
    }
    e
}

/// Integrate the guided flow ẋ = v + u from `x0`. Schedules are pinned to
/// the initial residuals; η and ρ are re-evaluated at every Euler step.
pub fn guided_sample(
    dim: usize,
    velocity: &VelocityFn<'_>,
    cons: &ConstraintSet<'_>,
    cfg: &SamplerConfig,
    x0: &[f64],
) -> Result<SampleOutcome, PlanError> {
    assert_eq!(x0.len(), dim);
    let g0 = cons.equality.as_ref().map_or(0.0, |f| f(x0).0);
    let h0: Vec<f64> = cons
        .barriers
        .as_ref()
        .map_or_else(Vec::new, |f| f(x0).into_iter().map(|(h, _)| h).collect());

    let eq_schedule = cfg.schedule_for(g0, ScheduleKind::Equality)?;
    let ineq_schedules: Vec<ZeroingSchedule> = h0
        .iter()
        .map(|&h| cfg.schedule_for(h, ScheduleKind::Inequality))
        .collect::<Result<_, _>>()?;

    let gain = cfg.gain();
    let p_u = cfg.p_u_vec(dim);
    let n_rows = h0.len();

    let mut diags: Vec<StepDiag> = Vec::with_capacity(cfg.steps + 1);
    let mut failure: Option<GuidanceError> = None;
    let mut vbuf = vec![0.0; dim];
    let mut hook = |t: f64, x: &[f64], u_out: &mut [f64]| {
        if failure.is_some() {
            return;
        }
        if velocity(t, x, &mut vbuf).is_err() {
            // The integrator evaluates the same point first, so this branch
            // is unreachable; the main loop reports the field error.
            return;
        }
        let (g, g_grad) = match &cons.equality {
            Some(f) => f(x),
            None => (0.0, Vec::new()),
        };
        let (rv, rd) = eq_schedule.eval(t);
        let eq_row = RowSpec {
            eta: SparseRow::dense(0, g_grad),
            residual: g,
            schedule_value: rv,
            schedule_deriv: rd,
        };
        let mut ineq_rows = Vec::with_capacity(n_rows);
        if let Some(f) = &cons.barriers {
            let rows = f(x);
            debug_assert_eq!(rows.len(), n_rows, "barrier row count must be static");
            for ((h, eta), sched) in rows.into_iter().zip(&ineq_schedules) {
                let (rv, rd) = sched.eval(t);
                ineq_rows.push(RowSpec {
                    eta,
                    residual: h,
                    schedule_value: rv,
                    schedule_deriv: rd,
                });
            }
        }
        match assemble(t, &vbuf, &gain, &eq_row, &ineq_rows, p_u.clone(), cfg.p_delta)
            .and_then(|prob| solve(&prob).map(|sol| (prob, sol)))
        {
            Ok((prob, sol)) => {
                u_out.copy_from_slice(&sol.u);
                let rho_max = prob.rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let delta_max = sol.delta.iter().cloned().fold(0.0, f64::max);
                diags.push(StepDiag { t, u_norm: norm2(&sol.u), rho_max, delta_max });
            }
            Err(e) => failure = Some(e),
        }
    };

    let trace = ode::integrate_with(
        dim,
        &mut |t, x: &[f64], out: &mut [f64]| velocity(t, x, out),
        &mut hook,
        x0,
        cfg.steps,
    )?;
    if let Some(e) = failure {
        return Err(PlanError::Guidance(e));
    }

    let flow = trace.final_x().to_vec();
    let final_equality = cons.equality.as_ref().map_or(0.0, |f| f(&flow).0);
    let final_max_barrier = cons.barriers.as_ref().map(|f| {
        f(&flow).into_iter().map(|(h, _)| h).fold(f64::NEG_INFINITY, f64::max)
    });
    let certified = final_equality <= cfg.tol_eq
        && final_max_barrier.is_none_or(|h| h <= cfg.tol_ineq);
    Ok(SampleOutcome {
        flow,
        trace,
        certified,
        initial_equality: g0,
        initial_max_barrier: if h0.is_empty() {
            None
        } else {
            Some(h0.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        },
        final_equality,
        final_max_barrier,
        diagnostics: diags,
    })
}

/// A finished plan: the decoded trajectory plus the raw flow outcome.
#[derive(Clone, Debug)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub outcome: SampleOutcome,
}

fn scene_equality<'a>(
    scene: &'a Scene,
    layout: TrajLayout,
) -> Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a> {
    Box::new(move |x: &[f64]| {
        let t = Trajectory::from_data(layout, x.to_vec());
        let mut parts = Vec::with_capacity(layout.h + 1);
        for k in 0..layout.h {
            parts.push(dyn_consistency(&t, &scene.model, k));
        }
        parts.push(initial_alignment(&t, &scene.s_cur));
        let agg = aggregate_equality(layout.dim(), &parts);
        (agg.value, agg.gradient)
    })
}

fn scene_barriers<'a>(
    scene: &'a Scene,
    layout: TrajLayout,
) -> Option<Box<dyn Fn(&[f64]) -> Vec<(f64, SparseRow)> + 'a>> {
    if scene.obstacles.is_none() && scene.action_bounds.is_none() {
        return None;
    }
    Some(Box::new(move |x: &[f64]| {
        let t = Trajectory::from_data(layout, x.to_vec());
        let mut rows = Vec::new();
        if let Some(obs) = &scene.obstacles {
            for k in 0..=layout.h {
                let b = state_barrier(&t, obs, k);
                rows.push((b.residual, b.gradient));
            }
        }
        if let Some(bounds) = &scene.action_bounds {
            for k in 0..layout.h {
                for b in action_barrier(&t, bounds, k) {
                    rows.push((b.residual, b.gradient));
                }
            }
        }
        rows
    }))
}

/// Full-trajectory planning: the flow lives directly on the interleaved
/// trajectory vector; dynamics consistency and initial alignment form the
/// equality aggregate, obstacle and bound rows the inequalities.
pub fn plan_trajectory<R: Rng + ?Sized>(
    scene: &Scene,
    field: &VelocityField,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PlanResult, PlanError> {
    let layout = scene.layout();
    assert_eq!(field.dim(), layout.dim(), "field must cover the trajectory vector");
    let x0 = ode::sample_prior(rng, layout.dim());
    let cons = ConstraintSet {
        equality: Some(scene_equality(scene, layout)),
        barriers: scene_barriers(scene, layout),
    };
    let velocity = |t: f64, x: &[f64], out: &mut [f64]| field.velocity(t, x, out);
    let outcome = guided_sample(layout.dim(), &velocity, &cons, cfg, &x0)?;
    let trajectory = Trajectory::from_data(layout, outcome.flow.clone());
    Ok(PlanResult { trajectory, outcome })
}

/// Flat index map from the interleaved trajectory layout to the split
/// [states | actions] flow layout.
pub fn split_index_map(layout: TrajLayout) -> Vec<usize> {
    let (ds, da, h) = (layout.d_s, layout.d_a, layout.h);
    let n_s = (h + 1) * ds;
    let mut map = vec![0usize; layout.dim()];
    for k in 0..=h {
        for j in 0..ds {
            map[layout.state_range(k).start + j] = k * ds + j;
        }
    }
    for k in 0..h {
        for j in 0..da {
            map[layout.action_range(k).start + j] = n_s + k * da + j;
        }
    }
    map
}

/// Re-index a sparse row through a coordinate permutation, coalescing the
/// images back into sorted dense segments.
pub fn remap_row(row: &SparseRow, map: &[usize]) -> SparseRow {
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for (off, coeffs) in &row.segments {
        for (i, &c) in coeffs.iter().enumerate() {
            pairs.push((map[off + i], c));
        }
    }
    pairs.sort_by_key(|p| p.0);
    let mut segments: Vec<(usize, Vec<f64>)> = Vec::new();
    for (idx, c) in pairs {
        match segments.last_mut() {
            Some((off, seg)) if *off + seg.len() == idx => seg.push(c),
            _ => segments.push((idx, vec![c])),
        }
    }
    SparseRow { segments }
}

fn remap_dense(grad: &[f64], map: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; grad.len()];
    for (i, &g) in grad.iter().enumerate() {
        out[map[i]] = g;
    }
    out
}

/// Split-flow planning: the prior field drives only the state block while
/// virtual actions evolve purely under guidance. The state block carries a
/// heavier correction penalty so constraint repair routes through actions.
pub fn plan_path<R: Rng + ?Sized>(
    scene: &Scene,
    field_s: &VelocityField,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PlanResult, PlanError> {
    let layout = scene.layout();
    let (ds, da, h) = (layout.d_s, layout.d_a, layout.h);
    let n_s = (h + 1) * ds;
    let n_a = h * da;
    let dim = n_s + n_a;
    assert_eq!(field_s.dim(), n_s, "field must cover the state block");

    let mut x0 = ode::sample_prior(rng, n_s);
    let bounds = scene.action_bounds.clone().unwrap_or_else(|| vec![1.0; da]);
    for _ in 0..h {
        for &b in bounds.iter() {
            let z: f64 = rng.sample(StandardNormal);
            x0.push(0.1 * b * z);
        }
    }

    let map = split_index_map(layout);
    let decode = move |x: &[f64]| Trajectory::from_parts(layout, &x[..n_s], &x[n_s..]);

    let map_eq = map.clone();
    let scene_eq = scene_equality(scene, layout);
    let equality = Box::new(move |x: &[f64]| {
        let t = decode(x);
        let (g, grad) = scene_eq(&t.data);
        (g, remap_dense(&grad, &map_eq))
    });
    let barriers = scene_barriers(scene, layout).map(|inner| {
        let map_b = map.clone();
        Box::new(move |x: &[f64]| {
            let t = decode(x);
            inner(&t.data)
                .into_iter()
                .map(|(hv, row)| (hv, remap_row(&row, &map_b)))
                .collect::<Vec<_>>()
        }) as Box<dyn Fn(&[f64]) -> Vec<(f64, SparseRow)>>
    });
    let cons = ConstraintSet { equality: Some(equality), barriers };

    let mut cfg = cfg.clone();
    if cfg.p_u_diag.is_none() {
        let mut diag = vec![cfg.p_u * cfg.p_state_ratio; n_s];
        diag.extend(core::iter::repeat_n(cfg.p_u, n_a));
        cfg.p_u_diag = Some(diag);
    }

    let velocity = move |t: f64, x: &[f64], out: &mut [f64]| {
        field_s.velocity(t, &x[..n_s], &mut out[..n_s])?;
        out[n_s..].fill(0.0);
        Ok(())
    };
    let outcome = guided_sample(dim, &velocity, &cons, &cfg, &x0)?;
    let trajectory =
        Trajectory::from_parts(layout, &outcome.flow[..n_s], &outcome.flow[n_s..]);
    Ok(PlanResult { trajectory, outcome })
}

/// Per-step rollout Jacobians A_k = ∂f/∂s, B_k = ∂f/∂a along a
/// reconstruction, applied as a linear operator between the compact
/// (s⁰, a⁰…a^{H−1}) coordinates and the full trajectory tangent space.
#[derive(Clone, Debug)]
pub struct RecursiveJacobian {
    pub d_s: usize,
    pub d_a: usize,
    /// (A_k, B_k) for k = 0..H−1.
    pub steps: Vec<(Mat, Mat)>,
}

impl RecursiveJacobian {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    fn dim_c(&self) -> usize {
        self.d_s + self.horizon() * self.d_a
    }

    /// ∂s^k/∂s⁰ = A_{k−1}···A_0, identity at k = 0.
    pub fn j_s0(&self, k: usize) -> Mat {
        assert!(k <= self.horizon());
        let mut m = Mat::eye(self.d_s);
        for (a, _) in self.steps.iter().take(k) {
            m = a.matmul(&m);
        }
        m
    }

    /// ∂s^k/∂a^p = A_{k−1}···A_{p+1}·B_p for p < k.
    pub fn j_ap(&self, k: usize, p: usize) -> Mat {
        assert!(p < k && k <= self.horizon());
        let mut m = self.steps[p].1.clone();
        for (a, _) in self.steps.iter().take(k).skip(p + 1) {
            m = a.matmul(&m);
        }
        m
    }

    /// Forward map: a compact-coordinate tangent w to the full interleaved
    /// trajectory tangent of the reconstruction.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let (ds, da, h) = (self.d_s, self.d_a, self.horizon());
        assert_eq!(w.len(), self.dim_c());
        let layout = TrajLayout::new(h, ds, da);
        let mut out = vec![0.0; layout.dim()];
        let mut cur = w[..ds].to_vec();
        out[layout.state_range(0)].copy_from_slice(&cur);
        let mut next = vec![0.0; ds];
        let mut ba = vec![0.0; ds];
        for k in 0..h {
            let wa = &w[ds + k * da..ds + (k + 1) * da];
            out[layout.action_range(k)].copy_from_slice(wa);
            self.steps[k].0.matvec(&cur, &mut next);
            self.steps[k].1.matvec(wa, &mut ba);
            for j in 0..ds {
                next[j] += ba[j];
            }
            core::mem::swap(&mut cur, &mut next);
            out[layout.state_range(k + 1)].copy_from_slice(&cur);
        }
        out
    }

    /// Adjoint map: accumulate Jᵀy for a full-trajectory cotangent y into
    /// compact coordinates, via one backward sweep (no block is densified).
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let (ds, da, h) = (self.d_s, self.d_a, self.horizon());
        let layout = TrajLayout::new(h, ds, da);
        assert_eq!(y.len(), layout.dim());
        let mut out = vec![0.0; self.dim_c()];
        let mut lambda = y[layout.state_range(h)].to_vec();
        let mut tmp_a = vec![0.0; da];
        let mut tmp_s = vec![0.0; ds];
        for k in (0..h).rev() {
            let (a, b) = &self.steps[k];
            b.matvec_t(&lambda, &mut tmp_a);
            for j in 0..da {
                out[ds + k * da + j] = y[layout.action_range(k).start + j] + tmp_a[j];
            }
            a.matvec_t(&lambda, &mut tmp_s);
            for j in 0..ds {
                lambda[j] = y[layout.state_range(k).start + j] + tmp_s[j];
            }
        }
        out[..ds].copy_from_slice(&lambda);
        out
    }
}

/// Linearize the rollout reconstruction at (s⁰, actions): per-step exact
/// discrete Jacobians along the reconstructed states.
pub fn gpc_jacobian(model: &Model, s0: &[f64], actions: &[f64]) -> RecursiveJacobian {
    let (ds, da) = (model.d_s(), model.d_a());
    assert_eq!(s0.len(), ds);
    assert_eq!(actions.len() % da, 0);
    let h = actions.len() / da;
    let states = model.rollout(s0, actions);
    let mut steps = Vec::with_capacity(h);
    for k in 0..h {
        let s = &states[k * ds..(k + 1) * ds];
        let a = &actions[k * da..(k + 1) * da];
        steps.push(model.jacobians(s, a));
    }
    RecursiveJacobian { d_s: ds, d_a: da, steps }
}

/// Predictive-control planning: the flow lives on (s⁰, a⁰…a^{H−1}); states
/// are reconstructed by rollout, so dynamics consistency holds identically
/// and the equality aggregate reduces to initial alignment. Barrier
/// gradients are pulled back through the recursive Jacobian.
pub fn plan_gpc<R: Rng + ?Sized>(
    scene: &Scene,
    field_c: &VelocityField,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PlanResult, PlanError> {
    let layout = scene.layout();
    let (ds, da, h) = (layout.d_s, layout.d_a, layout.h);
    let dim_c = ds + h * da;
    assert_eq!(field_c.dim(), dim_c, "field must cover (s⁰, actions)");

    let x0 = ode::sample_prior(rng, dim_c);
    let s_cur = scene.s_cur.clone();
    let equality = Box::new(move |x: &[f64]| {
        let mut g = 0.0;
        let mut grad = vec![0.0; x.len()];
        for i in 0..s_cur.len() {
            let r = x[i] - s_cur[i];
            g += r * r;
            grad[i] = 2.0 * r;
        }
        (g, grad)
    });

    let model = &scene.model;
    let barriers = if scene.obstacles.is_some() || scene.action_bounds.is_some() {
        Some(Box::new(move |x: &[f64]| {
            let states = model.rollout(&x[..ds], &x[ds..]);
            let t = Trajectory::from_parts(layout, &states, &x[ds..]);
            let mut rows = Vec::new();
            if let Some(obs) = &scene.obstacles {
                let jac = gpc_jacobian(model, &x[..ds], &x[ds..]);
                let mut y = vec![0.0; layout.dim()];
                for k in 0..=h {
                    let b = state_barrier(&t, obs, k);
                    y.fill(0.0);
                    b.gradient.add_scaled_into(1.0, &mut y);
                    rows.push((b.residual, SparseRow::dense(0, jac.apply_transpose(&y))));
                }
            }
            if let Some(bounds) = &scene.action_bounds {
                for k in 0..h {
                    let a = t.action(k);
                    for (i, &bnd) in bounds.iter().enumerate() {
                        rows.push((
                            a[i] * a[i] - bnd * bnd,
                            SparseRow::dense(ds + k * da + i, vec![2.0 * a[i]]),
                        ));
                    }
                }
            }
            rows
        }) as Box<dyn Fn(&[f64]) -> Vec<(f64, SparseRow)>>)
    } else {
        None
    };
    let cons = ConstraintSet { equality: Some(equality), barriers };

    let velocity = |t: f64, x: &[f64], out: &mut [f64]| field_c.velocity(t, x, out);
    let outcome = guided_sample(dim_c, &velocity, &cons, cfg, &x0)?;
    let states = scene.model.rollout(&outcome.flow[..ds], &outcome.flow[ds..]);
    let trajectory = Trajectory::from_parts(layout, &states, &outcome.flow[ds..]);
    Ok(PlanResult { trajectory, outcome })
}
