//! Benchmark scoring and plumbing: kinodynamic-consistency metrics, success
//! rates, scene costs, dataset synthesis through a receding-horizon
//! cross-entropy controller, and the sample → guide → repair pipeline that
//! the benchmark front end times and aggregates.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::Model;
use crate::field::{FieldError, VelocityField};
use crate::fmath;
use crate::planner::{plan_trajectory, PlanError, SampleOutcome, SamplerConfig};
use crate::refine::{
    cem_minimize, extract_windows, refine_frozen, refine_violation, CemConfig, RefineConfig,
    RefineError, WindowPlan,
};
use crate::scene::{CostSpec, Scene};
use crate::traj::Trajectory;

/// Penetration up to this depth still counts as safe when scoring, so
/// boundary-exact repairs do not flip a success rate on rounding noise.
pub const SAFE_TOL: f64 = 1e-9;

/// Aggregate scorecard of a trajectory batch on one scene. Rates are
/// percentages in [0, 100]; the total rate can never exceed any component
/// rate because it counts trajectories passing every check at once.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// % of trajectories whose stored states stay safe.
    pub sr_s: f64,
    /// % whose re-rolled states (stored actions through the dynamics) stay safe.
    pub sr_a: f64,
    /// % whose actions respect the scene bounds.
    pub ar: f64,
    /// % satisfying all of the above simultaneously.
    pub tsr: f64,
    /// Mean forward-consistency RMSE over the batch.
    pub kc_f: f64,
    /// Mean inverse-consistency RMSE over the batch (excluded steps skipped).
    pub kc_i: f64,
    /// Mean scene cost.
    pub cost: f64,
    /// Wall clock per trajectory in milliseconds; timing callers fill it in,
    /// otherwise 0.
    pub time_ms: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Forward-consistency RMSE: sqrt(mean_k ‖s^{k+1} − f(s^k, a^k)‖²) using the
/// model's exact step map. Zero (bit-exact) on rollout-built trajectories.
pub fn kc_forward(traj: &Trajectory, model: &Model) -> f64 {
    let l = traj.layout;
    let mut next = vec![0.0; l.d_s];
    let mut acc = 0.0;
    for k in 0..l.h {
        model.discretize(traj.state(k), traj.action(k), &mut next);
        acc += sq_dist(&next, traj.state(k + 1));
    }
    fmath::sqrt(acc / l.h as f64)
}

/// Inverse-consistency result: RMSE between stored actions and the actions
/// reconstructed from consecutive state pairs, plus the number of steps the
/// reconstruction had to skip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KcInverse {
    pub rmse: f64,
    /// Steps where the root solve failed to converge or the recovered action
    /// left the model's invertible domain. Excluded from the RMSE, never
    /// clipped into range.
    pub excluded: usize,
}

/// Largest recovered-action magnitude per component that still counts as an
/// inverse-dynamics solution. The kinematic car steers through tan(δ), so a
/// recovered steering angle outside ±1 rad is reported as excluded.
fn action_in_domain(model: &Model, a: &[f64]) -> bool {
    match model {
        Model::Car(_) => a[0].abs() <= 1.0,
        _ => true,
    }
}

/// Solve f(s, a) = s_next for the action by a damped Gauss–Newton iteration
/// on the step map, starting from a = 0 so the result is independent of the
/// stored action. Returns None when the residual does not converge.
fn invert_step(model: &Model, s: &[f64], s_next: &[f64]) -> Option<Vec<f64>> {
    let (d_s, d_a) = (model.d_s(), model.d_a());
    let mut a = vec![0.0; d_a];
    let mut f = vec![0.0; d_s];
    for _ in 0..60 {
        model.discretize(s, &a, &mut f);
        let mut r2 = 0.0;
        for i in 0..d_s {
            let r = f[i] - s_next[i];
            r2 += r * r;
        }
        if r2 <= 1e-22 {
            return Some(a);
        }
        let (_, ja) = model.jacobians(s, &a);
        // Normal equations JᵀJ Δ = −Jᵀr with a floor on the diagonal; the
        // systems are at most a few actions wide.
        let mut jtj = DMatrix::<f64>::zeros(d_a, d_a);
        let mut jtr = DVector::<f64>::zeros(d_a);
        for i in 0..d_s {
            let r = f[i] - s_next[i];
            for c in 0..d_a {
                jtr[c] += ja.at(i, c) * r;
                for c2 in 0..d_a {
                    jtj[(c, c2)] += ja.at(i, c) * ja.at(i, c2);
                }
            }
        }
        for c in 0..d_a {
            jtj[(c, c)] += 1e-12 * (1.0 + jtj[(c, c)]);
        }
        let step = Cholesky::new(jtj)?.solve(&jtr);
        for c in 0..d_a {
            a[c] -= step[c];
        }
        if !a.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    None
}

/// Inverse-consistency RMSE: reconstruct each step's action from the state
/// pair by a bounded root solve and compare against the stored actions.
pub fn kc_inverse(traj: &Trajectory, model: &Model) -> KcInverse {
    let l = traj.layout;
    let mut acc = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for k in 0..l.h {
        match invert_step(model, traj.state(k), traj.state(k + 1)) {
            Some(a) if action_in_domain(model, &a) => {
                acc += sq_dist(&a, traj.action(k));
                counted += 1;
            }
            _ => excluded += 1,
        }
    }
    let rmse = if counted == 0 { 0.0 } else { fmath::sqrt(acc / counted as f64) };
    KcInverse { rmse, excluded }
}

/// Rebuild the state sequence by rolling the stored actions from the stored
/// initial state through the dynamics.
pub fn reroll(traj: &Trajectory, model: &Model) -> Trajectory {
    let actions = traj.actions_flat();
    let states = model.rollout(traj.state(0), &actions);
    Trajectory::from_parts(traj.layout, &states, &actions)
}

/// Every state clears the scene obstacles (within [`SAFE_TOL`]).
pub fn states_safe(traj: &Trajectory, scene: &Scene) -> bool {
    (0..=traj.layout.h).all(|k| scene.state_clearance(traj.state(k)) >= -SAFE_TOL)
}

/// Every action component respects the scene's symmetric bounds.
pub fn actions_within_bounds(traj: &Trajectory, scene: &Scene) -> bool {
    let bounds = match &scene.action_bounds {
        Some(b) => b,
        None => return true,
    };
    (0..traj.layout.h).all(|k| {
        traj.action(k).iter().zip(bounds).all(|(a, &b)| a.abs() <= b + SAFE_TOL)
    })
}

/// Signed offset from the corridor midline (0 when no corridor): half the
/// difference of the two boundary clearances.
fn center_offset(scene: &Scene, s: &[f64]) -> f64 {
    let obs = match &scene.obstacles {
        Some(o) => o,
        None => return 0.0,
    };
    let c = match &obs.corridor {
        Some(c) => c,
        None => return 0.0,
    };
    let (p, _) = obs.safety.point(s);
    0.5 * (c.left.signed_distance(p).0 - c.right.signed_distance(p).0)
}

/// Scene cost of one trajectory under the scene's declared weights.
pub fn trajectory_cost(traj: &Trajectory, scene: &Scene) -> f64 {
    let l = traj.layout;
    match &scene.cost {
        CostSpec::QuadraticGoal { q, r } => {
            let goal = scene.goal.clone().unwrap_or_else(|| vec![0.0; l.d_s]);
            let mut c = 0.0;
            for k in 0..=l.h {
                for (i, &w) in q.iter().enumerate() {
                    let d = traj.state(k)[i] - goal[i];
                    c += w * d * d;
                }
            }
            for k in 0..l.h {
                for (i, &w) in r.iter().enumerate() {
                    c += w * traj.action(k)[i] * traj.action(k)[i];
                }
            }
            c
        }
        CostSpec::PathFollowing { w_ctrl, w_smooth, w_speed, v_ref, w_center } => {
            let mut c = 0.0;
            for k in 0..l.h {
                let a = traj.action(k);
                c += w_ctrl * a.iter().map(|v| v * v).sum::<f64>();
                if k > 0 {
                    c += w_smooth * sq_dist(a, traj.action(k - 1));
                }
            }
            for k in 0..=l.h {
                let s = traj.state(k);
                // Kinematic-car state convention: v is the last coordinate.
                let dv = s[l.d_s - 1] - v_ref;
                c += w_speed * dv * dv;
                let off = center_offset(scene, s);
                c += w_center * off * off;
            }
            c
        }
    }
}

/// Score a batch: safety on stored states, safety after re-rolling stored
/// actions, action-bound satisfaction, their conjunction, consistency
/// errors, and mean cost.
pub fn score(trajs: &[Trajectory], scene: &Scene) -> MetricsReport {
    assert!(!trajs.is_empty(), "cannot score an empty batch");
    let n = trajs.len() as f64;
    let model = &scene.model;
    let (mut n_ss, mut n_sa, mut n_ar, mut n_all) = (0u32, 0u32, 0u32, 0u32);
    let (mut kc_f, mut kc_i, mut cost) = (0.0, 0.0, 0.0);
    for t in trajs {
        let ss = states_safe(t, scene);
        let sa = states_safe(&reroll(t, model), scene);
        let ar = actions_within_bounds(t, scene);
        n_ss += ss as u32;
        n_sa += sa as u32;
        n_ar += ar as u32;
        n_all += (ss && sa && ar) as u32;
        kc_f += kc_forward(t, model);
        kc_i += kc_inverse(t, model).rmse;
        cost += trajectory_cost(t, scene);
    }
    let pct = |c: u32| 100.0 * c as f64 / n;
    MetricsReport {
        sr_s: pct(n_ss),
        sr_a: pct(n_sa),
        ar: pct(n_ar),
        tsr: pct(n_all),
        kc_f: kc_f / n,
        kc_i: kc_i / n,
        cost: cost / n,
        time_ms: 0.0,
    }
}

fn salted(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Receding-horizon expert settings used for dataset synthesis.
#[derive(Clone, Debug)]
pub struct MpcOptions {
    /// Optimization lookahead per control step.
    pub lookahead: usize,
    /// Accept a rollout only when its terminal state lands within this
    /// distance of the scene goal (ignored for goal-free scenes).
    pub goal_tol: f64,
    /// Weight of the squared clearance-deficit penalty.
    pub w_safe: f64,
    /// Required clearance inside the expert's own objective.
    pub safety_margin: f64,
    /// Extra weight on the lookahead's terminal state cost.
    pub terminal_factor: f64,
    /// Inner optimizer settings (seed is re-salted per attempt and step).
    pub cem: CemConfig,
    /// Attempt budget as a multiple of the requested count.
    pub attempt_factor: usize,
}

impl Default for MpcOptions {
    fn default() -> Self {
        MpcOptions {
            lookahead: 8,
            goal_tol: 0.6,
            w_safe: 60.0,
            safety_margin: 0.05,
            terminal_factor: 5.0,
            cem: CemConfig { population: 32, elite_frac: 0.25, iters: 16, init_std: 1.0, ..CemConfig::default() },
            attempt_factor: 10,
        }
    }
}

/// Per-scene expert tuning: stabilization scenes search a wider action range
/// than corridor-driving ones.
pub fn expert_options(scene: &Scene) -> MpcOptions {
    match scene.cost {
        CostSpec::QuadraticGoal { .. } => {
            MpcOptions { cem: CemConfig { init_std: 2.0, ..MpcOptions::default().cem }, ..MpcOptions::default() }
        }
        CostSpec::PathFollowing { .. } => MpcOptions {
            lookahead: 10,
            cem: CemConfig { init_std: 0.4, ..MpcOptions::default().cem },
            ..MpcOptions::default()
        },
    }
}

/// Box the expert samples actions in: the scene bounds intersected with the
/// model's physically meaningful range (the car steers within ±1 rad and
/// accelerates within ±35, whatever its barrier rows say).
fn expert_bounds(scene: &Scene) -> Option<Vec<f64>> {
    let physical: Option<Vec<f64>> = match &scene.model {
        Model::Car(_) => Some(vec![1.0, 35.0]),
        _ => None,
    };
    match (&scene.action_bounds, physical) {
        (Some(b), Some(p)) => Some(b.iter().zip(&p).map(|(x, y)| x.min(*y)).collect()),
        (Some(b), None) => Some(b.clone()),
        (None, p) => p,
    }
}

fn clamp_to(actions: &mut [f64], bounds: Option<&[f64]>, d_a: usize) {
    if let Some(b) = bounds {
        for (i, a) in actions.iter_mut().enumerate() {
            let lim = b[i % d_a];
            *a = a.clamp(-lim, lim);
        }
    }
}

/// Expert stage cost of a lookahead rollout from `s0` under `actions`.
fn expert_cost(scene: &Scene, opts: &MpcOptions, s0: &[f64], actions: &[f64]) -> f64 {
    let model = &scene.model;
    let (d_s, d_a) = (model.d_s(), model.d_a());
    let states = model.rollout(s0, actions);
    let n = actions.len() / d_a;
    let mut c = 0.0;
    for k in 1..=n {
        let s = &states[k * d_s..(k + 1) * d_s];
        let deficit = (opts.safety_margin - scene.state_clearance(s)).max(0.0);
        c += opts.w_safe * deficit * deficit;
        let stage_w = if k == n { opts.terminal_factor } else { 1.0 };
        match &scene.cost {
            CostSpec::QuadraticGoal { q, .. } => {
                let goal = scene.goal.as_deref().expect("goal scene");
                for (i, &w) in q.iter().enumerate() {
                    let d = s[i] - goal[i];
                    c += stage_w * w * d * d;
                }
            }
            CostSpec::PathFollowing { w_speed, v_ref, w_center, .. } => {
                let dv = s[d_s - 1] - v_ref;
                c += stage_w * w_speed * dv * dv;
                let off = center_offset(scene, s);
                c += stage_w * w_center * off * off;
            }
        }
    }
    match &scene.cost {
        CostSpec::QuadraticGoal { r, .. } => {
            for k in 0..n {
                for (i, &w) in r.iter().enumerate() {
                    c += w * actions[k * d_a + i] * actions[k * d_a + i];
                }
            }
        }
        CostSpec::PathFollowing { w_ctrl, w_smooth, .. } => {
            for k in 0..n {
                let a = &actions[k * d_a..(k + 1) * d_a];
                c += w_ctrl * a.iter().map(|v| v * v).sum::<f64>();
                if k > 0 {
                    c += w_smooth * sq_dist(a, &actions[(k - 1) * d_a..k * d_a]);
                }
            }
        }
    }
    c
}

/// One expert rollout attempt: closed-loop receding-horizon control from a
/// randomized initial state. States are written by the exact step map, so
/// the stored trajectory is forward-consistent by construction. Returns None
/// when the rollout misses the safety or goal tolerance.
pub fn synth_trajectory<R: Rng + ?Sized>(
    scene: &Scene,
    opts: &MpcOptions,
    seed: u64,
    rng: &mut R,
) -> Result<Option<Trajectory>, RefineError> {
    let model = &scene.model;
    let l = scene.layout();
    let (d_s, d_a) = (l.d_s, l.d_a);
    let bounds = expert_bounds(scene);
    let mut s = scene.sample_initial_state(rng);
    let mut states = Vec::with_capacity((l.h + 1) * d_s);
    let mut actions = Vec::with_capacity(l.h * d_a);
    states.extend_from_slice(&s);

    let mut plan = vec![0.0; opts.lookahead * d_a];
    for k in 0..l.h {
        let cem = CemConfig {
            seed: salted(seed, ((k as u64) << 8) | 1),
            ..opts.cem.clone()
        };
        let s_now = s.clone();
        let warm = plan.clone();
        let sol = cem_minimize(
            |delta| {
                let mut cand = warm.clone();
                for (a, d) in cand.iter_mut().zip(delta) {
                    *a += d;
                }
                clamp_to(&mut cand, bounds.as_deref(), d_a);
                expert_cost(scene, opts, &s_now, &cand)
            },
            plan.len(),
            &cem,
        )?;
        for (a, d) in plan.iter_mut().zip(&sol.x) {
            *a += d;
        }
        clamp_to(&mut plan, bounds.as_deref(), d_a);

        let a_k = plan[..d_a].to_vec();
        let mut next = vec![0.0; d_s];
        model.discretize(&s, &a_k, &mut next);
        actions.extend_from_slice(&a_k);
        states.extend_from_slice(&next);
        s = next;
        // Shift the plan one step for the next warm start.
        plan.copy_within(d_a.., 0);
        let tail = plan.len() - d_a;
        plan[tail..].fill(0.0);
    }

    let traj = Trajectory::from_parts(l, &states, &actions);
    let safe = states_safe(&traj, scene);
    let reached = match &scene.goal {
        Some(g) => fmath::sqrt(sq_dist(traj.state(l.h), g)) <= opts.goal_tol,
        None => true,
    };
    Ok(if safe && reached { Some(traj) } else { None })
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetError {
    /// The attempt budget ran out before enough rollouts passed the
    /// safety/goal acceptance check.
    DropBudgetExhausted { wanted: usize, got: usize, dropped: usize },
    Optimizer(RefineError),
}

impl core::fmt::Display for DatasetError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DatasetError::DropBudgetExhausted { wanted, got, dropped } => write!(
                f,
                "dataset synthesis exhausted its budget: {got}/{wanted} accepted, {dropped} dropped"
            ),
            DatasetError::Optimizer(e) => write!(f, "dataset expert optimizer failed: {e}"),
        }
    }
}

/// A synthesized dataset plus its drop-rate report.
#[derive(Clone, Debug)]
pub struct DatasetResult {
    pub trajectories: Vec<Trajectory>,
    /// Attempts rejected by the safety/goal acceptance check.
    pub dropped: usize,
}

/// Synthesize `count` expert trajectories; rejected rollouts are dropped and
/// resampled with fresh randomness, deterministically in `seed`.
pub fn synth_dataset(
    scene: &Scene,
    count: usize,
    seed: u64,
    opts: &MpcOptions,
) -> Result<DatasetResult, DatasetError> {
    let budget = count.max(1) * opts.attempt_factor.max(1);
    let mut out = Vec::with_capacity(count);
    let mut dropped = 0usize;
    for attempt in 0..budget {
        if out.len() == count {
            break;
        }
        let attempt_seed = salted(seed, (attempt as u64) << 24);
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        match synth_trajectory(scene, opts, attempt_seed, &mut rng) {
            Ok(Some(t)) => out.push(t),
            Ok(None) => dropped += 1,
            Err(e) => return Err(DatasetError::Optimizer(e)),
        }
    }
    if out.len() < count {
        return Err(DatasetError::DropBudgetExhausted { wanted: count, got: out.len(), dropped });
    }
    Ok(DatasetResult { trajectories: out, dropped })
}

/// Empirical velocity field whose landing points are the dataset
/// trajectories in flat (interleaved) coordinates.
pub fn dataset_field(trajs: &[Trajectory]) -> Result<VelocityField, FieldError> {
    assert!(!trajs.is_empty(), "dataset field needs at least one trajectory");
    let dim = trajs[0].layout.dim();
    let mut points = Vec::with_capacity(trajs.len() * dim);
    for t in trajs {
        assert_eq!(t.layout.dim(), dim, "mixed layouts in dataset");
        points.extend_from_slice(&t.data);
    }
    VelocityField::empirical(points, dim)
}

#[derive(Debug)]
pub enum PipelineError {
    Plan(PlanError),
    Refine(RefineError),
}

impl core::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PipelineError::Plan(e) => write!(f, "planning failed: {e}"),
            PipelineError::Refine(e) => write!(f, "refinement failed: {e}"),
        }
    }
}

/// Everything one benchmark trial produces.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub trajectory: Trajectory,
    /// Horizon partition the repair stage worked on.
    pub windows: WindowPlan,
    /// Guided-sampling record (certificates, per-step diagnostics).
    pub outcome: SampleOutcome,
}

/// One end-to-end trial: guided sampling on the scene, consistency
/// restoration, then barrier repair of any violating windows. The returned
/// trajectory is rollout-consistent by construction.
///
/// Consistency is restored by re-rolling the (bound-clamped) sampled actions
/// through the exact step map: on a violation-free plan the refinement stage
/// is the identity, so re-rolling *is* its result, at none of the cost. Only
/// when the physically realized rollout still violates the barrier do the
/// frozen re-fit and the violation/recovery repair loops run.
pub fn pipeline_trial<R: Rng + ?Sized>(
    scene: &Scene,
    field: &VelocityField,
    sampler: &SamplerConfig,
    repair: &RefineConfig,
    rng: &mut R,
) -> Result<PipelineResult, PipelineError> {
    let planned = plan_trajectory(scene, field, sampler, rng).map_err(PipelineError::Plan)?;
    let mut actions = planned.trajectory.actions_flat();
    if let Some(b) = &scene.action_bounds {
        let d_a = planned.trajectory.layout.d_a;
        for (i, a) in actions.iter_mut().enumerate() {
            let lim = b[i % d_a];
            *a = a.clamp(-lim, lim);
        }
    }
    let states = scene.model.rollout(planned.trajectory.state(0), &actions);
    let traj = Trajectory::from_parts(planned.trajectory.layout, &states, &actions);

    let h: Vec<f64> =
        (0..=traj.layout.h).map(|k| -scene.state_clearance(traj.state(k))).collect();
    let plan = extract_windows(&h, repair.n_pad, repair.n_rec);
    let refined = if plan.has_violations() {
        let staged =
            refine_frozen(&traj, &plan, &scene.model, repair).map_err(PipelineError::Refine)?;
        refine_violation(&staged, &plan, scene, &scene.model, repair)
            .map_err(PipelineError::Refine)?
    } else {
        traj
    };
    Ok(PipelineResult { trajectory: refined, windows: plan, outcome: planned.outcome })
}
