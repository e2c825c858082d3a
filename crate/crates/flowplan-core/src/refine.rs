//! Terminal trajectory refinement.
//!
//! The guided sampler returns a trajectory whose states follow the flow; the
//! refinement stage turns it into one that is exactly rollout-consistent and
//! clear of the scene obstacles. The horizon is partitioned into windows:
//! contiguous runs of barrier violations (padded and merged) become
//! *violation* windows, each followed by a short *recovery* window, and the
//! rest stays *frozen*. Frozen windows are re-fit so their actions reproduce
//! the reference states through the dynamics; violation and recovery windows
//! are repaired by sampling-based optimization (cross-entropy method) with
//! obstacle penalties. Every candidate is evaluated on a rollout through the
//! dynamics, so whatever the optimizer returns is kinematically consistent
//! by construction.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::Model;
use crate::scene::Scene;
use crate::traj::Trajectory;

#[derive(Clone, Debug, PartialEq)]
pub enum RefineError {
    /// Every sample of a cross-entropy iteration evaluated to a non-finite
    /// cost; the landscape gives the optimizer nothing to rank.
    CemDiverged,
    /// A violation window still breaches the barrier after the outer repair
    /// loop hit its iteration cap. `worst` is the deepest remaining
    /// penetration (positive).
    RefinementFailed { window: usize, worst: f64 },
}

impl core::fmt::Display for RefineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RefineError::CemDiverged => write!(f, "cross-entropy search diverged: no finite costs in an iteration"),
            RefineError::RefinementFailed { window, worst } => {
                write!(f, "violation window {window} still penetrates by {worst:.3e} after the repair loop")
            }
        }
    }
}

/// Partition of the step indices 0..=H into violation, recovery, and frozen
/// windows. Windows are contiguous ascending index runs; the three groups
/// together cover every index exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    /// Violation windows in temporal order. Contains every index whose
    /// barrier value was positive, dilated by the padding radius; padded
    /// intervals that intersect are merged.
    pub violation: Vec<Vec<usize>>,
    /// One recovery window per violation window (possibly empty): the steps
    /// immediately after it, truncated at the horizon and at the next
    /// violation window.
    pub recovery: Vec<Vec<usize>>,
    /// The complement, split positionally: entry i sits before violation
    /// window i, the last entry is the suffix. Entries may be empty; with no
    /// violations this is a single window spanning the whole horizon.
    pub frozen: Vec<Vec<usize>>,
}

impl WindowPlan {
    pub fn has_violations(&self) -> bool {
        !self.violation.is_empty()
    }
}

/// Partition 0..=H (H = `h_values.len() - 1`) around the positive entries of
/// `h_values`. Each maximal run of violations is dilated by `n_pad` on both
/// sides (clamped to the horizon), intersecting dilated runs merge, and each
/// resulting window is followed by up to `n_rec` recovery steps.
pub fn extract_windows(h_values: &[f64], n_pad: usize, n_rec: usize) -> WindowPlan {
    assert!(!h_values.is_empty(), "need at least one barrier value");
    let h = h_values.len() - 1;

    // Maximal runs of strictly positive barrier values, as inclusive spans.
    let mut raw: Vec<(usize, usize)> = Vec::new();
    for (k, &v) in h_values.iter().enumerate() {
        if v > 0.0 {
            match raw.last_mut() {
                Some(span) if span.1 + 1 == k => span.1 = k,
                _ => raw.push((k, k)),
            }
        }
    }

    // Dilate and merge intersecting spans.
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (lo, hi) in raw {
        let lo = lo.saturating_sub(n_pad);
        let hi = (hi + n_pad).min(h);
        match spans.last_mut() {
            Some(prev) if lo <= prev.1 => prev.1 = prev.1.max(hi),
            _ => spans.push((lo, hi)),
        }
    }

    let mut violation = Vec::with_capacity(spans.len());
    let mut recovery = Vec::with_capacity(spans.len());
    let mut frozen = Vec::with_capacity(spans.len() + 1);
    let mut cursor = 0usize;
    for (i, &(lo, hi)) in spans.iter().enumerate() {
        frozen.push((cursor..lo).collect());
        // Recovery stops at the horizon and never bleeds into the next
        // violation window.
        let rec_end = match spans.get(i + 1) {
            Some(&(next_lo, _)) => (hi + n_rec).min(h).min(next_lo - 1),
            None => (hi + n_rec).min(h),
        };
        violation.push((lo..=hi).collect());
        recovery.push((hi + 1..=rec_end).collect());
        cursor = rec_end.max(hi) + 1;
    }
    frozen.push((cursor..=h).collect());

    WindowPlan { violation, recovery, frozen }
}

/// Cross-entropy search configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CemConfig {
    /// Samples per iteration; the current mean is always included as one of
    /// them, so the best cost never regresses below the warm start.
    pub population: usize,
    /// Fraction of the population kept for the refit; the resulting elite
    /// count must be at most half the population.
    pub elite_frac: f64,
    pub iters: usize,
    /// Initial per-dimension sampling standard deviation.
    pub init_std: f64,
    /// The refit never shrinks the standard deviation below this.
    pub std_floor: f64,
    pub seed: u64,
}

impl CemConfig {
    fn n_elites(&self) -> usize {
        ((self.population as f64 * self.elite_frac).round() as usize).max(1)
    }
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig { population: 64, elite_frac: 0.125, iters: 100, init_std: 1.0, std_floor: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemSolution {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Iterations actually run (the loop stops early once the best cost
    /// plateaus).
    pub iters: usize,
}

/// Minimize a black-box cost over R^dims by the cross-entropy method:
/// sample a diagonal Gaussian, refit mean and spread to the lowest-cost
/// elites, repeat. Returns the best sample ever evaluated. Deterministic
/// for a fixed seed; non-finite costs are skipped in the ranking, and an
/// iteration with no finite cost at all aborts the search.
///
/// Two escapes keep the refit useful on hard landscapes: when the best cost
/// plateaus the search stops early, and when the spread collapses to the
/// floor while progress is still being made, sampling restarts around the
/// best point at half the previous scale (curved valleys starve a plain
/// refit of variance long before the minimum).
pub fn cem_minimize<F: FnMut(&[f64]) -> f64>(
    mut cost: F,
    dims: usize,
    cfg: &CemConfig,
) -> Result<CemSolution, RefineError> {
    let n_el = cfg.n_elites();
    assert!(cfg.population >= 2 * n_el, "population must be at least twice the elite count");
    assert!(cfg.std_floor > 0.0, "std floor must be positive");
    if dims == 0 {
        let c = cost(&[]);
        return Ok(CemSolution { x: Vec::new(), cost: c, iters: 0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = vec![0.0; dims];
    let mut std = vec![cfg.init_std.max(cfg.std_floor); dims];
    let mut best_x = mean.clone();
    let mut best_cost = f64::INFINITY;
    let mut samples = vec![vec![0.0; dims]; cfg.population];
    let mut costs = vec![0.0; cfg.population];
    let mut stall = 0usize;
    let mut ran = 0usize;
    let mut scale = cfg.init_std;
    let mut improved_since_restart = true;

    for _ in 0..cfg.iters {
        ran += 1;
        samples[0].copy_from_slice(&mean);
        for sample in samples.iter_mut().skip(1) {
            for d in 0..dims {
                let z: f64 = rng.sample(StandardNormal);
                sample[d] = mean[d] + std[d] * z;
            }
        }
        let mut order: Vec<usize> = Vec::with_capacity(cfg.population);
        for (j, sample) in samples.iter().enumerate() {
            costs[j] = cost(sample);
            if costs[j].is_finite() {
                order.push(j);
            }
        }
        if order.is_empty() {
            return Err(RefineError::CemDiverged);
        }
        order.sort_by(|&a, &b| costs[a].partial_cmp(&costs[b]).expect("finite costs compare"));
        let leader = order[0];
        if costs[leader] < best_cost - 1e-15 * (1.0 + best_cost.abs()) {
            best_cost = costs[leader];
            best_x.copy_from_slice(&samples[leader]);
            stall = 0;
            improved_since_restart = true;
        } else {
            if costs[leader] < best_cost {
                best_cost = costs[leader];
                best_x.copy_from_slice(&samples[leader]);
            }
            stall += 1;
            // Patience valve for plateaus the collapse/restart logic below
            // never reaches; a stalled spread usually collapses (and then
            // restarts or exits) well before this fires.
            if stall >= 30 {
                break;
            }
        }
        // Refit over the elites plus the best point ever seen: retaining
        // the incumbent keeps the mean anchored to the best basin, and
        // capping the shrink rate leaves enough spread per iteration for
        // the mean to travel along curved valleys.
        let n_keep = n_el.min(order.len());
        let n_fit = (n_keep + 1) as f64;
        for d in 0..dims {
            let mut mu = best_x[d];
            for &j in &order[..n_keep] {
                mu += samples[j][d];
            }
            mu /= n_fit;
            let mut var = (best_x[d] - mu) * (best_x[d] - mu);
            for &j in &order[..n_keep] {
                let dev = samples[j][d] - mu;
                var += dev * dev;
            }
            mean[d] = mu;
            std[d] = (var / n_fit).sqrt().max(0.7 * std[d]).max(cfg.std_floor);
        }
        if std.iter().all(|&s| s <= 4.0 * cfg.std_floor) {
            if !improved_since_restart {
                break;
            }
            scale *= 0.5;
            mean.copy_from_slice(&best_x);
            for s in std.iter_mut() {
                *s = scale.max(cfg.std_floor);
            }
            improved_since_restart = false;
            stall = 0;
        }
    }

    Ok(CemSolution { x: best_x, cost: best_cost, iters: ran })
}

/// Weights and loop caps for the repair passes.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    /// Dilation radius around each violation run, in steps.
    pub n_pad: usize,
    /// Recovery steps appended after each violation window.
    pub n_rec: usize,
    /// Obstacle-penetration penalty (ellipses and walls).
    pub w_obs: f64,
    /// Boundary-excursion penalty (corridor).
    pub w_limit: f64,
    /// Reference-tracking weight inside violation windows.
    pub w_track: f64,
    /// Terminal-state alignment weight of a violation window.
    pub w_term: f64,
    /// Action-difference smoothness weight in violation and recovery windows.
    pub w_smooth: f64,
    /// Action-difference smoothness weight in frozen re-fits.
    pub w_smooth_frozen: f64,
    /// End-seam alignment weight of a recovery window.
    pub w_seam: f64,
    /// Cap on [repair violation; repair recovery] rounds per window.
    pub max_outer: usize,
    /// A window counts as safe once every penetration is below this.
    pub safety_tol: f64,
    /// Clearance below this is penalized. A squared hinge on raw penetration
    /// balances against the tracking pull at a small positive penetration, so
    /// the hinge is shifted inward: the optimum then lands strictly inside
    /// the safe set instead of asymptotically on its boundary.
    pub penalty_margin: f64,
    pub cem: CemConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            n_pad: 2,
            n_rec: 3,
            w_obs: 30.0,
            w_limit: 30.0,
            w_track: 3.0,
            w_term: 10.0,
            w_smooth: 6.0,
            w_smooth_frozen: 0.1,
            w_seam: 10.0,
            max_outer: 20,
            safety_tol: 1e-9,
            penalty_margin: 0.02,
            cem: CemConfig::default(),
        }
    }
}

/// Mix a window-specific salt into the base seed so every optimization in a
/// pass draws an independent, reproducible stream.
fn salted(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Σ‖a^{k+1} − a^k‖² over consecutive actions of a flat span.
fn smoothness(actions: &[f64], d_a: usize) -> f64 {
    let n = actions.len() / d_a;
    let mut acc = 0.0;
    for k in 1..n {
        acc += sq_dist(&actions[k * d_a..(k + 1) * d_a], &actions[(k - 1) * d_a..k * d_a]);
    }
    acc
}

fn clamp_actions(actions: &mut [f64], bounds: Option<&[f64]>, d_a: usize) {
    if let Some(b) = bounds {
        for (i, a) in actions.iter_mut().enumerate() {
            let lim = b[i % d_a];
            *a = a.clamp(-lim, lim);
        }
    }
}

/// Squared hinge penalties of one state: (obstacle margin deficit², boundary
/// margin deficit²). Obstacles are the ellipse/wall parts, the boundary is
/// the corridor part; absent parts contribute zero. Clearance above `margin`
/// is free, anything closer is charged quadratically.
fn split_penalties(scene: &Scene, s: &[f64], margin: f64) -> (f64, f64) {
    let obs = match &scene.obstacles {
        Some(o) => o,
        None => return (0.0, 0.0),
    };
    let (p, _) = obs.safety.point(s);
    let mut d_obs = f64::INFINITY;
    for e in &obs.ellipses {
        d_obs = d_obs.min(e.sd_with_grad(p).0);
    }
    for w in &obs.walls {
        d_obs = d_obs.min(w.normal[0] * p[0] + w.normal[1] * p[1] + w.offset);
    }
    let pen_obs = if d_obs.is_finite() { (margin - d_obs).max(0.0) } else { 0.0 };
    let pen_trk = match &obs.corridor {
        Some(c) => (margin - c.clearance(p).0).max(0.0),
        None => 0.0,
    };
    (pen_obs * pen_obs, pen_trk * pen_trk)
}

/// Deepest barrier penetration over the window states (0 if all safe).
fn worst_penetration(out: &Trajectory, scene: &Scene, windows: &[&Vec<usize>]) -> f64 {
    let mut worst = 0.0_f64;
    for w in windows {
        for &k in w.iter() {
            worst = worst.max(-scene.state_clearance(out.state(k)));
        }
    }
    worst
}

/// Recompute the entry state of a window from its predecessor so the chain
/// stays rollout-consistent across window boundaries.
fn refresh_entry(out: &mut Trajectory, k: usize, model: &Model) {
    if k == 0 {
        return;
    }
    let mut next = vec![0.0; out.layout.d_s];
    model.discretize(out.state(k - 1), out.action(k - 1), &mut next);
    out.state_mut(k).copy_from_slice(&next);
}

/// The action indices a contiguous window owns: its steps clipped to the
/// last action index. Empty for a window that only holds the final state.
fn action_span(w: &[usize], h: usize) -> Option<(usize, usize)> {
    let (&lo, &hi) = (w.first()?, w.last()?);
    let hi = hi.min(h - 1);
    (lo <= hi).then_some((lo, hi))
}

/// Re-fit one window's actions so the rollout from its entry state tracks
/// the reference states, then write actions and rolled states back. Only
/// indices inside the window are modified.
fn align_window(
    out: &mut Trajectory,
    refs: &Trajectory,
    w: &[usize],
    model: &Model,
    cfg: &RefineConfig,
    salt: u64,
) -> Result<(), RefineError> {
    let l = out.layout;
    let (a_lo, a_hi) = match action_span(w, l.h) {
        Some(span) => span,
        None => return Ok(()),
    };
    let d_a = l.d_a;
    let n_act = a_hi - a_lo + 1;
    let mut base = Vec::with_capacity(n_act * d_a);
    for k in a_lo..=a_hi {
        base.extend_from_slice(out.action(k));
    }
    let entry = out.state(w[0]).to_vec();
    let w0 = w[0];
    let w_last = *w.last().expect("non-empty window");

    let cem_cfg = CemConfig { seed: salted(cfg.cem.seed, salt), ..cfg.cem.clone() };
    let sol = cem_minimize(
        |delta| {
            let mut acts = base.clone();
            for (a, d) in acts.iter_mut().zip(delta) {
                *a += d;
            }
            let states = model.rollout(&entry, &acts);
            let mut c = 0.0;
            for k in (w0 + 1)..=w_last {
                c += sq_dist(&states[(k - w0) * l.d_s..(k - w0 + 1) * l.d_s], refs.state(k));
            }
            c + cfg.w_smooth_frozen * smoothness(&acts, d_a)
        },
        n_act * d_a,
        &cem_cfg,
    )?;

    let mut acts = base;
    for (a, d) in acts.iter_mut().zip(&sol.x) {
        *a += d;
    }
    let states = model.rollout(&entry, &acts);
    for k in a_lo..=a_hi {
        out.action_mut(k).copy_from_slice(&acts[(k - a_lo) * d_a..(k - a_lo + 1) * d_a]);
    }
    for k in (w0 + 1)..=w_last {
        out.state_mut(k).copy_from_slice(&states[(k - w0) * l.d_s..(k - w0 + 1) * l.d_s]);
    }
    Ok(())
}

/// Re-fit the frozen windows of the plan: for each one, find actions whose
/// rollout from the window's first state reproduces the window's states,
/// and replace the window contents with that rollout. Indices outside the
/// frozen windows are left untouched bit for bit.
pub fn refine_frozen(
    traj: &Trajectory,
    plan: &WindowPlan,
    model: &Model,
    cfg: &RefineConfig,
) -> Result<Trajectory, RefineError> {
    let mut out = traj.clone();
    for w in &plan.frozen {
        if w.is_empty() {
            continue;
        }
        align_window(&mut out, traj, w, model, cfg, 1 + w[0] as u64)?;
    }
    Ok(out)
}

/// Repair the violation windows of the plan: for each, alternate a
/// penalty-driven re-optimization of the violation window with an alignment
/// pass over its recovery window until the barrier clears, then re-fit the
/// following frozen window from the updated entry so the whole trajectory
/// stays one rollout chain. Candidate actions are clamped to the scene's
/// action bounds. With no violation windows the input is returned unchanged.
pub fn refine_violation(
    traj: &Trajectory,
    plan: &WindowPlan,
    scene: &Scene,
    model: &Model,
    cfg: &RefineConfig,
) -> Result<Trajectory, RefineError> {
    let mut out = traj.clone();
    if !plan.has_violations() {
        return Ok(out);
    }
    let l = out.layout;
    let d_a = l.d_a;
    let bounds = scene.action_bounds.as_deref();

    for (i, w_vio) in plan.violation.iter().enumerate() {
        let w_rec = &plan.recovery[i];
        refresh_entry(&mut out, w_vio[0], model);

        let mut cleared = false;
        let mut worst = f64::INFINITY;
        for round in 0..cfg.max_outer {
            // Penalty escalation: each round that leaves a residual
            // penetration doubles the safety weights, so the barrier
            // eventually dominates the tracking terms at any violation
            // depth while the first round keeps the configured ratios.
            let esc = (1u64 << round.min(12)) as f64;
            let (w_obs_r, w_limit_r) = (cfg.w_obs * esc, cfg.w_limit * esc);

            // Violation pass: push the rollout out of the obstacles while
            // staying near the reference states.
            if let Some((a_lo, a_hi)) = action_span(w_vio, l.h) {
                let w0 = w_vio[0];
                let w_last = *w_vio.last().expect("non-empty window");
                let entry = out.state(w0).to_vec();
                let mut base = Vec::new();
                for k in a_lo..=a_hi {
                    base.extend_from_slice(out.action(k));
                }
                let cem_cfg = CemConfig {
                    seed: salted(cfg.cem.seed, (2 + w0 as u64) << 20 | round as u64),
                    ..cfg.cem.clone()
                };
                let sol = cem_minimize(
                    |delta| {
                        let mut acts = base.clone();
                        for (a, d) in acts.iter_mut().zip(delta) {
                            *a += d;
                        }
                        clamp_actions(&mut acts, bounds, d_a);
                        let states = model.rollout(&entry, &acts);
                        let mut c = 0.0;
                        for k in (w0 + 1)..=w_last {
                            let s = &states[(k - w0) * l.d_s..(k - w0 + 1) * l.d_s];
                            let (p_obs, p_trk) = split_penalties(scene, s, cfg.penalty_margin);
                            c += w_obs_r * p_obs + w_limit_r * p_trk + cfg.w_track * sq_dist(s, traj.state(k));
                        }
                        let s_end = &states[(w_last - w0) * l.d_s..(w_last - w0 + 1) * l.d_s];
                        c += cfg.w_term * sq_dist(s_end, traj.state(w_last));
                        c + cfg.w_smooth * smoothness(&acts, d_a)
                    },
                    (a_hi - a_lo + 1) * d_a,
                    &cem_cfg,
                )?;
                let mut acts = base;
                for (a, d) in acts.iter_mut().zip(&sol.x) {
                    *a += d;
                }
                clamp_actions(&mut acts, bounds, d_a);
                let states = model.rollout(&entry, &acts);
                for k in a_lo..=a_hi {
                    out.action_mut(k).copy_from_slice(&acts[(k - a_lo) * d_a..(k - a_lo + 1) * d_a]);
                }
                for k in (w0 + 1)..=w_last {
                    out.state_mut(k).copy_from_slice(&states[(k - w0) * l.d_s..(k - w0 + 1) * l.d_s]);
                }
            }

            // Recovery pass: ease the detour back onto the reference. The
            // start seam is already continuous because the rollout chains
            // through the refreshed entry, so only the end seam is scored.
            if let Some(&rec0) = w_rec.first() {
                refresh_entry(&mut out, rec0, model);
                if let Some((a_lo, a_hi)) = action_span(w_rec, l.h) {
                    let rec_last = *w_rec.last().expect("non-empty window");
                    let entry = out.state(rec0).to_vec();
                    let mut base = Vec::new();
                    for k in a_lo..=a_hi {
                        base.extend_from_slice(out.action(k));
                    }
                    let cem_cfg = CemConfig {
                        seed: salted(cfg.cem.seed, (3 + rec0 as u64) << 20 | round as u64),
                        ..cfg.cem.clone()
                    };
                    let sol = cem_minimize(
                        |delta| {
                            let mut acts = base.clone();
                            for (a, d) in acts.iter_mut().zip(delta) {
                                *a += d;
                            }
                            clamp_actions(&mut acts, bounds, d_a);
                            let states = model.rollout(&entry, &acts);
                            let s_end = &states[(rec_last - rec0) * l.d_s..(rec_last - rec0 + 1) * l.d_s];
                            cfg.w_seam * sq_dist(s_end, traj.state(rec_last))
                                + cfg.w_smooth * smoothness(&acts, d_a)
                        },
                        (a_hi - a_lo + 1) * d_a,
                        &cem_cfg,
                    )?;
                    let mut acts = base;
                    for (a, d) in acts.iter_mut().zip(&sol.x) {
                        *a += d;
                    }
                    clamp_actions(&mut acts, bounds, d_a);
                    let states = model.rollout(&entry, &acts);
                    for k in a_lo..=a_hi {
                        out.action_mut(k).copy_from_slice(&acts[(k - a_lo) * d_a..(k - a_lo + 1) * d_a]);
                    }
                    for k in (rec0 + 1)..=rec_last {
                        out.state_mut(k).copy_from_slice(&states[(k - rec0) * l.d_s..(k - rec0 + 1) * l.d_s]);
                    }
                }
            }

            worst = worst_penetration(&out, scene, &[w_vio, w_rec]);
            if worst <= cfg.safety_tol {
                cleared = true;
                break;
            }
        }
        if !cleared {
            return Err(RefineError::RefinementFailed { window: i, worst });
        }

        // Chain repair: re-fit the frozen window that follows this block
        // from its updated entry state.
        let wf = &plan.frozen[i + 1];
        if let Some(&f0) = wf.first() {
            refresh_entry(&mut out, f0, model);
            align_window(&mut out, traj, wf, model, cfg, (4 + f0 as u64) << 20)?;
        }
    }
    Ok(out)
}
