//! Per-step guidance quadratic program: class-K gains with prescribed-time
//! blow-up, constraint rows (ρ, η), slack relaxation, and exact solvers.
//!
//! The program is min uᵀP_u u + δᵀP_δ δ subject to ρ + η·u ≤ δ, δ ≥ 0, with
//! diagonal weights. Eliminating δ (optimal slack is max(0, ρ_j + η_j·u))
//! leaves a convex piecewise-quadratic in u, which the active-set solver
//! minimizes exactly; when every row is strictly violated the KKT system of
//! the equality-constrained relaxation gives the solution in closed form.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::field::EPS_T;

/// Rows with ρ above this are treated as violated ("positive").
pub const RHO_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuidanceError {
    /// An η row references coordinates outside the flow vector.
    ShapeError,
    /// The iterative solver failed to reach a stationary point.
    QPFailure,
}

impl core::fmt::Display for GuidanceError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GuidanceError::ShapeError => write!(f, "constraint row shape mismatch"),
            GuidanceError::QPFailure => write!(f, "guidance QP did not converge"),
        }
    }
}

impl core::error::Error for GuidanceError {}

/// Class-K gain γ(t, a) = c_gain·φ(t)·a with blow-up φ(t) = 1/(1−t)²,
/// clamped at the integration horizon so the sampler never sees ∞.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassKGain {
    pub c_gain: f64,
    pub clamp_eps: f64,
}

impl Default for ClassKGain {
    fn default() -> Self {
        ClassKGain { c_gain: 2.0, clamp_eps: EPS_T }
    }
}

impl ClassKGain {
    pub fn new(c_gain: f64, clamp_eps: f64) -> Self {
        assert!(c_gain > 0.0 && clamp_eps > 0.0);
        ClassKGain { c_gain, clamp_eps }
    }

    /// Blow-up factor φ(t), clamped to φ(1 − clamp_eps).
    #[inline]
    pub fn blowup(&self, t: f64) -> f64 {
        let tc = t.min(1.0 - self.clamp_eps);
        let omt = 1.0 - tc;
        1.0 / (omt * omt)
    }

    #[inline]
    pub fn gamma(&self, t: f64, a: f64) -> f64 {
        self.c_gain * self.blowup(t) * a
    }
}

/// Sparse constraint gradient: a sorted list of disjoint dense segments
/// (start offset, coefficients) over the flow vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRow {
    pub segments: Vec<(usize, Vec<f64>)>,
}

impl SparseRow {
    pub fn dense(offset: usize, coeffs: Vec<f64>) -> Self {
        SparseRow { segments: vec![(offset, coeffs)] }
    }

    pub fn from_segments(mut segments: Vec<(usize, Vec<f64>)>) -> Self {
        segments.sort_by_key(|s| s.0);
        for w in segments.windows(2) {
            assert!(w[0].0 + w[0].1.len() <= w[1].0, "row segments must not overlap");
        }
        SparseRow { segments }
    }

    /// One past the largest coordinate touched.
    pub fn max_extent(&self) -> usize {
        self.segments.iter().map(|(o, c)| o + c.len()).max().unwrap_or(0)
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (off, coeffs) in &self.segments {
            for (i, c) in coeffs.iter().enumerate() {
                s += c * x[off + i];
            }
        }
        s
    }

    /// `out += scale·row`
    pub fn add_scaled_into(&self, scale: f64, out: &mut [f64]) {
        for (off, coeffs) in &self.segments {
            for (i, c) in coeffs.iter().enumerate() {
                out[off + i] += scale * c;
            }
        }
    }

    /// η_self · diag(w)⁻¹ · η_otherᵀ, iterating only over overlapping
    /// segment intersections.
    pub fn dot_inv_weighted(&self, other: &SparseRow, w: &[f64]) -> f64 {
        let mut s = 0.0;
        for (ao, ac) in &self.segments {
            let (a_lo, a_hi) = (*ao, ao + ac.len());
            for (bo, bc) in &other.segments {
                let (b_lo, b_hi) = (*bo, bo + bc.len());
                let lo = a_lo.max(b_lo);
                let hi = a_hi.min(b_hi);
                for i in lo..hi {
                    s += ac[i - a_lo] * bc[i - b_lo] / w[i];
                }
            }
        }
        s
    }
}

/// One assembled constraint row before stacking: gradient, current residual
/// value, and the zeroing-schedule value/derivative at this flow time.
#[derive(Clone, Debug)]
pub struct RowSpec {
    pub eta: SparseRow,
    pub residual: f64,
    pub schedule_value: f64,
    pub schedule_deriv: f64,
}

/// Stacked guidance QP. Row 0 is the equality row; inequality rows follow.
#[derive(Clone, Debug)]
pub struct GuidanceProblem {
    pub dim: usize,
    pub rho: Vec<f64>,
    pub rows: Vec<SparseRow>,
    /// Diagonal of P_u, length `dim`.
    pub p_u: Vec<f64>,
    /// Diagonal of P_δ, one entry per row.
    pub p_delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSolution {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    /// Whether any row was violated and guidance fired.
    pub active: bool,
}

impl GuidanceSolution {
    fn zeros(dim: usize, rows: usize) -> Self {
        GuidanceSolution { u: vec![0.0; dim], delta: vec![0.0; rows], active: false }
    }
}

/// Stack the equality row (first) and inequality rows into a QP at flow time
/// `t`. Each row's forcing term is ρ_j = η_j·v − γ(t, r̄_j − residual_j) − r̄̇_j,
/// so ρ_j + η_j·u ≤ 0 reproduces the comparison-principle decay condition.
pub fn assemble(
    t: f64,
    v: &[f64],
    gain: &ClassKGain,
    equality: &RowSpec,
    inequalities: &[RowSpec],
    p_u: Vec<f64>,
    p_delta: f64,
) -> Result<GuidanceProblem, GuidanceError> {
    let dim = v.len();
    if p_u.len() != dim {
        return Err(GuidanceError::ShapeError);
    }
    let n_rows = 1 + inequalities.len();
    let mut rho = Vec::with_capacity(n_rows);
    let mut rows = Vec::with_capacity(n_rows);
    for spec in core::iter::once(equality).chain(inequalities.iter()) {
        if spec.eta.max_extent() > dim {
            return Err(GuidanceError::ShapeError);
        }
        let margin = spec.schedule_value - spec.residual;
        rho.push(spec.eta.dot(v) - gain.gamma(t, margin) - spec.schedule_deriv);
        rows.push(spec.eta.clone());
    }
    Ok(GuidanceProblem { dim, rho, rows, p_u, p_delta: vec![p_delta; n_rows] })
}

/// Solve the equality-constrained relaxation restricted to `active` rows:
/// λ = Λ⁻¹ρ_A with Λ = η_A P_u⁻¹ η_Aᵀ + P_δ,A⁻¹, u = −P_u⁻¹ η_Aᵀ λ.
fn restricted_solve(p: &GuidanceProblem, active: &[usize]) -> Option<Vec<f64>> {
    let m = active.len();
    let mut lambda_mat = DMatrix::<f64>::zeros(m, m);
    for (ai, &i) in active.iter().enumerate() {
        for (aj, &j) in active.iter().enumerate().skip(ai) {
            let mut v = p.rows[i].dot_inv_weighted(&p.rows[j], &p.p_u);
            if i == j {
                v += 1.0 / p.p_delta[i];
            }
            lambda_mat[(ai, aj)] = v;
            lambda_mat[(aj, ai)] = v;
        }
    }
    let rhs = DVector::from_iterator(m, active.iter().map(|&i| p.rho[i]));
    let chol = lambda_mat.cholesky()?;
    let lambda = chol.solve(&rhs);
    let mut u = vec![0.0; p.dim];
    for (ai, &i) in active.iter().enumerate() {
        p.rows[i].add_scaled_into(-lambda[ai], &mut u);
    }
    for (j, uj) in u.iter_mut().enumerate() {
        *uj /= p.p_u[j];
    }
    Some(u)
}

/// Slack-eliminated objective F(u) = uᵀP_u u + Σ_j P_δj·max(0, ρ_j + η_j·u)².
fn reduced_objective(p: &GuidanceProblem, u: &[f64]) -> f64 {
    let mut f = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        f += p.p_u[j] * uj * uj;
    }
    for (j, row) in p.rows.iter().enumerate() {
        let q = p.rho[j] + row.dot(u);
        if q > 0.0 {
            f += p.p_delta[j] * q * q;
        }
    }
    f
}

fn slack_of(p: &GuidanceProblem, u: &[f64]) -> Vec<f64> {
    p.rows.iter().zip(&p.rho).map(|(row, &r)| (r + row.dot(u)).max(0.0)).collect()
}

/// Literal two-branch rule: if every row is violated (ρ ≻ 0), return the
/// closed-form KKT solution of the equality-constrained relaxation; in any
/// other case return the zero vector.
pub fn solve_closed_form(p: &GuidanceProblem) -> Result<GuidanceSolution, GuidanceError> {
    if !p.rho.iter().all(|&r| r > RHO_TOL) {
        return Ok(GuidanceSolution::zeros(p.dim, p.rho.len()));
    }
    let all: Vec<usize> = (0..p.rho.len()).collect();
    let u = restricted_solve(p, &all).ok_or(GuidanceError::QPFailure)?;
    let delta: Vec<f64> =
        p.rows.iter().zip(&p.rho).map(|(row, &r)| r + row.dot(&u)).collect();
    Ok(GuidanceSolution { u, delta, active: true })
}

/// Exact minimizer of the inequality-form QP via active-set iteration on the
/// slack-eliminated objective. Each pass solves the equality-constrained
/// problem on the currently violated rows and moves along the segment to
/// that solution as far as the objective decreases; strict convexity makes
/// the fixpoint the global minimizer.
pub fn solve_active_set(p: &GuidanceProblem) -> Result<GuidanceSolution, GuidanceError> {
    let n = p.rho.len();
    let mut u = vec![0.0; p.dim];
    if !p.rho.iter().any(|&r| r > RHO_TOL) {
        return Ok(GuidanceSolution::zeros(p.dim, n));
    }
    let mut f_cur = reduced_objective(p, &u);
    for _ in 0..100 {
        let active: Vec<usize> = (0..n)
            .filter(|&j| p.rho[j] + p.rows[j].dot(&u) > RHO_TOL)
            .collect();
        if active.is_empty() {
            // Unconstrained region: pure quadratic pulls u to 0, but a zero
            // vector with no violated rows is already stationary.
            break;
        }
        let u_new = restricted_solve(p, &active).ok_or(GuidanceError::QPFailure)?;
        let f_new = reduced_objective(p, &u_new);
        if f_new <= f_cur + 1e-15 {
            let same_point =
                u.iter().zip(&u_new).all(|(a, b)| (a - b).abs() <= 1e-14 * b.abs().max(1.0));
            u = u_new;
            let converged = same_point || (f_cur - f_new).abs() <= 1e-15 * f_cur.max(1.0);
            f_cur = f_new;
            if converged {
                break;
            }
        } else {
            // Overshot a kink: backtrack along the segment toward u_new.
            let mut alpha = 0.5;
            let mut improved = false;
            while alpha > 1e-8 {
                let trial: Vec<f64> =
                    u.iter().zip(&u_new).map(|(a, b)| a + alpha * (b - a)).collect();
                let f_trial = reduced_objective(p, &trial);
                if f_trial < f_cur {
                    u = trial;
                    f_cur = f_trial;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !improved {
                break; // numerically stationary at a kink
            }
        }
    }
    let delta = slack_of(p, &u);
    let active = u.iter().any(|&x| x != 0.0) || delta.iter().any(|&d| d > 0.0);
    Ok(GuidanceSolution { u, delta, active })
}

/// Dispatcher used by the planner: zero fast path, closed form when all rows
/// are violated and its slack is feasible, active-set otherwise.
pub fn solve(p: &GuidanceProblem) -> Result<GuidanceSolution, GuidanceError> {
    if !p.rho.iter().any(|&r| r > RHO_TOL) {
        return Ok(GuidanceSolution::zeros(p.dim, p.rho.len()));
    }
    if p.rho.iter().all(|&r| r > RHO_TOL) {
        let sol = solve_closed_form(p)?;
        if sol.delta.iter().all(|&d| d >= -1e-12) {
            return Ok(sol);
        }
    }
    solve_active_set(p)
}

/// Maximum KKT violation of a candidate solution: stationarity
/// ‖2P_u u + ηᵀμ‖∞ with μ = 2P_δ δ, primal feasibility
/// max(ρ + ηu − δ, −δ)⁺, and complementary slackness |μ_j·(ρ+ηu−δ)_j|.
pub fn kkt_residual(p: &GuidanceProblem, sol: &GuidanceSolution) -> f64 {
    let mut stat = vec![0.0; p.dim];
    for (j, &uj) in sol.u.iter().enumerate() {
        stat[j] = 2.0 * p.p_u[j] * uj;
    }
    let mut worst = 0.0f64;
    for (j, row) in p.rows.iter().enumerate() {
        let mu = 2.0 * p.p_delta[j] * sol.delta[j];
        row.add_scaled_into(mu, &mut stat);
        let gap = p.rho[j] + row.dot(&sol.u) - sol.delta[j];
        worst = worst.max(gap.max(0.0)); // primal: ρ + ηu ≤ δ
        worst = worst.max(-sol.delta[j].min(0.0)); // primal: δ ≥ 0
        worst = worst.max((mu * gap).abs()); // complementary slackness
    }
    for s in stat {
        worst = worst.max(s.abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single_row_problem(eta: Vec<f64>, rho: f64, p_delta: f64) -> GuidanceProblem {
        let dim = eta.len();
        GuidanceProblem {
            dim,
            rho: vec![rho],
            rows: vec![SparseRow::dense(0, eta)],
            p_u: vec![1.0; dim],
            p_delta: vec![p_delta],
        }
    }

    #[test]
    fn assemble_reproduces_row_arithmetic() {
        // η·v = 3, γ-term = 1 (unit gain, t = 0, margin 1), r̄̇ = −0.5.
        let gain = ClassKGain::new(1.0, 1e-3);
        let eq = RowSpec {
            eta: SparseRow::dense(0, vec![1.0, 0.0]),
            residual: 1.0,
            schedule_value: 2.0,
            schedule_deriv: -0.5,
        };
        let p = assemble(0.0, &[3.0, 0.0], &gain, &eq, &[], vec![1.0, 1.0], 1.0).unwrap();
        assert_eq!(p.rho.len(), 1, "equality only");
        assert_abs_diff_eq!(p.rho[0], 3.0 - 1.0 + 0.5, epsilon = 1e-14);
    }

    #[test]
    fn assemble_zero_when_residual_tracks_schedule() {
        let gain = ClassKGain::default();
        let eq = RowSpec {
            eta: SparseRow::dense(0, vec![0.7, -0.2]),
            residual: 0.4,
            schedule_value: 0.4,
            schedule_deriv: 0.0,
        };
        let p = assemble(0.3, &[0.0, 0.0], &gain, &eq, &[], vec![1.0, 1.0], 1e3).unwrap();
        assert_abs_diff_eq!(p.rho[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn assemble_rejects_out_of_range_rows() {
        let gain = ClassKGain::default();
        let eq = RowSpec {
            eta: SparseRow::dense(3, vec![1.0, 1.0]),
            residual: 0.0,
            schedule_value: 0.0,
            schedule_deriv: 0.0,
        };
        let err = assemble(0.0, &[0.0; 4], &gain, &eq, &[], vec![1.0; 4], 1.0).unwrap_err();
        assert_eq!(err, GuidanceError::ShapeError);
    }

    #[test]
    fn closed_form_single_row_frozen_values() {
        // min u₁²+u₂²+δ² s.t. 1 + u₁ = δ → u = [−0.5, 0], δ = 0.5.
        let p = single_row_problem(vec![1.0, 0.0], 1.0, 1.0);
        let sol = solve_closed_form(&p).unwrap();
        assert!(sol.active);
        assert_abs_diff_eq!(sol.u[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.u[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.delta[0], 0.5, epsilon = 1e-12);

        // Heavier slack penalty shifts the burden onto u: u₁ = −100/101.
        let p = single_row_problem(vec![1.0, 0.0], 1.0, 100.0);
        let sol = solve_closed_form(&p).unwrap();
        assert_abs_diff_eq!(sol.u[0], -100.0 / 101.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.delta[0], 1.0 / 101.0, epsilon = 1e-12);
    }

    #[test]
    fn satisfied_rows_produce_zero_guidance() {
        let p = single_row_problem(vec![1.0, 0.0], -1.0, 1.0);
        let sol = solve_closed_form(&p).unwrap();
        assert!(!sol.active);
        assert_eq!(sol.u, vec![0.0, 0.0]);
        assert_eq!(sol.delta, vec![0.0]);
        assert_eq!(kkt_residual(&p, &sol), 0.0);
    }

    #[test]
    fn conflicting_rows_cancel_through_pure_slack() {
        let p = GuidanceProblem {
            dim: 1,
            rho: vec![1.0, 1.0],
            rows: vec![SparseRow::dense(0, vec![1.0]), SparseRow::dense(0, vec![-1.0])],
            p_u: vec![1.0],
            p_delta: vec![1.0, 1.0],
        };
        let sol = solve_active_set(&p).unwrap();
        assert_abs_diff_eq!(sol.u[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.delta[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.delta[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn active_set_matches_closed_form_on_all_violated_instances() {
        // Deterministic small sweep; the large randomized comparison lives
        // in the oracle integration tests.
        let mut count = 0;
        for a in [-0.8, 0.3, 1.2] {
            for b in [0.5, -0.4] {
                for rho2 in [0.2, 1.5] {
                    let p = GuidanceProblem {
                        dim: 2,
                        rho: vec![1.0, rho2],
                        rows: vec![
                            SparseRow::dense(0, vec![1.0, a]),
                            SparseRow::dense(0, vec![b, 1.0]),
                        ],
                        p_u: vec![1.0, 1.0],
                        p_delta: vec![2.0, 3.0],
                    };
                    let cf = solve_closed_form(&p).unwrap();
                    // Only instances where the equality relaxation is valid
                    // for the inequality problem (δ ≥ 0) must agree.
                    if cf.delta.iter().all(|&d| d >= 0.0) {
                        let as_ = solve_active_set(&p).unwrap();
                        for j in 0..2 {
                            assert_abs_diff_eq!(cf.u[j], as_.u[j], epsilon = 1e-8);
                        }
                        count += 1;
                    }
                }
            }
        }
        assert!(count >= 6, "sweep should contain agreeing instances, got {count}");
    }

    #[test]
    fn slack_monotone_in_its_penalty() {
        let mut prev_delta = f64::INFINITY;
        let mut prev_u = 0.0;
        for p_delta in [0.1, 1.0, 10.0, 100.0, 1000.0] {
            let p = single_row_problem(vec![1.0], 1.0, p_delta);
            let sol = solve_active_set(&p).unwrap();
            assert!(sol.delta[0] <= prev_delta + 1e-12);
            assert!(sol.u[0].abs() >= prev_u - 1e-12);
            prev_delta = sol.delta[0];
            prev_u = sol.u[0].abs();
        }
    }

    #[test]
    fn kkt_residual_detects_perturbation() {
        let p = single_row_problem(vec![1.0, 0.0], 1.0, 1.0);
        let sol = solve_closed_form(&p).unwrap();
        assert!(kkt_residual(&p, &sol) <= 1e-9);
        let mut bad = sol.clone();
        bad.u[0] += 1e-3;
        assert!(kkt_residual(&p, &bad) >= 1e-4);
    }

    #[test]
    fn gain_blowup_is_clamped() {
        let g = ClassKGain::new(2.0, 1e-3);
        let cap = g.blowup(1.0 - 1e-3);
        assert_abs_diff_eq!(g.blowup(0.9999), cap, epsilon = 1e-9);
        assert_abs_diff_eq!(g.blowup(1.0), cap, epsilon = 1e-9);
        assert!(g.blowup(0.5) < cap);
        assert_abs_diff_eq!(g.gamma(0.0, 3.0), 6.0, epsilon = 1e-15);
    }

    #[test]
    fn sparse_segments_match_dense_row() {
        let row = SparseRow::from_segments(vec![(4, vec![1.0, 2.0]), (0, vec![3.0])]);
        let x = [1.0, 9.0, 9.0, 9.0, 0.5, 0.25];
        assert_abs_diff_eq!(row.dot(&x), 3.0 + 0.5 + 0.5, epsilon = 1e-15);
        let mut out = vec![0.0; 6];
        row.add_scaled_into(2.0, &mut out);
        assert_eq!(out, vec![6.0, 0.0, 0.0, 0.0, 2.0, 4.0]);

        let other = SparseRow::dense(3, vec![1.0, 1.0, 1.0]);
        let w = [1.0, 1.0, 1.0, 1.0, 2.0, 4.0];
        // Overlap at indices 4, 5: 1·1/2 + 2·1/4.
        assert_abs_diff_eq!(row.dot_inv_weighted(&other, &w), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mixed_case_dispatcher_enforces_violated_row_only() {
        let p = GuidanceProblem {
            dim: 2,
            rho: vec![1.0, -5.0],
            rows: vec![SparseRow::dense(0, vec![1.0, 0.0]), SparseRow::dense(0, vec![0.0, 1.0])],
            p_u: vec![1.0, 1.0],
            p_delta: vec![1.0, 1.0],
        };
        let sol = solve(&p).unwrap();
        // Row 2 is far from its bound; the solution must match the
        // single-row closed form on row 1.
        assert_abs_diff_eq!(sol.u[0], -0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.u[1], 0.0, epsilon = 1e-12);
        // Literal closed form would zero everything here.
        let literal = solve_closed_form(&p).unwrap();
        assert!(!literal.active);
    }
}
