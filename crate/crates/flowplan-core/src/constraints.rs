//! Constraint encoders: residual/gradient pairs over the flat trajectory
//! vector for dynamics consistency, initial alignment, obstacle clearance,
//! and action bounds, plus the obstacle geometry itself.
//!
//! Sign conventions: barrier residuals satisfy h ≤ 0 exactly on the safe
//! set; clearances (the negated barriers) are positive when safe. Equality
//! encoders return the residual norm together with the gradient of its
//! square, which is what the aggregate and the guidance rows consume.

use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::Model;
use crate::fmath;
use crate::guidance::SparseRow;
use crate::traj::Trajectory;

/// Axis-aligned-in-body-frame ellipse, rotated by `rotation` radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Semi-axes (a, b), both positive.
    pub axes: [f64; 2],
    pub rotation: f64,
}

impl Ellipse {
    /// Quadratic-form surrogate signed distance:
    /// ((p−c)ᵀQ(p−c) − 1)·min(a,b), negative inside, zero on the boundary.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        self.sd_with_grad(p).0
    }

    /// Signed distance and its gradient 2·Q(p−c)·min(a,b).
    pub fn sd_with_grad(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let (s, c) = fmath::sin_cos(self.rotation);
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        // Body-frame coordinates.
        let bx = c * dx + s * dy;
        let by = -s * dx + c * dy;
        let (a2, b2) = (self.axes[0] * self.axes[0], self.axes[1] * self.axes[1]);
        let scale = self.axes[0].min(self.axes[1]);
        let val = (bx * bx / a2 + by * by / b2 - 1.0) * scale;
        // Chain rule back to world frame.
        let gbx = 2.0 * bx / a2 * scale;
        let gby = 2.0 * by / b2 * scale;
        (val, [c * gbx - s * gby, s * gbx + c * gby])
    }
}

/// Half-plane kept clear: clearance n·p + offset is positive on the safe
/// side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wall {
    pub normal: [f64; 2],
    pub offset: f64,
}

/// Open polyline boundary with an inward orientation: `inward` flips the
/// rotated segment direction so the normal points into the safe region.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    /// +1 or −1; inward normal of a segment with direction d is
    /// inward·normalize([d_y, −d_x]).
    pub inward: f64,
}

impl Polyline {
    /// Signed distance (positive on the inward side) and gradient at `p`.
    /// Closest segment by unsigned distance, lexicographically first on
    /// ties; vertex-closest points use the radial gradient.
    pub fn signed_distance(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        assert!(self.points.len() >= 2, "polyline needs at least one segment");
        let mut best_d2 = f64::INFINITY;
        let mut best_q = [0.0; 2];
        let mut best_seg = 0usize;
        let mut best_interior = false;
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t_raw = (ap[0] * ab[0] + ap[1] * ab[1]) / len2;
            let t = t_raw.clamp(0.0, 1.0);
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d2 = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]);
            if d2 < best_d2 {
                best_d2 = d2;
                best_q = q;
                best_seg = i;
                best_interior = (0.0..=1.0).contains(&t_raw);
            }
        }
        let a = self.points[best_seg];
        let b = self.points[best_seg + 1];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let norm = fmath::hypot(ab[0], ab[1]);
        let n = [self.inward * ab[1] / norm, self.inward * -ab[0] / norm];
        if best_interior {
            // Projection hits the segment: distance along the normal.
            let d = n[0] * (p[0] - best_q[0]) + n[1] * (p[1] - best_q[1]);
            (d, n)
        } else {
            let d = fmath::sqrt(best_d2);
            if d == 0.0 {
                return (0.0, n);
            }
            let radial = [(p[0] - best_q[0]) / d, (p[1] - best_q[1]) / d];
            let sign = if radial[0] * n[0] + radial[1] * n[1] >= 0.0 { 1.0 } else { -1.0 };
            (sign * d, [sign * radial[0], sign * radial[1]])
        }
    }
}

/// Two-boundary corridor; a point is inside when both boundary distances
/// are positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Corridor {
    pub left: Polyline,
    pub right: Polyline,
}

impl Corridor {
    /// min(d_left, d_right) with the matching gradient; left wins ties.
    pub fn clearance(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let (dl, gl) = self.left.signed_distance(p);
        let (dr, gr) = self.right.signed_distance(p);
        if dl <= dr {
            (dl, gl)
        } else {
            (dr, gr)
        }
    }
}

/// How a state maps to the planar safety point monitored against the
/// obstacle set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SafetyMap {
    /// The point is (s[ix], s[iy]).
    PlanarPosition { ix: usize, iy: usize },
    /// Two-link end effector: (l1·sin s[0] + l2·sin s[1], 0).
    PendulumTip { l1: f64, l2: f64 },
}

impl SafetyMap {
    /// Safety point and its Jacobian rows (∂p/∂s, 2×d_s, sparse by index).
    pub fn point(&self, s: &[f64]) -> ([f64; 2], Vec<[f64; 2]>) {
        match *self {
            SafetyMap::PlanarPosition { ix, iy } => {
                let mut jac = vec![[0.0; 2]; s.len()];
                jac[ix][0] = 1.0;
                jac[iy][1] = 1.0;
                ([s[ix], s[iy]], jac)
            }
            SafetyMap::PendulumTip { l1, l2 } => {
                let mut jac = vec![[0.0; 2]; s.len()];
                jac[0][0] = l1 * fmath::cos(s[0]);
                jac[1][0] = l2 * fmath::cos(s[1]);
                ([l1 * fmath::sin(s[0]) + l2 * fmath::sin(s[1]), 0.0], jac)
            }
        }
    }
}

/// Immutable scene geometry plus the state-to-point safety map.
#[derive(Clone, Debug)]
pub struct ObstacleSet {
    pub ellipses: Vec<Ellipse>,
    pub walls: Vec<Wall>,
    pub corridor: Option<Corridor>,
    pub safety: SafetyMap,
}

impl ObstacleSet {
    /// Aggregated clearance: the minimum over per-obstacle clearances
    /// (ellipse signed distance, wall halfplane value, corridor distance),
    /// with the gradient of the first minimizer in evaluation order
    /// (ellipses, walls, corridor).
    pub fn clearance(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let mut best = (f64::INFINITY, [0.0; 2]);
        for e in &self.ellipses {
            let (d, g) = e.sd_with_grad(p);
            if d < best.0 {
                best = (d, g);
            }
        }
        for w in &self.walls {
            let d = w.normal[0] * p[0] + w.normal[1] * p[1] + w.offset;
            if d < best.0 {
                best = (d, w.normal);
            }
        }
        if let Some(c) = &self.corridor {
            let (d, g) = c.clearance(p);
            if d < best.0 {
                best = (d, g);
            }
        }
        assert!(best.0.is_finite(), "obstacle set must contain at least one element");
        best
    }
}

/// Where a barrier row came from; fixes its position in the stacked QP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarrierTag {
    StateStep(usize),
    ActionStep { k: usize, component: usize },
}

/// One inequality row: residual h (≤ 0 safe) and its trajectory gradient.
#[derive(Clone, Debug)]
pub struct Barrier {
    pub residual: f64,
    pub gradient: SparseRow,
    pub tag: BarrierTag,
}

/// Dynamics-consistency residual at step k: ‖s^{k+1} − f(s^k, a^k)‖ together
/// with the gradient of its square over the [s^k, a^k, s^{k+1}] span.
pub fn dyn_consistency(traj: &Trajectory, model: &Model, k: usize) -> (f64, SparseRow) {
    let l = traj.layout;
    assert!(k < l.h);
    assert_eq!(l.d_s, model.d_s());
    assert_eq!(l.d_a, model.d_a());
    let (ds, da) = (l.d_s, l.d_a);
    let mut fk = vec![0.0; ds];
    model.discretize(traj.state(k), traj.action(k), &mut fk);
    let mut r = vec![0.0; ds];
    let mut r2 = 0.0;
    for i in 0..ds {
        r[i] = traj.state(k + 1)[i] - fk[i];
        r2 += r[i] * r[i];
    }
    let (js, ja) = model.jacobians(traj.state(k), traj.action(k));
    // ∇‖r‖² over the contiguous span: −2Jsᵀr | −2Jaᵀr | 2r.
    let mut seg = vec![0.0; 2 * ds + da];
    let mut jst_r = vec![0.0; ds];
    js.matvec_t(&r, &mut jst_r);
    let mut jat_r = vec![0.0; da];
    ja.matvec_t(&r, &mut jat_r);
    for i in 0..ds {
        seg[i] = -2.0 * jst_r[i];
        seg[ds + da + i] = 2.0 * r[i];
    }
    for i in 0..da {
        seg[ds + i] = -2.0 * jat_r[i];
    }
    (fmath::sqrt(r2), SparseRow::dense(l.state_range(k).start, seg))
}

/// Initial-alignment residual ‖s⁰ − s_cur‖ and the gradient of its square,
/// supported on the s⁰ block only.
pub fn initial_alignment(traj: &Trajectory, s_cur: &[f64]) -> (f64, SparseRow) {
    let ds = traj.layout.d_s;
    assert_eq!(s_cur.len(), ds);
    let mut seg = vec![0.0; ds];
    let mut r2 = 0.0;
    for i in 0..ds {
        let r = traj.state(0)[i] - s_cur[i];
        seg[i] = 2.0 * r;
        r2 += r * r;
    }
    (fmath::sqrt(r2), SparseRow::dense(0, seg))
}

/// Obstacle barrier at state step k: h = −clearance(point(s^k)), gradient
/// −(E_s^k)ᵀ Jᵀ ∇clearance.
pub fn state_barrier(traj: &Trajectory, obstacles: &ObstacleSet, k: usize) -> Barrier {
    let l = traj.layout;
    assert!(k <= l.h);
    let s = traj.state(k);
    let (p, jac) = obstacles.safety.point(s);
    let (clear, gp) = obstacles.clearance(p);
    let mut seg = vec![0.0; l.d_s];
    for (i, row) in jac.iter().enumerate() {
        seg[i] = -(row[0] * gp[0] + row[1] * gp[1]);
    }
    Barrier {
        residual: -clear,
        gradient: SparseRow::dense(l.state_range(k).start, seg),
        tag: BarrierTag::StateStep(k),
    }
}

/// Per-component action bounds at step k: h_i = a_i² − bound_i².
pub fn action_barrier(traj: &Trajectory, bounds: &[f64], k: usize) -> Vec<Barrier> {
    let l = traj.layout;
    assert!(k < l.h);
    assert_eq!(bounds.len(), l.d_a);
    let a = traj.action(k);
    let base = l.action_range(k).start;
    (0..l.d_a)
        .map(|i| Barrier {
            residual: a[i] * a[i] - bounds[i] * bounds[i],
            gradient: SparseRow::dense(base + i, vec![2.0 * a[i]]),
            tag: BarrierTag::ActionStep { k, component: i },
        })
        .collect()
}

/// Sum-of-squares equality aggregate: value Σ residual_i² and gradient
/// Σ ∇(residual_i²) over the full trajectory vector.
#[derive(Clone, Debug)]
pub struct EqualityAggregate {
    pub value: f64,
    pub gradient: Vec<f64>,
}

pub fn aggregate_equality(dim: usize, parts: &[(f64, SparseRow)]) -> EqualityAggregate {
    let mut value = 0.0;
    let mut gradient = vec![0.0; dim];
    for (residual, grad) in parts {
        value += residual * residual;
        grad.add_scaled_into(1.0, &mut gradient);
    }
    EqualityAggregate { value, gradient }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CarParams, Model, PendulumParams};
    use crate::traj::TrajLayout;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pendulum() -> Model {
        Model::Pendulum(PendulumParams::default())
    }

    fn random_traj(rng: &mut StdRng, l: TrajLayout, scale: f64) -> Trajectory {
        let data = (0..l.dim()).map(|_| rng.random_range(-scale..scale)).collect();
        Trajectory::from_data(l, data)
    }

    #[test]
    fn consistency_vanishes_on_exact_rollouts() {
        let m = pendulum();
        let l = TrajLayout::new(3, 4, 2);
        let s0 = [0.4, -0.2, 0.1, 0.3];
        let actions = [0.5, -0.5, 0.2, 0.1, 0.0, 0.7];
        let states = m.rollout(&s0, &actions);
        let t = Trajectory::from_parts(l, &states, &actions);
        for k in 0..3 {
            let (res, grad) = dyn_consistency(&t, &m, k);
            assert_abs_diff_eq!(res, 0.0, epsilon = 1e-12);
            for (_, seg) in &grad.segments {
                for &v in seg {
                    assert_abs_diff_eq!(v, 0.0, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn consistency_at_equilibrium_is_zero() {
        let m = pendulum();
        let l = TrajLayout::new(1, 4, 2);
        let pi = core::f64::consts::PI;
        let t = Trajectory::from_parts(l, &[pi, pi, 0.0, 0.0, pi, pi, 0.0, 0.0], &[0.0, 0.0]);
        let (res, _) = dyn_consistency(&t, &m, 0);
        assert_abs_diff_eq!(res, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn consistency_perturbation_matches_epsilon() {
        let m = pendulum();
        let l = TrajLayout::new(2, 4, 2);
        let s0 = [0.1, 0.2, -0.1, 0.0];
        let actions = [0.3, 0.1, -0.2, 0.4];
        let states = m.rollout(&s0, &actions);
        let mut t = Trajectory::from_parts(l, &states, &actions);
        let eps = 1e-3;
        t.state_mut(1)[0] += eps;
        let (res, _) = dyn_consistency(&t, &m, 0);
        assert_abs_diff_eq!(res, eps, epsilon = 1e-12);
    }

    /// Central finite differences of a scalar trajectory function.
    fn fd_gradient(
        t: &Trajectory,
        f: &mut dyn FnMut(&Trajectory) -> f64,
        step: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; t.layout.dim()];
        let mut work = t.clone();
        for i in 0..t.layout.dim() {
            work.data[i] = t.data[i] + step;
            let plus = f(&work);
            work.data[i] = t.data[i] - step;
            let minus = f(&work);
            work.data[i] = t.data[i];
            g[i] = (plus - minus) / (2.0 * step);
        }
        g
    }

    fn assert_grad_close(dense: &[f64], sparse: &SparseRow, dim: usize, tol: f64) {
        let mut expanded = vec![0.0; dim];
        sparse.add_scaled_into(1.0, &mut expanded);
        for i in 0..dim {
            let scale = dense[i].abs().max(1.0);
            assert!(
                (dense[i] - expanded[i]).abs() / scale <= tol,
                "coord {i}: fd {} vs analytic {}",
                dense[i],
                expanded[i]
            );
        }
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let m = pendulum();
        let l = TrajLayout::new(2, 4, 2);
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..100 {
            let t = random_traj(&mut rng, l, 1.0);
            let k = rng.random_range(0..2);
            let (_, grad) = dyn_consistency(&t, &m, k);
            let fd = fd_gradient(
                &t,
                &mut |tt| {
                    let (r, _) = dyn_consistency(tt, &m, k);
                    r * r
                },
                1e-6,
            );
            assert_grad_close(&fd, &grad, l.dim(), 1e-5);
        }
    }

    #[test]
    fn alignment_examples_and_gradient() {
        let l = TrajLayout::new(1, 3, 1);
        let mut t = Trajectory::zeros(l);
        t.state_mut(0).copy_from_slice(&[1.0, 2.0, 3.0]);
        let (r, _) = initial_alignment(&t, &[1.0, 2.0, 3.0]);
        assert_eq!(r, 0.0);

        let (r, g) = initial_alignment(&t, &[0.0, 2.0, 3.0]);
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-15);
        let mut dense = vec![0.0; l.dim()];
        g.add_scaled_into(1.0, &mut dense);
        assert_eq!(&dense[..3], &[2.0, 0.0, 0.0]);
        assert!(dense[3..].iter().all(|&v| v == 0.0), "supported on s⁰ only");
    }

    #[test]
    fn aggregate_zero_iff_all_parts_zero() {
        let l = TrajLayout::new(2, 4, 2);
        let m = pendulum();
        let s0 = [0.3, -0.3, 0.2, 0.0];
        let actions = [0.1, 0.2, -0.1, 0.3];
        let states = m.rollout(&s0, &actions);
        let t = Trajectory::from_parts(l, &states, &actions);
        let parts: Vec<_> = (0..2)
            .map(|k| dyn_consistency(&t, &m, k))
            .chain(core::iter::once(initial_alignment(&t, &s0)))
            .collect();
        let agg = aggregate_equality(l.dim(), &parts);
        assert_abs_diff_eq!(agg.value, 0.0, epsilon = 1e-20);

        // Any nonzero part makes the aggregate strictly positive.
        let mut t2 = t.clone();
        t2.state_mut(2)[1] += 1e-3;
        let parts2: Vec<_> = (0..2)
            .map(|k| dyn_consistency(&t2, &m, k))
            .chain(core::iter::once(initial_alignment(&t2, &s0)))
            .collect();
        let agg2 = aggregate_equality(l.dim(), &parts2);
        assert!(agg2.value > 0.0);
    }

    #[test]
    fn aggregate_gradient_matches_finite_differences() {
        let m = Model::Car(CarParams::default());
        let l = TrajLayout::new(2, 4, 2);
        let mut rng = StdRng::seed_from_u64(7);
        let s_cur = [0.5, -0.5, 0.2, 1.0];
        for _ in 0..100 {
            let t = random_traj(&mut rng, l, 1.5);
            let mut agg_of = |tt: &Trajectory| {
                let parts: Vec<_> = (0..2)
                    .map(|k| dyn_consistency(tt, &m, k))
                    .chain(core::iter::once(initial_alignment(tt, &s_cur)))
                    .collect();
                aggregate_equality(l.dim(), &parts).value
            };
            let parts: Vec<_> = (0..2)
                .map(|k| dyn_consistency(&t, &m, k))
                .chain(core::iter::once(initial_alignment(&t, &s_cur)))
                .collect();
            let agg = aggregate_equality(l.dim(), &parts);
            let fd = fd_gradient(&t, &mut agg_of, 1e-6);
            for i in 0..l.dim() {
                let scale = fd[i].abs().max(1.0);
                assert!(
                    (fd[i] - agg.gradient[i]).abs() / scale <= 1e-5,
                    "coord {i}: {} vs {}",
                    fd[i],
                    agg.gradient[i]
                );
            }
        }
    }

    fn wall_scene() -> ObstacleSet {
        ObstacleSet {
            ellipses: Vec::new(),
            walls: vec![Wall { normal: [1.0, 0.0], offset: 1.0 }],
            corridor: None,
            safety: SafetyMap::PendulumTip { l1: 1.0, l2: 1.0 },
        }
    }

    #[test]
    fn pendulum_wall_barrier_matches_kinematics() {
        let l = TrajLayout::new(1, 4, 2);
        let mut t = Trajectory::zeros(l);
        let h = core::f64::consts::FRAC_PI_2;
        t.state_mut(0).copy_from_slice(&[h, h, 0.0, 0.0]);
        let b = state_barrier(&t, &wall_scene(), 0);
        // End effector at x = 2; wall clearance x+1 = 3; h = −3.
        assert_abs_diff_eq!(b.residual, -3.0, epsilon = 1e-12);
        assert_eq!(b.tag, BarrierTag::StateStep(0));
    }

    #[test]
    fn ellipse_center_is_maximally_unsafe() {
        let e = Ellipse { center: [2.0, -1.0], axes: [3.0, 0.5], rotation: 0.7 };
        let (d, _) = e.sd_with_grad([2.0, -1.0]);
        // −min semi-axis at the center.
        assert_abs_diff_eq!(d, -0.5, epsilon = 1e-14);
        // On-axis boundary points have zero signed distance.
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let boundary = [2.0 + 3.0 * c, -1.0 + 3.0 * s];
        assert_abs_diff_eq!(e.signed_distance(boundary), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn action_barrier_rows_per_component() {
        let l = TrajLayout::new(1, 4, 2);
        let mut t = Trajectory::zeros(l);
        t.action_mut(0).copy_from_slice(&[30.0, 0.0]);
        let rows = action_barrier(&t, &[30.0, 30.0], 0);
        assert_eq!(rows.len(), 2);
        assert_abs_diff_eq!(rows[0].residual, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[1].residual, -900.0, epsilon = 1e-12);
        assert_eq!(rows[0].tag, BarrierTag::ActionStep { k: 0, component: 0 });

        // Car-style asymmetric bounds: a = [0, π] puts the second row on its
        // boundary.
        t.action_mut(0).copy_from_slice(&[0.0, core::f64::consts::PI]);
        let rows = action_barrier(&t, &[100.0, core::f64::consts::PI], 0);
        assert_abs_diff_eq!(rows[0].residual, -10_000.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[1].residual, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn barrier_gradients_match_finite_differences() {
        let scene = ObstacleSet {
            ellipses: vec![Ellipse { center: [1.0, 0.5], axes: [1.5, 0.7], rotation: 0.4 }],
            walls: vec![Wall { normal: [0.0, 1.0], offset: 3.0 }],
            corridor: Some(strip_corridor()),
            safety: SafetyMap::PlanarPosition { ix: 0, iy: 1 },
        };
        let l = TrajLayout::new(2, 4, 2);
        let mut rng = StdRng::seed_from_u64(17);
        let mut checked = 0;
        for _ in 0..200 {
            let t = random_traj(&mut rng, l, 2.5);
            let k = rng.random_range(0..=2);
            let b = state_barrier(&t, &scene, k);
            // Skip points near a minimizer switch or boundary kink, where
            // one-sided gradients differ legitimately.
            let p = [t.state(k)[0], t.state(k)[1]];
            if near_clearance_tie(&scene, p, 1e-3) {
                continue;
            }
            let fd = fd_gradient(&t, &mut |tt| state_barrier(tt, &scene, k).residual, 1e-7);
            assert_grad_close(&fd, &b.gradient, l.dim(), 1e-5);
            checked += 1;
        }
        assert!(checked > 120, "too many skipped points: {checked}");

        for _ in 0..100 {
            let t = random_traj(&mut rng, l, 2.0);
            let k = rng.random_range(0..2);
            for (i, b) in action_barrier(&t, &[2.0, 3.0], k).into_iter().enumerate() {
                let fd = fd_gradient(
                    &t,
                    &mut |tt| action_barrier(tt, &[2.0, 3.0], k)[i].residual,
                    1e-6,
                );
                assert_grad_close(&fd, &b.gradient, l.dim(), 1e-5);
            }
        }
    }

    /// True when two clearance terms are within `tol` of the minimum, or a
    /// polyline projection sits near a vertex (subgradient events).
    fn near_clearance_tie(scene: &ObstacleSet, p: [f64; 2], tol: f64) -> bool {
        let mut vals = Vec::new();
        for e in &scene.ellipses {
            vals.push(e.signed_distance(p));
        }
        for w in &scene.walls {
            vals.push(w.normal[0] * p[0] + w.normal[1] * p[1] + w.offset);
        }
        if let Some(c) = &scene.corridor {
            let (dl, _) = c.left.signed_distance(p);
            let (dr, _) = c.right.signed_distance(p);
            vals.push(dl);
            vals.push(dr);
            for poly in [&c.left, &c.right] {
                for w in poly.points.windows(2) {
                    let ab = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
                    let ap = [p[0] - w[0][0], p[1] - w[0][1]];
                    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                    let t = (ap[0] * ab[0] + ap[1] * ab[1]) / len2;
                    if (t - 0.0).abs() < tol || (t - 1.0).abs() < tol {
                        return true;
                    }
                }
            }
        }
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        vals.iter().filter(|&&v| v - min < tol).count() > 1
    }

    fn strip_corridor() -> Corridor {
        Corridor {
            left: Polyline { points: vec![[-5.0, 2.0], [5.0, 2.0]], inward: 1.0 },
            right: Polyline { points: vec![[-5.0, -2.0], [5.0, -2.0]], inward: -1.0 },
        }
    }

    #[test]
    fn corridor_distances_positive_inside() {
        let c = strip_corridor();
        let (d, g) = c.clearance([0.0, 0.5]);
        assert_abs_diff_eq!(d, 1.5, epsilon = 1e-12);
        assert_eq!(g, [0.0, -1.0], "closest boundary is the left one at y = 2");
        let (d, _) = c.clearance([0.0, -1.9]);
        assert_abs_diff_eq!(d, 0.1, epsilon = 1e-12);
        let (d, _) = c.clearance([0.0, 2.5]);
        assert_abs_diff_eq!(d, -0.5, epsilon = 1e-12); // outside is negative
    }

    #[test]
    fn safety_sign_matches_membership_oracle_on_grid() {
        let scene = ObstacleSet {
            ellipses: vec![Ellipse { center: [1.0, 0.0], axes: [1.2, 0.6], rotation: 0.5 }],
            walls: Vec::new(),
            corridor: Some(strip_corridor()),
            safety: SafetyMap::PlanarPosition { ix: 0, iy: 1 },
        };
        let l = TrajLayout::new(0, 2, 0);
        // Brute-force membership: inside the strip and outside the ellipse.
        let member = |p: [f64; 2]| -> bool {
            let inside_strip = p[1] < 2.0 && p[1] > -2.0 && (-5.0..5.0).contains(&p[0]);
            let e = &scene.ellipses[0];
            let (s, c) = (0.5f64.sin(), 0.5f64.cos());
            let dx = p[0] - e.center[0];
            let dy = p[1] - e.center[1];
            let bx = c * dx + s * dy;
            let by = -s * dx + c * dy;
            let inside_ellipse =
                bx * bx / (1.2 * 1.2) + by * by / (0.6 * 0.6) < 1.0;
            inside_strip && !inside_ellipse
        };
        for gi in 0..100 {
            for gj in 0..100 {
                // Offsets keep grid points off exact boundaries.
                let p = [
                    -4.9 + 9.8 * gi as f64 / 99.0 + 0.0123,
                    -2.9 + 5.8 * gj as f64 / 99.0 + 0.0071,
                ];
                if p[0] >= 4.99 {
                    continue;
                }
                let mut t = Trajectory::zeros(l);
                t.state_mut(0).copy_from_slice(&p);
                let b = state_barrier(&t, &scene, 0);
                assert_eq!(
                    b.residual <= 0.0,
                    member(p),
                    "sign mismatch at {p:?}: h = {}",
                    b.residual
                );
            }
        }
    }
}
