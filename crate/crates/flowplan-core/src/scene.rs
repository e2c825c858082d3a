//! Benchmark scene library: each scene bundles a dynamics model, obstacle
//! geometry, action bounds, a nominal initial state with its randomization
//! spread, and the cost weights used for dataset synthesis and scoring.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::constraints::{Corridor, Ellipse, ObstacleSet, Polyline, SafetyMap, Wall};
use crate::dynamics::{CarParams, Model, PendulumParams};
use crate::field::VelocityField;
use crate::fmath;
use crate::traj::TrajLayout;

/// Stage-cost weights used by dataset synthesis and the report's cost
/// column. Numbers are comparable within a scene, not across scenes.
#[derive(Clone, Debug, PartialEq)]
pub enum CostSpec {
    /// Σ_k (s−goal)ᵀQ(s−goal) + aᵀRa with diagonal weights, terminal state
    /// included in the state sum.
    QuadraticGoal { q: Vec<f64>, r: Vec<f64> },
    /// Corridor driving: centerline tracking + speed regulation + control
    /// effort and smoothness.
    PathFollowing { w_ctrl: f64, w_smooth: f64, w_speed: f64, v_ref: f64, w_center: f64 },
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub name: &'static str,
    pub model: Model,
    pub horizon: usize,
    /// Nominal current state; trials perturb it inside `init_spread`.
    pub s_cur: Vec<f64>,
    /// Per-coordinate uniform half-width for initial-state randomization.
    pub init_spread: Vec<f64>,
    pub obstacles: Option<ObstacleSet>,
    pub action_bounds: Option<Vec<f64>>,
    pub goal: Option<Vec<f64>>,
    pub cost: CostSpec,
}

impl Scene {
    pub fn layout(&self) -> TrajLayout {
        TrajLayout::new(self.horizon, self.model.d_s(), self.model.d_a())
    }

    /// Clearance of a raw state against the scene obstacles (positive when
    /// safe); +∞ when the scene has no obstacle set.
    pub fn state_clearance(&self, s: &[f64]) -> f64 {
        match &self.obstacles {
            Some(obs) => {
                let (p, _) = obs.safety.point(s);
                obs.clearance(p).0
            }
            None => f64::INFINITY,
        }
    }

    /// Draw an initial state uniformly inside the spread box around the
    /// nominal state, resampling until it clears the obstacles.
    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        assert_eq!(self.init_spread.len(), self.s_cur.len());
        for _ in 0..200 {
            let s: Vec<f64> = self
                .s_cur
                .iter()
                .zip(&self.init_spread)
                .map(|(&c, &w)| if w > 0.0 { c + rng.random_range(-w..w) } else { c })
                .collect();
            if self.state_clearance(&s) > 0.0 {
                return s;
            }
        }
        panic!("scene {}: could not sample a safe initial state", self.name);
    }
}

/// Double-pendulum stabilization scene: keep the two-link arm near the
/// upright equilibrium without letting the end effector cross the wall at
/// x = −1, under symmetric torque bounds of 30.
pub fn pendulum2() -> Scene {
    let params = PendulumParams::default();
    let pi = core::f64::consts::PI;
    let scene = Scene {
        name: "pendulum2",
        model: Model::Pendulum(params),
        horizon: 16,
        s_cur: vec![pi, pi, 0.0, 0.0],
        init_spread: vec![0.2, 0.2, 0.3, 0.3],
        obstacles: Some(ObstacleSet {
            ellipses: Vec::new(),
            walls: vec![Wall { normal: [1.0, 0.0], offset: 1.0 }],
            corridor: None,
            safety: SafetyMap::PendulumTip { l1: params.l1, l2: params.l2 },
        }),
        action_bounds: Some(vec![30.0, 30.0]),
        goal: Some(vec![pi, pi, 0.0, 0.0]),
        cost: CostSpec::QuadraticGoal {
            q: vec![10.0, 10.0, 1.0, 1.0],
            r: vec![0.1, 0.1],
        },
    };
    debug_assert!(scene.state_clearance(&scene.s_cur) > 0.0);
    scene
}

/// Centerline of the synthetic S-corridor: y and dy/dx as functions of x,
/// one full sine period over x ∈ [−40, 40] with 3 m amplitude.
pub fn car_centerline(x: f64) -> (f64, f64) {
    let k = core::f64::consts::PI / 40.0;
    let phase = k * (x + 40.0);
    (3.0 * fmath::sin(phase), 3.0 * k * fmath::cos(phase))
}

/// Kinematic-car corridor scene: follow an 80 m S-shaped corridor of 8 m
/// width while weaving around three elliptical obstacles placed alternately
/// off the centerline.
pub fn car_kin() -> Scene {
    let params = CarParams::default();
    let mut left = Vec::new();
    let mut right = Vec::new();
    let n = 33;
    for i in 0..n {
        let x = -40.0 + 80.0 * i as f64 / (n - 1) as f64;
        let (yc, _) = car_centerline(x);
        left.push([x, yc + 4.0]);
        right.push([x, yc - 4.0]);
    }
    let mut ellipses = Vec::new();
    for &(ox, side) in &[(-20.0, 1.5), (0.0, -1.5), (20.0, -4.5 + 3.0)] {
        let (yc, slope) = car_centerline(ox);
        ellipses.push(Ellipse {
            center: [ox, yc + side],
            axes: [2.0, 1.0],
            rotation: fmath::atan2(slope, 1.0),
        });
    }
    let x0 = -38.0;
    let (y0, slope0) = car_centerline(x0);
    let scene = Scene {
        name: "car_kin",
        model: Model::Car(params),
        horizon: 100,
        s_cur: vec![x0, y0, fmath::atan2(slope0, 1.0), 5.0],
        init_spread: vec![0.5, 0.3, 0.05, 0.3],
        obstacles: Some(ObstacleSet {
            ellipses,
            walls: Vec::new(),
            corridor: Some(Corridor {
                left: Polyline { points: left, inward: 1.0 },
                right: Polyline { points: right, inward: -1.0 },
            }),
            safety: SafetyMap::PlanarPosition { ix: 0, iy: 1 },
        }),
        action_bounds: Some(vec![100.0, core::f64::consts::PI]),
        goal: None,
        cost: CostSpec::PathFollowing {
            w_ctrl: 1e-3,
            w_smooth: 5e-2,
            w_speed: 0.1,
            v_ref: 5.0,
            w_center: 0.5,
        },
    };
    debug_assert!(scene.state_clearance(&scene.s_cur) > 1.0);
    scene
}

/// Planar single-point toy problem: a two-component Gaussian-mixture prior
/// whose means sit on the target line outside the ellipse; the planner must
/// land exactly on the line while staying out of the ellipse.
#[derive(Clone, Debug)]
pub struct Toy2d {
    pub field: VelocityField,
    pub ellipse: Ellipse,
    /// Equality: (normal·p − offset)² must vanish.
    pub line_normal: [f64; 2],
    pub line_offset: f64,
}

impl Toy2d {
    /// Equality aggregate value and gradient at a point.
    pub fn equality(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let r = self.line_normal[0] * p[0] + self.line_normal[1] * p[1] - self.line_offset;
        (r * r, vec![2.0 * r * self.line_normal[0], 2.0 * r * self.line_normal[1]])
    }

    /// Barrier h = −sd(p) ≤ 0 outside the ellipse, with gradient.
    pub fn barrier(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (sd, g) = self.ellipse.sd_with_grad([p[0], p[1]]);
        (-sd, vec![-g[0], -g[1]])
    }
}

pub fn toy2d() -> Toy2d {
    let field = VelocityField::gaussian_mixture(
        vec![0.5, 0.5],
        vec![-3.0, 1.0, 3.0, 1.0],
        vec![0.4, 0.4],
        2,
    )
    .expect("valid mixture");
    Toy2d {
        field,
        ellipse: Ellipse { center: [0.0, 1.0], axes: [1.0, 0.6], rotation: 0.0 },
        line_normal: [0.0, 1.0],
        line_offset: 1.0,
    }
}
