//! Continuous dynamics models, their fixed-step RK4 discretization, and
//! forward-mode Jacobians of the discrete step map.
//!
//! The same right-hand side code serves plain evaluation and differentiation:
//! it is generic over a [`Real`] scalar, instantiated with `f64` for values
//! and with [`Dual`] numbers for Jacobians, so the derivative always matches
//! the integrator actually used.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::linalg::Mat;

/// Largest state dimension supported by the stack-allocated integrator.
pub const MAX_STATE: usize = 8;
/// Tangent lanes carried by the Jacobian pass; requires d_s + d_a ≤ 8.
const JAC_LANES: usize = 8;
/// Integration sub-step cap in seconds.
pub const MAX_SUBSTEP: f64 = 1e-3;

/// Scalar abstraction for dynamics right-hand sides.
pub trait Real:
    Copy
    + core::ops::Add<Output = Self>
    + core::ops::Sub<Output = Self>
    + core::ops::Mul<Output = Self>
    + core::ops::Div<Output = Self>
    + core::ops::Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn value(self) -> f64;
    /// Multiply by a plain constant.
    fn scale(self, k: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn sin_cos(self) -> (Self, Self);
}

impl Real for f64 {
    #[inline(always)]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn value(self) -> f64 {
        self
    }
    #[inline(always)]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline(always)]
    fn sin(self) -> Self {
        fmath::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        fmath::cos(self)
    }
    #[inline(always)]
    fn tan(self) -> Self {
        fmath::tan(self)
    }
    #[inline(always)]
    fn sin_cos(self) -> (Self, Self) {
        fmath::sin_cos(self)
    }
}

/// Forward-mode dual number carrying `N` tangent lanes.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub dx: [f64; N],
}

impl<const N: usize> Dual<N> {
    /// Independent variable seeded in lane `lane`.
    #[inline]
    pub fn var(x: f64, lane: usize) -> Self {
        let mut dx = [0.0; N];
        dx[lane] = 1.0;
        Dual { re: x, dx }
    }
}

impl<const N: usize> core::ops::Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut dx = self.dx;
        for i in 0..N {
            dx[i] += o.dx[i];
        }
        Dual { re: self.re + o.re, dx }
    }
}

impl<const N: usize> core::ops::Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut dx = self.dx;
        for i in 0..N {
            dx[i] -= o.dx[i];
        }
        Dual { re: self.re - o.re, dx }
    }
}

impl<const N: usize> core::ops::Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = self.dx[i] * o.re + self.re * o.dx[i];
        }
        Dual { re: self.re * o.re, dx }
    }
}

impl<const N: usize> core::ops::Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = (self.dx[i] - q * o.dx[i]) / o.re;
        }
        Dual { re: q, dx }
    }
}

impl<const N: usize> core::ops::Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut dx = self.dx;
        for i in 0..N {
            dx[i] = -dx[i];
        }
        Dual { re: -self.re, dx }
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn cst(x: f64) -> Self {
        Dual { re: x, dx: [0.0; N] }
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        let mut dx = self.dx;
        for i in 0..N {
            dx[i] *= k;
        }
        Dual { re: self.re * k, dx }
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = fmath::sin_cos(self.re);
        let mut dx = self.dx;
        for i in 0..N {
            dx[i] *= c;
        }
        Dual { re: s, dx }
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = fmath::sin_cos(self.re);
        let mut dx = self.dx;
        for i in 0..N {
            dx[i] *= -s;
        }
        Dual { re: c, dx }
    }
    #[inline]
    fn tan(self) -> Self {
        let t = fmath::tan(self.re);
        let sec2 = 1.0 + t * t;
        let mut dx = self.dx;
        for i in 0..N {
            dx[i] *= sec2;
        }
        Dual { re: t, dx }
    }
    #[inline]
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = fmath::sin_cos(self.re);
        let mut ds = self.dx;
        let mut dc = self.dx;
        for i in 0..N {
            ds[i] *= c;
            dc[i] *= -s;
        }
        (Dual { re: s, dx: ds }, Dual { re: c, dx: dc })
    }
}

/// Double pendulum on absolute joint angles measured from the downward
/// vertical; state [q₁, q₂, ω₁, ω₂], action = joint torques.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub gravity: f64,
    /// Discrete step length in seconds.
    pub dt: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams { m1: 1.0, m2: 1.0, l1: 1.0, l2: 1.0, gravity: 9.8, dt: 0.1 }
    }
}

impl PendulumParams {
    /// Horizontal end-effector coordinate.
    pub fn end_effector_x(&self, s: &[f64]) -> f64 {
        self.l1 * fmath::sin(s[0]) + self.l2 * fmath::sin(s[1])
    }

    /// Total mechanical energy (kinetic + potential, zero at rest hanging
    /// configuration minus the constant offset).
    pub fn energy(&self, s: &[f64]) -> f64 {
        let (q1, q2, w1, w2) = (s[0], s[1], s[2], s[3]);
        let m11 = (self.m1 + self.m2) * self.l1 * self.l1;
        let m12 = self.m2 * self.l1 * self.l2 * fmath::cos(q2 - q1);
        let m22 = self.m2 * self.l2 * self.l2;
        let kinetic = 0.5 * (m11 * w1 * w1 + 2.0 * m12 * w1 * w2 + m22 * w2 * w2);
        let potential = -(self.m1 + self.m2) * self.gravity * self.l1 * fmath::cos(q1)
            - self.m2 * self.gravity * self.l2 * fmath::cos(q2);
        kinetic + potential
    }
}

/// Kinematic single-track car; state [x, y, θ, v], action [δ, τ]
/// (steering angle, longitudinal acceleration).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarParams {
    pub wheelbase: f64,
    /// Discrete step length in seconds.
    pub dt: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        CarParams { wheelbase: 2.7, dt: 0.1 }
    }
}

/// Affine test model ṡ = A s + B a + c.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub d_s: usize,
    pub d_a: usize,
    /// Row-major d_s×d_s.
    pub a: Vec<f64>,
    /// Row-major d_s×d_a.
    pub b: Vec<f64>,
    /// Drift, length d_s.
    pub c: Vec<f64>,
    pub dt: f64,
}

impl LinearModel {
    pub fn new(d_s: usize, d_a: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, dt: f64) -> Self {
        assert_eq!(a.len(), d_s * d_s);
        assert_eq!(b.len(), d_s * d_a);
        assert_eq!(c.len(), d_s);
        LinearModel { d_s, d_a, a, b, c, dt }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Pendulum(PendulumParams),
    Car(CarParams),
    Linear(LinearModel),
}

impl Model {
    pub fn d_s(&self) -> usize {
        match self {
            Model::Pendulum(_) | Model::Car(_) => 4,
            Model::Linear(m) => m.d_s,
        }
    }

    pub fn d_a(&self) -> usize {
        match self {
            Model::Pendulum(_) | Model::Car(_) => 2,
            Model::Linear(m) => m.d_a,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Model::Pendulum(p) => p.dt,
            Model::Car(p) => p.dt,
            Model::Linear(m) => m.dt,
        }
    }

    /// Continuous-time state derivative, generic over the scalar type.
    pub fn deriv<T: Real>(&self, s: &[T], a: &[T], out: &mut [T]) {
        match self {
            Model::Pendulum(p) => {
                let (q1, q2, w1, w2) = (s[0], s[1], s[2], s[3]);
                let (s21, c21) = (q2 - q1).sin_cos();
                let m11 = (p.m1 + p.m2) * p.l1 * p.l1;
                let m22 = p.m2 * p.l2 * p.l2;
                let m2l1l2 = p.m2 * p.l1 * p.l2;
                let m12 = c21.scale(m2l1l2);
                // Coriolis/centrifugal vector of the absolute-angle two-link
                // chain; this is the unique form under which Mω̇+C+g = a is
                // energy-consistent.
                let cor1 = -(w2 * w2 * s21).scale(m2l1l2);
                let cor2 = (w1 * w1 * s21).scale(m2l1l2);
                let g1 = q1.sin().scale((p.m1 + p.m2) * p.gravity * p.l1);
                let g2 = q2.sin().scale(p.m2 * p.gravity * p.l2);
                let r1 = a[0] - cor1 - g1;
                let r2 = a[1] - cor2 - g2;
                // Solve the 2×2 system M ω̇ = r in closed form.
                let det = T::cst(m11 * m22) - m12 * m12;
                out[0] = w1;
                out[1] = w2;
                out[2] = (r1.scale(m22) - m12 * r2) / det;
                out[3] = (r2.scale(m11) - m12 * r1) / det;
            }
            Model::Car(p) => {
                let (theta, v) = (s[2], s[3]);
                let (delta, tau) = (a[0], a[1]);
                let (st, ct) = theta.sin_cos();
                out[0] = v * ct;
                out[1] = v * st;
                out[2] = (v * delta.tan()).scale(1.0 / p.wheelbase);
                out[3] = tau;
            }
            Model::Linear(m) => {
                for i in 0..m.d_s {
                    let mut acc = T::cst(m.c[i]);
                    for j in 0..m.d_s {
                        acc = acc + s[j].scale(m.a[i * m.d_s + j]);
                    }
                    for k in 0..m.d_a {
                        acc = acc + a[k].scale(m.b[i * m.d_a + k]);
                    }
                    out[i] = acc;
                }
            }
        }
    }

    fn substeps(&self) -> usize {
        let n = fmath::ceil(self.dt() / MAX_SUBSTEP) as usize;
        n.max(1)
    }

    /// One zero-order-hold step of length `dt()` via `n_sub` RK4 sub-steps.
    pub fn step_rk4<T: Real>(&self, s: &[T], a: &[T], n_sub: usize, out: &mut [T]) {
        let d = self.d_s();
        assert!(d <= MAX_STATE, "state dimension exceeds MAX_STATE");
        let h = self.dt() / n_sub as f64;
        let zero = T::cst(0.0);
        let mut x = [zero; MAX_STATE];
        x[..d].copy_from_slice(s);
        let mut k1 = [zero; MAX_STATE];
        let mut k2 = [zero; MAX_STATE];
        let mut k3 = [zero; MAX_STATE];
        let mut k4 = [zero; MAX_STATE];
        let mut tmp = [zero; MAX_STATE];
        for _ in 0..n_sub {
            self.deriv(&x[..d], a, &mut k1[..d]);
            for i in 0..d {
                tmp[i] = x[i] + k1[i].scale(0.5 * h);
            }
            self.deriv(&tmp[..d], a, &mut k2[..d]);
            for i in 0..d {
                tmp[i] = x[i] + k2[i].scale(0.5 * h);
            }
            self.deriv(&tmp[..d], a, &mut k3[..d]);
            for i in 0..d {
                tmp[i] = x[i] + k3[i].scale(h);
            }
            self.deriv(&tmp[..d], a, &mut k4[..d]);
            for i in 0..d {
                x[i] = x[i]
                    + (k1[i] + k2[i].scale(2.0) + k3[i].scale(2.0) + k4[i]).scale(h / 6.0);
            }
        }
        out.copy_from_slice(&x[..d]);
    }

    /// Discrete step map s^{k+1} = f(s^k, a^k): RK4 with sub-steps capped at
    /// [`MAX_SUBSTEP`]. Deterministic for identical inputs.
    pub fn discretize(&self, s: &[f64], a: &[f64], out: &mut [f64]) {
        self.step_rk4(s, a, self.substeps(), out);
    }

    /// Coarse variant for sampling-based search inner loops; `n_sub` chosen by
    /// the caller trades accuracy for speed.
    pub fn discretize_coarse(&self, s: &[f64], a: &[f64], n_sub: usize, out: &mut [f64]) {
        self.step_rk4(s, a, n_sub, out);
    }

    /// Jacobians (∂f/∂s, ∂f/∂a) of the discrete step map, computed by
    /// forward-mode duals pushed through the same RK4 path as `discretize`.
    pub fn jacobians(&self, s: &[f64], a: &[f64]) -> (Mat, Mat) {
        let (ds, da) = (self.d_s(), self.d_a());
        assert!(ds + da <= JAC_LANES, "model too wide for the dual-number pass");
        let zero = Dual::<JAC_LANES>::cst(0.0);
        let mut sv = [zero; MAX_STATE];
        let mut av = [zero; MAX_STATE];
        for i in 0..ds {
            sv[i] = Dual::var(s[i], i);
        }
        for k in 0..da {
            av[k] = Dual::var(a[k], ds + k);
        }
        let mut out = [zero; MAX_STATE];
        self.step_rk4(&sv[..ds], &av[..da], self.substeps(), &mut out[..ds]);
        let mut js = Mat::zeros(ds, ds);
        let mut ja = Mat::zeros(ds, da);
        for r in 0..ds {
            for c in 0..ds {
                *js.at_mut(r, c) = out[r].dx[c];
            }
            for c in 0..da {
                *ja.at_mut(r, c) = out[r].dx[ds + c];
            }
        }
        (js, ja)
    }

    /// Chain the step map over a flat action sequence (H×d_a), returning the
    /// (H+1)×d_s state sequence starting at `s0`.
    pub fn rollout(&self, s0: &[f64], actions: &[f64]) -> Vec<f64> {
        let (ds, da) = (self.d_s(), self.d_a());
        assert_eq!(s0.len(), ds);
        assert_eq!(actions.len() % da, 0);
        let h = actions.len() / da;
        let mut states = vec![0.0; (h + 1) * ds];
        states[..ds].copy_from_slice(s0);
        for k in 0..h {
            let (head, tail) = states.split_at_mut((k + 1) * ds);
            self.discretize(&head[k * ds..], &actions[k * da..(k + 1) * da], &mut tail[..ds]);
        }
        states
    }
}
