//! Guided flow integration: fixed-step explicit Euler on t ∈ [0, 1−ε_t]
//! followed by one extrapolation step to t = 1.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::field::{FieldError, VelocityField, EPS_T};
use crate::fmath;

/// Default Euler step count for sampling.
pub const DEFAULT_STEPS: usize = 200;

/// A point on the flow: position `x` at flow time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x: Vec<f64>,
}

/// Dense record of an integration run; row ℓ is the state at `ts[ℓ]`.
/// The last row is the snapped t = 1 endpoint.
#[derive(Clone, Debug)]
pub struct Trace {
    pub dim: usize,
    pub ts: Vec<f64>,
    xs: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    /// The t = 1 endpoint.
    pub fn final_x(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OdeError {
    /// A non-finite component appeared after the given Euler step.
    DivergedIntegration { step: usize },
    Field(FieldError),
}

impl From<FieldError> for OdeError {
    fn from(e: FieldError) -> Self {
        OdeError::Field(e)
    }
}

impl core::fmt::Display for OdeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            OdeError::DivergedIntegration { step } => {
                write!(f, "integration diverged at step {step}")
            }
            OdeError::Field(e) => write!(f, "field evaluation failed: {e}"),
        }
    }
}

impl core::error::Error for OdeError {}

/// Integrate ẋ = v(t, x) + u(t, x) from `x0` with `steps` uniform Euler
/// steps on [0, 1−ε_t], then snap to t = 1 with one ε_t-length step using
/// the clamp-time velocity. The velocity closure writes v(t, x) into its
/// output slice; the hook writes the guidance vector into its third argument
/// (pre-zeroed). A no-op hook leaves the flow unguided.
pub fn integrate_with<V, F>(
    dim: usize,
    velocity: &mut V,
    hook: &mut F,
    x0: &[f64],
    steps: usize,
) -> Result<Trace, OdeError>
where
    V: FnMut(f64, &[f64], &mut [f64]) -> Result<(), FieldError> + ?Sized,
    F: FnMut(f64, &[f64], &mut [f64]) + ?Sized,
{
    assert!(steps >= 1, "integration needs at least one step");
    let d = dim;
    assert_eq!(x0.len(), d, "initial state dimension mismatch");

    let t_end = 1.0 - EPS_T;
    let dt = t_end / steps as f64;
    let mut x = x0.to_vec();
    let mut v = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut trace = Trace { dim: d, ts: Vec::with_capacity(steps + 2), xs: Vec::with_capacity((steps + 2) * d) };
    trace.ts.push(0.0);
    trace.xs.extend_from_slice(&x);

    for step in 0..steps {
        let t = step as f64 * dt;
        velocity(t, &x, &mut v)?;
        u.fill(0.0);
        hook(t, &x, &mut u);
        for j in 0..d {
            x[j] += dt * (v[j] + u[j]);
        }
        if !x.iter().all(|c| c.is_finite()) {
            return Err(OdeError::DivergedIntegration { step });
        }
        trace.ts.push((step + 1) as f64 * dt);
        trace.xs.extend_from_slice(&x);
    }

    // Final extrapolation across the singular gap: one Euler step of length
    // ε_t using the velocity and guidance evaluated at the clamp time.
    velocity(t_end, &x, &mut v)?;
    u.fill(0.0);
    hook(t_end, &x, &mut u);
    for j in 0..d {
        x[j] += EPS_T * (v[j] + u[j]);
    }
    if !x.iter().all(|c| c.is_finite()) {
        return Err(OdeError::DivergedIntegration { step: steps });
    }
    trace.ts.push(1.0);
    trace.xs.extend_from_slice(&x);
    Ok(trace)
}

/// Guided integration of a closed-form field.
pub fn integrate<F>(
    field: &VelocityField,
    hook: &mut F,
    x0: &[f64],
    steps: usize,
) -> Result<Trace, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    integrate_with(
        field.dim(),
        &mut |t, x: &[f64], out: &mut [f64]| field.velocity(t, x, out),
        hook,
        x0,
        steps,
    )
}

/// Unguided integration.
pub fn integrate_free(
    field: &VelocityField,
    x0: &[f64],
    steps: usize,
) -> Result<Trace, OdeError> {
    integrate(field, &mut |_t, _x, _u: &mut [f64]| {}, x0, steps)
}

/// Draw x₀ ~ N(0, I_d), resampling outliers with ‖x₀‖ > 6√d so tail draws
/// cannot leave the region where Lipschitz-based guidance bounds hold.
pub fn sample_prior<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let bound = 6.0 * fmath::sqrt(d as f64);
    loop {
        let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm2: f64 = x.iter().map(|&c| c * c).sum();
        if fmath::sqrt(norm2) <= bound {
            return x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn constant_field_translates_exactly() {
        let f = VelocityField::constant(vec![2.0, -3.0]);
        for steps in [1, 7, 200] {
            let tr = integrate_free(&f, &[1.0, 1.0], steps).unwrap();
            let end = tr.final_x();
            assert_abs_diff_eq!(end[0], 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(end[1], -2.0, epsilon = 1e-12);
            assert_eq!(tr.len(), steps + 2);
            assert_eq!(tr.ts[tr.len() - 1], 1.0);
            assert_abs_diff_eq!(tr.ts[tr.len() - 2], 1.0 - EPS_T, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_point_prior_lands_on_target_every_seed() {
        // ẋ = (T−x)/(1−t) has exact solution x_t = (1−t)x₀ + tT, and forward
        // Euler reproduces it exactly on any grid, so after the snap the
        // endpoint is T up to rounding.
        let target = vec![0.7, -1.9, 3.3];
        let f = VelocityField::empirical(target.clone(), 3).unwrap();
        for seed in 0..20 {
            let mut rng = StdRng::seed_from_u64(seed);
            let x0 = sample_prior(&mut rng, 3);
            let tr = integrate_free(&f, &x0, DEFAULT_STEPS).unwrap();
            let end = tr.final_x();
            for j in 0..3 {
                assert!(
                    (end[j] - target[j]).abs() < 1e-6,
                    "seed {seed} coord {j}: {} vs {}",
                    end[j],
                    target[j]
                );
            }
        }
    }

    #[test]
    fn cancelling_hook_freezes_the_state() {
        let points = vec![1.0, 2.0, -1.0, 0.5];
        let f = VelocityField::empirical(points, 2).unwrap();
        let fc = f.clone();
        let mut hook = move |t: f64, x: &[f64], u: &mut [f64]| {
            let mut v = [0.0; 2];
            fc.velocity(t, x, &mut v).unwrap();
            u[0] = -v[0];
            u[1] = -v[1];
        };
        let x0 = [0.25, -0.75];
        let tr = integrate(&f, &mut hook, &x0, 50).unwrap();
        let end = tr.final_x();
        assert_abs_diff_eq!(end[0], x0[0], epsilon = 1e-12);
        assert_abs_diff_eq!(end[1], x0[1], epsilon = 1e-12);
    }

    #[test]
    fn constant_guidance_equals_shifted_field_on_same_grid() {
        // Linearity: folding a piecewise-constant u into the field and
        // integrating unguided gives bitwise-identical updates.
        let points = vec![2.0, 0.0, 0.0, 2.0, -2.0, -2.0];
        let f = VelocityField::empirical(points.clone(), 2).unwrap();
        let u0 = [0.4, -0.9];
        let mut hook = |_t: f64, _x: &[f64], u: &mut [f64]| {
            u[0] = u0[0];
            u[1] = u0[1];
        };
        let x0 = [0.1, 0.2];
        let steps = 64;
        let guided = integrate(&f, &mut hook, &x0, steps).unwrap();

        // Reference: manual Euler over the combined field v + u₀.
        let t_end = 1.0 - EPS_T;
        let dt = t_end / steps as f64;
        let mut x = x0.to_vec();
        let mut v = [0.0; 2];
        for step in 0..steps {
            f.velocity(step as f64 * dt, &x, &mut v).unwrap();
            for j in 0..2 {
                x[j] += dt * (v[j] + u0[j]);
            }
        }
        f.velocity(t_end, &x, &mut v).unwrap();
        for j in 0..2 {
            x[j] += EPS_T * (v[j] + u0[j]);
        }
        assert_eq!(guided.final_x(), &x[..], "grids must produce identical floats");
    }

    #[test]
    fn guided_and_unguided_traces_coincide_for_zero_hook() {
        let f = VelocityField::empirical(vec![1.0, -1.0], 1).unwrap();
        let a = integrate_free(&f, &[0.3], 33).unwrap();
        let b = integrate(&f, &mut |_t, _x, _u: &mut [f64]| {}, &[0.3], 33).unwrap();
        assert_eq!(a.ts, b.ts);
        for i in 0..a.len() {
            assert_eq!(a.state(i), b.state(i));
        }
    }

    #[test]
    fn divergence_is_reported_with_step_index() {
        let f = VelocityField::constant(vec![f64::INFINITY]);
        let err = integrate_free(&f, &[0.0], 10).unwrap_err();
        assert_eq!(err, OdeError::DivergedIntegration { step: 0 });
    }

    #[test]
    fn prior_samples_respect_outlier_bound() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..500 {
            let x = sample_prior(&mut rng, 8);
            let n: f64 = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!(n <= 6.0 * (8.0f64).sqrt());
        }
    }

    #[test]
    fn trace_times_are_strictly_increasing() {
        let f = VelocityField::constant(vec![1.0]);
        let tr = integrate_free(&f, &[0.0], 17).unwrap();
        for w in tr.ts.windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}
