//! Cubic B-spline compression for trajectory channels.
//!
//! A channel (one scalar signal sampled uniformly on [0, 1]) is encoded as
//! the control points of a clamped uniform cubic B-spline by least squares,
//! and decoded by evaluating the spline back on a uniform grid. Clamped
//! cubic splines reproduce polynomials up to degree three exactly, so the
//! codec is lossless on constant and cubic channels and accurate to the
//! spline approximation error otherwise.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Codec for one scalar channel: degree-3 spline with `n_ctrl` control
/// points on a clamped uniform knot vector over [0, 1].
#[derive(Clone, Debug)]
pub struct SplineCodec {
    n_ctrl: usize,
}

const DEGREE: usize = 3;

impl SplineCodec {
    /// A cubic needs at least degree+1 control points.
    pub fn new(n_ctrl: usize) -> Self {
        assert!(n_ctrl > DEGREE, "cubic spline needs at least 4 control points");
        SplineCodec { n_ctrl }
    }

    pub fn n_ctrl(&self) -> usize {
        self.n_ctrl
    }

    /// Knot j of the clamped uniform vector: p+1 zeros, uniform interior,
    /// p+1 ones. Total n_ctrl + DEGREE + 1 knots.
    fn knot(&self, j: usize) -> f64 {
        let spans = (self.n_ctrl - DEGREE) as f64;
        if j <= DEGREE {
            0.0
        } else if j >= self.n_ctrl {
            1.0
        } else {
            (j - DEGREE) as f64 / spans
        }
    }

    /// Index i of the knot span with knot(i) <= t < knot(i+1), clamped so
    /// that t = 1 falls in the last non-degenerate span.
    fn span(&self, t: f64) -> usize {
        let spans = self.n_ctrl - DEGREE;
        let raw = (t * spans as f64) as usize;
        DEGREE + raw.min(spans - 1)
    }

    /// The four basis functions that are non-zero at t, together with the
    /// index of the first: returns (i, N) so that basis i-3+r has value N[r].
    fn basis4(&self, t: f64) -> (usize, [f64; 4]) {
        let i = self.span(t);
        let mut n = [0.0; 4];
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = t - self.knot(i + 1 - j);
            right[j] = self.knot(i + j) - t;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        (i, n)
    }

    /// Evaluate the spline with the given control points at t in [0, 1].
    pub fn eval(&self, ctrl: &[f64], t: f64) -> f64 {
        assert_eq!(ctrl.len(), self.n_ctrl);
        let (i, n) = self.basis4(t);
        let mut acc = 0.0;
        for r in 0..=DEGREE {
            acc += n[r] * ctrl[i - DEGREE + r];
        }
        acc
    }

    /// Least-squares fit of the control points to `samples` assumed uniform
    /// on [0, 1]. Needs at least as many samples as control points.
    pub fn encode(&self, samples: &[f64]) -> Vec<f64> {
        let n = samples.len();
        assert!(n >= self.n_ctrl, "underdetermined fit: fewer samples than control points");
        let c = self.n_ctrl;
        let mut b = DMatrix::<f64>::zeros(n, c);
        for (row, _) in samples.iter().enumerate() {
            let t = if n == 1 { 0.0 } else { row as f64 / (n - 1) as f64 };
            let (i, basis) = self.basis4(t);
            for r in 0..=DEGREE {
                b[(row, i - DEGREE + r)] = basis[r];
            }
        }
        let y = DVector::from_column_slice(samples);
        let gram = b.transpose() * &b;
        let rhs = b.transpose() * y;
        let chol = Cholesky::new(gram).expect("spline normal equations are SPD");
        chol.solve(&rhs).iter().copied().collect()
    }

    /// Evaluate the control points back onto a uniform grid of `n_samples`.
    pub fn decode(&self, ctrl: &[f64], n_samples: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_samples];
        for (row, slot) in out.iter_mut().enumerate() {
            let t = if n_samples == 1 { 0.0 } else { row as f64 / (n_samples - 1) as f64 };
            *slot = self.eval(ctrl, t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_a_partition_of_unity() {
        let codec = SplineCodec::new(9);
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            let (span, n) = codec.basis4(t);
            let mut sum = 0.0;
            for r in 0..4 {
                assert!(n[r] >= -1e-12 && n[r] <= 1.0 + 1e-12, "basis out of range at t={t}");
                sum += n[r];
            }
            assert!((sum - 1.0).abs() < 1e-12, "partition of unity fails at t={t}");
            assert!(span >= DEGREE && span < codec.n_ctrl);
        }
    }

    #[test]
    fn constant_channel_round_trips_exactly() {
        let codec = SplineCodec::new(8);
        let samples = vec![0.7; 50];
        let ctrl = codec.encode(&samples);
        // Partition of unity forces every control point to the constant.
        for c in &ctrl {
            assert!((c - 0.7).abs() < 1e-9);
        }
        let back = codec.decode(&ctrl, 50);
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cubic_polynomial_round_trips_exactly() {
        let codec = SplineCodec::new(10);
        let n = 120;
        let poly = |t: f64| 0.3 - 1.2 * t + 0.8 * t * t + 2.0 * t * t * t;
        let samples: Vec<f64> = (0..n).map(|i| poly(i as f64 / (n - 1) as f64)).collect();
        let ctrl = codec.encode(&samples);
        let back = codec.decode(&ctrl, n);
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10, "cubic reproduction error {:.2e}", (a - b).abs());
        }
    }

    #[test]
    fn sine_channel_fits_within_tolerance() {
        let codec = SplineCodec::new(32);
        let n = 1000;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                libm::sin(core::f64::consts::TAU * 3.0 * t)
            })
            .collect();
        let ctrl = codec.encode(&samples);
        let back = codec.decode(&ctrl, n);
        let max_err = samples
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_err <= 1e-3, "sine reconstruction error {max_err:.2e}");
    }

    #[test]
    fn decode_grid_size_is_independent_of_encode_grid() {
        let codec = SplineCodec::new(6);
        let samples: Vec<f64> = (0..40).map(|i| (i as f64 * 0.13).sin()).collect();
        let ctrl = codec.encode(&samples);
        assert_eq!(ctrl.len(), 6);
        assert_eq!(codec.decode(&ctrl, 17).len(), 17);
        assert_eq!(codec.decode(&ctrl, 1).len(), 1);
    }
}
