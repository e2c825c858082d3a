//! Flat trajectory storage with interleaved state/action layout.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

/// Shape of a trajectory: horizon `h` (number of actions), state width
/// `d_s`, action width `d_a`. The flat layout is
/// `[s⁰, a⁰, s¹, a¹, …, s^{H−1}, a^{H−1}, s^H]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrajLayout {
    pub h: usize,
    pub d_s: usize,
    pub d_a: usize,
}

impl TrajLayout {
    pub fn new(h: usize, d_s: usize, d_a: usize) -> Self {
        assert!(d_s > 0, "state dimension must be positive");
        TrajLayout { h, d_s, d_a }
    }

    /// Total flat dimension (H+1)·d_s + H·d_a.
    #[inline]
    pub fn dim(&self) -> usize {
        (self.h + 1) * self.d_s + self.h * self.d_a
    }

    /// Flat range of state k, for k in 0..=H.
    #[inline]
    pub fn state_range(&self, k: usize) -> Range<usize> {
        debug_assert!(k <= self.h);
        let off = k * (self.d_s + self.d_a);
        off..off + self.d_s
    }

    /// Flat range of action k, for k in 0..H.
    #[inline]
    pub fn action_range(&self, k: usize) -> Range<usize> {
        debug_assert!(k < self.h);
        let off = k * (self.d_s + self.d_a) + self.d_s;
        off..off + self.d_a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub layout: TrajLayout,
    pub data: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(layout: TrajLayout) -> Self {
        Trajectory { data: vec![0.0; layout.dim()], layout }
    }

    pub fn from_data(layout: TrajLayout, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), layout.dim(), "trajectory data length mismatch");
        Trajectory { layout, data }
    }

    /// Build from a contiguous (H+1)×d_s state block and H×d_a action block.
    pub fn from_parts(layout: TrajLayout, states: &[f64], actions: &[f64]) -> Self {
        assert_eq!(states.len(), (layout.h + 1) * layout.d_s);
        assert_eq!(actions.len(), layout.h * layout.d_a);
        let mut t = Trajectory::zeros(layout);
        for k in 0..=layout.h {
            t.data[layout.state_range(k)]
                .copy_from_slice(&states[k * layout.d_s..(k + 1) * layout.d_s]);
        }
        for k in 0..layout.h {
            t.data[layout.action_range(k)]
                .copy_from_slice(&actions[k * layout.d_a..(k + 1) * layout.d_a]);
        }
        t
    }

    #[inline]
    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[self.layout.state_range(k)]
    }

    #[inline]
    pub fn state_mut(&mut self, k: usize) -> &mut [f64] {
        let r = self.layout.state_range(k);
        &mut self.data[r]
    }

    #[inline]
    pub fn action(&self, k: usize) -> &[f64] {
        &self.data[self.layout.action_range(k)]
    }

    #[inline]
    pub fn action_mut(&mut self, k: usize) -> &mut [f64] {
        let r = self.layout.action_range(k);
        &mut self.data[r]
    }

    /// Contiguous copy of all states, (H+1)×d_s.
    pub fn states_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity((self.layout.h + 1) * self.layout.d_s);
        for k in 0..=self.layout.h {
            out.extend_from_slice(self.state(k));
        }
        out
    }

    /// Contiguous copy of all actions, H×d_a.
    pub fn actions_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.h * self.layout.d_a);
        for k in 0..self.layout.h {
            out.extend_from_slice(self.action(k));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_ranges_tile_the_flat_vector() {
        let l = TrajLayout::new(3, 4, 2);
        assert_eq!(l.dim(), 4 * 4 + 3 * 2);
        let mut covered = vec![false; l.dim()];
        for k in 0..=3 {
            for i in l.state_range(k) {
                assert!(!covered[i]);
                covered[i] = true;
            }
        }
        for k in 0..3 {
            for i in l.action_range(k) {
                assert!(!covered[i]);
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        assert_eq!(l.state_range(0), 0..4);
        assert_eq!(l.action_range(0), 4..6);
        assert_eq!(l.state_range(1), 6..10);
        assert_eq!(l.state_range(3), 18..22);
    }

    #[test]
    fn from_parts_round_trips() {
        let l = TrajLayout::new(2, 2, 1);
        let states = [0.0, 1.0, 10.0, 11.0, 20.0, 21.0];
        let actions = [5.0, 6.0];
        let t = Trajectory::from_parts(l, &states, &actions);
        assert_eq!(t.data, vec![0.0, 1.0, 5.0, 10.0, 11.0, 6.0, 20.0, 21.0]);
        assert_eq!(t.states_flat(), states.to_vec());
        assert_eq!(t.actions_flat(), actions.to_vec());
        assert_eq!(t.state(1), &[10.0, 11.0]);
        assert_eq!(t.action(1), &[6.0]);
    }
}
