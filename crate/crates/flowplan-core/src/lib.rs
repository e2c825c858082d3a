//! Constrained trajectory generation by guided flow matching.
//!
//! The crate builds trajectories by integrating a closed-form velocity field
//! from Gaussian noise to a data distribution while a per-step quadratic
//! program injects the smallest guidance correction that keeps equality
//! residuals (dynamics consistency, initial alignment) and inequality
//! residuals (obstacle clearance, action bounds) on prescribed-time zeroing
//! schedules. A window-based cross-entropy refinement pass then replaces the
//! sampled states with exact rollouts of the optimized actions.
//!
//! The crate is `no_std`-compatible (`alloc` required); file formats and the
//! command-line front end live in the companion `flowplan-cli` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod constraints;
pub mod dynamics;
pub mod field;
pub mod guidance;
pub mod metrics;
pub mod ode;
pub mod planner;
pub mod ptzf;
pub mod refine;
pub mod scene;
pub mod spline;
pub mod traj;

pub mod linalg;

mod fmath;
