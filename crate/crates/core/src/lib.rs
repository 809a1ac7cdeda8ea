//! Numerical engine for mean-field control and mean-field games driven by
//! Brownian idiosyncratic noise and a finite-intensity Poissonian common
//! noise.
//!
//! The organizing idea is pathwise decomposition: freeze one realization of
//! the common jump path, solve the resulting deterministic-jump problem
//! between consecutive jumps, apply the jump map at each event, concatenate
//! the pieces, and integrate quantities of interest over sampled jump paths.
//! A verification suite turns the structural identities this rests on
//! (flow/path-measure superposition, pathwise value decomposition, strict
//! versus relaxed controls, per-jump moment recursion, value continuity in
//! the initial law) into measurable certificates with standard-error-aware
//! pass rules.

pub mod dynamics;
pub mod error;
pub mod exec;
pub mod fmt;
pub mod kernel;
pub mod lq;
pub mod measures;
pub mod model;
pub mod noise;
pub mod mfg;
pub mod optimizer;
pub mod verify;
pub mod rng;

pub use error::{CoreError, Result};
pub use exec::Exec;
