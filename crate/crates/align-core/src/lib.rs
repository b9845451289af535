//! Desk-scale laboratory for divergence-minimization alignment of
//! autoregressive token policies.
//!
//! The crate instantiates a deterministic token-generation MDP small enough
//! that every trajectory can be enumerated, so every training objective can
//! be checked against exact ground truth:
//!
//! - [`mdp`] — vocabulary, states, trajectories, terminal rewards, and
//!   exhaustive trajectory enumeration over the prefix tree.
//! - [`policy`] — tabular softmax policies with restricted context orders,
//!   plus Boltzmann-optimal expert construction by backward induction.
//! - [`occupancy`] — exact and empirical state-action occupancy measures,
//!   trajectory distributions, and the divergence calculator used as the
//!   oracle for every training method.
//! - [`fdiv`] — the f-divergence families (AIRL/GAIL/FAIRL/alpha) with
//!   closed-form convex conjugates.
//! - [`objectives`] — forward-KL-family losses (SFT, position-reweighted,
//!   trajectory-level, exact occupancy KL) with analytic gradients and a
//!   finite-difference checker.
//! - [`adversarial`] — tabular discriminators and critics, reverse-KL / JS /
//!   f-divergence policy objectives with exact enumeration gradients, and
//!   alternating minimax training.
//! - [`preference`] — Bradley–Terry reward modeling with Gaussian/logistic
//!   win probabilities and variance-aware cross-entropy fitting.
//! - [`harness`] — optimizers, experiment configs, scenario builders,
//!   metrics reports, and sweep plumbing behind the `align` CLI.
//!
//! Inner loops (enumeration, gradient accumulation, sweeps) run data-parallel
//! via rayon when the default `parallel` feature is enabled; disabling it
//! falls back to sequential execution with bit-identical results.

pub mod adversarial;
pub mod error;
pub mod exec;
pub mod fdiv;
pub mod harness;
pub mod mdp;
pub mod objectives;
pub mod occupancy;
pub mod policy;
pub mod preference;

pub use error::{Error, Result};
