//! Offline reinforcement learning with an anti-exploration bonus derived
//! from random network distillation.
//!
//! The crate bundles everything needed to study why naive state-action
//! conditioning of the RND prior breaks bonus minimization, and to train the
//! resulting ensemble-free agent end to end on built-in desk-scale tasks:
//!
//! - [`tape`]: minimal reverse-mode autodiff over dense `f64` tensors;
//! - [`nets`]: state-action MLPs with concatenation, gating, bilinear, and
//!   FiLM conditioning at configurable depths;
//! - [`rnd`]: frozen random prior + trained predictor and the scaled bonus;
//! - [`sac`]: soft actor-critic with the bonus-penalized TD target, plus the
//!   critic-free variant used for the diagnostic experiments;
//! - [`data`]: toy four-corner dataset, a point-mass control task, offline
//!   dataset generation and serialization;
//! - [`experiments`]: runnable reproductions of the diagnostic figures with
//!   CSV outputs, behind both a library API and the `antix` CLI.
//!
//! Start with the `examples/` directory; each file exercises one capability.

pub mod gradcheck;
pub mod nets;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
