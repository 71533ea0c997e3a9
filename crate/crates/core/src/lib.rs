//! Constrained unsupervised skill discovery on planar toy environments.
//!
//! A skill-conditioned policy and a latent encoder are trained together:
//! the encoder maps states to a latent space whose per-step transitions
//! should match the commanded skill, subject to a distance constraint tying
//! latent displacement to state displacement. Three objectives are
//! available: norm matching (`ours`) and the alignment-only `lsd` and
//! `metra` baselines.

// Validation uses `!(x > 0.0)` style checks on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod env;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod numkit;
pub mod ppo;
pub mod seeding;
pub mod skills;
pub mod tracking;
pub mod trainer;

pub use error::{Error, Result};
