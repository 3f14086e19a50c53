//! Temporal-agent reward redistribution (TAR²) for episodic cooperative MARL.
//!
//! The crate is organised bottom-up:
//!
//! - [`redistribution`]: deterministic shift-and-normalize weighting that turns
//!   unnormalized contribution scores into shaped rewards summing exactly to
//!   the team reward, plus potential/telescoping utilities.
//! - [`tensor`] and [`nn`]: a small reverse-mode autodiff engine, layers and Adam.
//! - [`reward_model`]: the dual temporal/agent attention score model with
//!   final-outcome conditioning and an inverse-dynamics head.
//! - [`buffer`]: finished joint trajectories and the replay ring.
//! - [`envs`]: toy episodic cooperative environments with terminal-only reward.
//! - [`trainer`]: MAPPO-style training with PopArt and GAE.
//! - [`analysis`]: policy-gradient and variance checks, ablation modes, exports.
//! - [`verify`]: the property suite run by `tar2 verify`.
//! - [`config`], [`checkpoint`], [`experiment`]: the operator surface used by the CLI.

pub mod analysis;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod redistribution;
pub mod reward_model;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
