//! Online reinforcement learning with a denoising-diffusion policy trained by
//! a Q-weighted variational objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense networks with analytic gradients and Adam.
//! - [`diffusion`]: variance schedule, noising, reverse sampling and the
//!   weighted noise-prediction loss.
//! - [`critic`]: twin Q networks with shadow copies and TD targets.
//! - [`policy`]: Q-weight transforms, entropy-sample injection, K-sample
//!   action selection and the policy update.
//! - [`replay`]: ring-buffer experience replay.
//! - [`envs`]: the three-peak bandit and pendulum swing-up.
//! - [`verify`]: closed-form one-step optimal policy oracle and mode coverage.
//! - [`selfcheck`]: the quick oracle suite run by `qvpo verify`.
//! - [`trainer`], [`config`], [`metrics`], [`plot`]: the training loop and
//!   its file formats.

pub mod config;
pub mod critic;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod policy;
pub mod replay;
pub mod selfcheck;
pub mod trainer;
pub mod verify;

pub use error::{QvpoError, Result};
