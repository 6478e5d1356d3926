//! Desk-scale lab for token-level surrogate RL on a tiny mixture-of-experts
//! policy with an emulated low-precision inference engine.

pub mod autodiff;
pub mod cli;
pub mod diagnostics;
pub mod dual_engine;
pub mod error;
pub mod objectives;
pub mod policy;
pub mod rollout;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};
