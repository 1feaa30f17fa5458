//! Continual generation of incompatible teammate populations paired with a
//! multi-head, continually trained coordination policy.

pub mod analysis;
pub mod approximator;
pub mod archive;
pub mod config;
pub mod ego;
pub mod env;
pub mod error;
pub mod marl;
pub mod orchestrator;
pub mod teammate;
pub mod theory;

pub use error::{Error, Result};
