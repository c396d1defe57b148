//! Tokenised flow matching for hierarchical simulation-based inference.

pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod model;
pub mod nets;
pub mod ode;
pub mod pipeline;
pub mod seed;
pub mod tasks;
pub mod tokeniser;

pub use error::{Error, Result};
