//! Diagnostics for in-context learning: logit-lens task recognition,
//! demonstration similarity and the metrics built on top of them.

pub mod backend;
pub mod coordinate;
pub mod datasets;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod lens;
pub mod par;
pub mod prompt;
pub mod similarity;

pub use error::{Error, Result};
pub use par::Exec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
