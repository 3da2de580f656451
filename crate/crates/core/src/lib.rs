//! Interaction-based instrumental-variable estimation of a causal exposure
//! effect on a right-censored log survival time.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gel;
pub mod interactions;
pub mod linalg;
pub mod moments;
pub mod nuisance;
pub mod pipeline;
pub mod screening;
pub mod simulate;

pub use error::{Error, Result};
