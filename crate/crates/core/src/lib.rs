//! Interval-bound certified training with class-group specifications,
//! hierarchical class clustering, and neural decision trees.

pub mod autodiff;
pub mod bounds;
pub mod data;
pub mod error;
pub mod eval;
pub mod groups;
pub mod ndt;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
