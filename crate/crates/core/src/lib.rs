pub mod diffcore;
pub mod error;
pub mod harness;
pub mod minimax;
pub mod model;
pub mod objective;
pub mod prune;
pub mod sparsity;

pub use error::{Error, Result};
