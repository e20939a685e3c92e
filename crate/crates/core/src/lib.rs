pub mod autograd;
pub mod backend;
pub mod data;
pub mod error;
pub mod eval;
pub mod prompt;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
