pub mod baselines;
pub mod bench;
pub mod cli;
pub mod design;
pub mod error;
pub mod estimation;
pub mod kernel;
pub mod linalg;
pub mod models;

pub use error::{Error, Result};
