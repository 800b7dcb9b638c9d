pub mod artifact;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
