//! Metrics and analyses over trained models.

mod analysis;
mod metrics;
mod noise;
mod report;

pub use analysis::*;
pub use metrics::*;
pub use noise::*;
pub use report::*;
