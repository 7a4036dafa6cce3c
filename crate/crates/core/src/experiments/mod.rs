//! Task suite, metrics and paired statistics.

pub mod metrics;
pub mod report;
pub mod stats;
pub mod tasks;
