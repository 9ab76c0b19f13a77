//! Training losses: per-question task losses and the cross-scenario
//! consistency constraint.

pub mod task;
pub mod vcc;
