//! Replays event streams through the engine and its sampling baselines and
//! scores the answers against exact ground truth.

pub mod config;
pub mod convert;
pub mod datagen;
pub mod engines;
pub mod report;
pub mod runner;
pub mod stream;

pub use engines::{AqpEngine, EngineRegistry};
pub use report::RunReport;
pub use stream::Op;
