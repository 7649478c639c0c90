//! Approximate range aggregates over a stream of inserts and deletes, answered
//! from a partition tree plus a pooled uniform sample.

pub mod archive;
pub mod error;
pub mod estimator;
pub mod lifecycle;
pub mod maxvar;
pub mod model;
pub mod partitioner;
pub mod reservoir;
pub mod stats;
pub mod tree;

pub use archive::{Archive, Event, Snapshot, SnapshotSampler};
pub use error::{AqpError, Result};
pub use model::{AggKind, EngineConfig, Query, Rect, Relation, Tuple};
