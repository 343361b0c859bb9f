//! A miniature pipelined query engine with write-ahead lineage fault
//! tolerance, executed inside a deterministic discrete-event cluster
//! simulator.
//!
//! Layers, bottom-up:
//! - [`batch`], [`plan`] and [`kernel`]: columnar batches, query plans and
//!   deterministic operator kernels;
//! - [`gcs`]: the transactional global control store (lineage table, task
//!   queues, sentinels, control flag) and its audit log;
//! - [`worker`]: the TaskManager loop with committed-lineage input gating,
//!   push-based exchange and upstream backup;
//! - [`coordinator`]: failure detection and lineage-driven recovery planning;
//! - [`harness`]: the simulator, cost model, fault injection, metrics and
//!   the offline auditor.

pub mod batch;
pub mod coordinator;
pub mod digest;
pub mod gcs;
pub mod harness;
pub mod ids;
pub mod kernel;
pub mod plan;
pub mod reference;
pub mod worker;

pub use batch::{Batch, Column, DataType, Field, Scalar, Schema};
pub use digest::Digest;
pub use ids::{ChannelId, ChannelKey, StageId, TaskName, WorkerId};
pub use plan::{validate_plan, QueryPlan, ValidatedPlan};
