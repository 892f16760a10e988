//! Execution strategies over virtual devices: serial, data-parallel
//! replication, model-parallel wavefront, and the hybrid alternation of
//! model and data parallelism.

pub mod device;
pub mod exec;
pub mod plan;
pub mod schedule;
mod wavefront;

pub use device::{Event, EventKind, ExecTrace, Payload};
pub use exec::{allreduce_grads, run_strategy, StrategyOutput};
pub use plan::{build_placement, scatter_batch, split_ranges, PlacementPlan, Strategy};
pub use schedule::{wavefront_order, Task, TaskKind, WavefrontSchedule};
