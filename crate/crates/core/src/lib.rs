//! urgensim: a deterministic discrete-event simulator for urgency-aware
//! GPU kernel-launch scheduling of real-time task chains.
//!
//! The simulator models multi-task chains triggered by periodic sensor
//! frames, each alternating CPU segments with GPU kernel launches, on a
//! platform with a fixed-priority preemptive CPU and a GPU with priority
//! streams, non-preemptive kernels and utilization-capacity contention.
//! The urgency-centric scheduler binds task instances to priority streams
//! with a reservation for truly urgent work, delays non-urgent launches
//! while urgent kernels are active, and batches launch synchronization so
//! urgency stays fresh without serializing the CPU against the GPU.
//! Baseline policies (vanilla async, static criticality, round-robin
//! utilization grouping, EDF/SJF/HRRN/LCUF) run on the identical engine
//! for comparison.
//!
//! Entry points:
//! - [`workload::RunConfig`] loads a built-in workload or a TOML config.
//! - [`harness::execute`] runs one simulation and returns the
//!   [`metrics::MetricsReport`].
//! - [`harness::cmd_sweep`] / [`harness::cmd_ablate`] reproduce the
//!   experiment grids.
//!
//! See the crate examples for one runnable program per capability.

pub mod akb;
pub mod cpu;
pub mod engine;
pub mod error;
pub mod gpu;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod trace;
pub mod units;
pub mod urgency;
pub mod workload;

pub use engine::{run_simulation, RunOptions, RunResult, SimParams};
pub use harness::{cmd_ablate, cmd_run, cmd_sweep, execute, quick_run, AblationStudy, SweepPlan};
pub use metrics::MetricsReport;
pub use policy::{PolicyKind, PolicySpec, SyncMode};
pub use workload::{apply_factors, Overrides, RunConfig, Workload};
