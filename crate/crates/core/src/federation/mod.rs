//! Server-side simulation: partitioning, sampling, aggregation, memory
//! accounting and the round loop.

pub mod aggregate;
pub mod memory;
pub mod partition;
pub mod server;

pub use aggregate::{aggregate, aggregation_weights, sample_clients};
pub use memory::{determine_q, estimate_peak_memory, MemMode, MemParams, MemReport, ModelDims};
pub use partition::{dirichlet_partition, iid_partition};
pub use server::{run, run_baseline, run_streaming, ClientProfile, RoundRecord, RunOutput, Simulation};
