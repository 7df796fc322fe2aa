//! The federated round protocol.
//!
//! Multi-step mode: each client runs `T` seeded local steps from the global
//! model and uploads its `T` projected-gradient scalars; the server replays
//! every client's virtual path from the shared seeds, then aggregates.
//! High-frequency mode (`T = 1`): the server averages the scalars of one
//! shared direction and broadcasts the average back, so nothing but scalars
//! and seeds ever crosses the wire.

mod cost;
mod dump;
mod metrics;
mod protocol;
mod runner;

pub use cost::{communication_cost, full_parameter_cost, round_cost, CommCost, FLOAT_BYTES, INDEX_BYTES, SEED_BYTES};
pub use dump::{read_message_dump, write_message_dump};
pub use metrics::{MetricsSeries, RoundRecord, METRICS_HEADER};
pub use protocol::{
    aggregate, average_scalars, client_round, high_frequency_round, multi_step_round,
    reconstruct_virtual_path, replay_average, ClientState, ProjectedGradientLog, RoundConfig,
    ServerState, StepContext, SyncMode,
};
pub use runner::{run_federation, Evaluator, Federation, RunFailure, RunOptions};
