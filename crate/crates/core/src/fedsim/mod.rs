//! Protocol simulator: nodes, server, byte-exact messages, communication
//! cost models, data partitioning and the FedAvg baseline.

mod cost;
mod fedavg;
mod ledger;
mod partition;
mod privacy;
mod sim;
mod wire;


pub use cost::{cost_fl, cost_octopus, cost_split, efficiency_ratio, CostModelParams};
pub use fedavg::{run_fedavg, run_fedavg_shards, FedAvgConfig, FedAvgReport};
pub use ledger::{phase_of, OverheadLedger, PhaseRow, Predictions, LEDGER_SCHEMA_VERSION, PHASES};
pub use partition::{partition, partition_labels, Partition, PartitionScheme, DEFAULT_MODERATE_FRACTION};
pub use privacy::{fingerprints, forbidden_vectors, scan_messages, Fingerprints, PrivacyScan, Violation, WINDOW_VALUES};
pub use sim::{
    codebook_sync, encode_payloads, encode_store, run_octopus, BaselineCosts, NodeState, OctopusConfig, OctopusMetrics, OctopusRun, PartitionLabel, RunData,
    ServerState, Traffic, UPLOAD_BATCH,
};
pub use wire::{
    decode_records, encode_record, pack_indices, packed_len, record_len, unpack_count, unpack_indices, Endpoint, MessageKind,
    WireMessage, RECORD_HEADER_LEN,
};
