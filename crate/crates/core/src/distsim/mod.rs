//! Simulation of the distributed setting: data generation, sharding,
//! contamination of transmitted estimates, the wire codec and the Monte
//! Carlo study harness.

mod contam;
mod data;
mod study;
mod transport;

pub use contam::{contaminate, fourth_root_floor, ContaminationKind, ContaminationSpec};
pub use data::{generate_dataset, partition};
pub use study::{
    run_replicate, run_study, sig6, CoefficientMetrics, EstimatorOutcome, ReplicateRecord, StudyConfig, StudyMetrics,
    MAX_FAILED_FRACTION, Z_95,
};
pub use transport::{decode_message, decode_wire, encode_message, DecodeError, EstimateMessage, PROTOCOL_VERSION};
