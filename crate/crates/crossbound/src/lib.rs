//! Crossbound: a cross-border HPC job broker for scientific portals.
//!
//! Portal backends hand the broker containerized analysis jobs; the broker
//! picks a remote cluster the submitting group holds a robot account on,
//! stages data (inline uploads, on-target object-store resolution, and a
//! ship-once content-addressed cache for reference bundles and container
//! images), renders a byte-deterministic batch script, tracks the job
//! through a poll-based lifecycle, enforces core-hour quotas, and records
//! a reproducibility manifest that lets two runs be compared bit by bit.
//!
//! Everything runs against a deterministic in-process simulated cluster
//! under a virtual clock, so the full pipeline is exercised end to end
//! with zero external infrastructure. See the `examples/` directory for
//! runnable walkthroughs of each capability and the `crossbound` binary
//! for the operator CLI.

pub mod batchgen;
pub mod bench;
pub mod cli;
pub mod clock;
pub mod eventlog;
pub mod lifecycle;
pub mod cluster;
pub mod config;
pub mod digest;
pub mod model;
pub mod registry;
pub mod simcluster;
pub mod staging;
pub mod transport;

pub use clock::VirtualClock;
pub use digest::Digest;
pub use eventlog::{JobRecord, JobState};
pub use lifecycle::{Broker, BrokerOptions, BrokerSetup};
pub use model::{
    validate_jobspec, verify_reproduction, JobSpec, ReproReport, ReproducibilityManifest,
    ResourceRequest, ToolDescriptor, ValidatedJob,
};
