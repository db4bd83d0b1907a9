//! Deterministic simulator for crash-consistent, group-ordered replication
//! of block volumes between a main and a backup site.

pub mod api;
pub mod blockstore;
pub mod controlplane;
pub mod error;
pub mod replication;
pub mod scenario;
pub mod serve;
pub mod simnet;
pub mod workload;
pub mod world;

pub use error::{Error, Result};
