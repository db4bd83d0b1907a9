//! The business process and its auditor: a sales/stock transaction
//! generator, a recovery scanner that finds torn transactions, an
//! independent journal-replay oracle and an exhaustive delivery-order
//! explorer.

mod explore;
mod generator;
mod oracle;
mod record;
mod verify;

pub use explore::{explore_interleavings, ExplorationReport};
pub use generator::{
    FeedLine, Next, PlannedWrite, Workload, WorkloadSpec, WorkloadSummary, MAX_AMOUNT, MIN_AMOUNT,
};
pub use oracle::{matches_some_global_prefix, replay_oracle, replay_streams};
pub use record::{BlockContent, Role, TransactionRecord, TxLayout, RECORD_LEN};
pub use verify::{scan, AnalyticsReport, Scan, VerificationReport};
