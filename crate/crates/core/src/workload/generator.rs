use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blockstore::VolumeId;
use crate::controlplane::AppId;
use crate::error::{Error, Result};
use crate::simnet::{SimDuration, SimTime};

use super::record::{Role, TransactionRecord, TxLayout};

pub const MIN_AMOUNT: u32 = 1;
pub const MAX_AMOUNT: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub count: u64,
    pub seed: u64,
    pub think_time: SimDuration,
}

/// A write the generator wants issued next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedWrite {
    pub txid: u64,
    pub role: Role,
    pub volume: VolumeId,
    pub block: usize,
    pub data: Vec<u8>,
}

/// What to do after an ack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    IssueNow,
    IssueAfter(SimDuration),
    Done,
}

/// One line of the transaction window: `txid, phase, logical_time`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeedLine {
    pub index: u64,
    pub app_id: AppId,
    pub txid: u64,
    pub phase: &'static str,
    pub logical_time: SimTime,
}

impl fmt::Display for FeedLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}, {}", self.txid, self.phase, self.logical_time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSummary {
    pub app_id: AppId,
    pub requested: u64,
    pub acked_count: u64,
    pub writes_acked: u64,
    pub mean_ack_latency_ms: f64,
    pub running: bool,
    pub stopped_reason: Option<String>,
}

/// The sales/stock transaction generator of one app, as a state machine:
/// `next_write` hands out a write, `on_ack` consumes its ack.
#[derive(Debug, Clone)]
pub struct Workload {
    app_id: AppId,
    sales: VolumeId,
    stock: VolumeId,
    layout: TxLayout,
    block_size: usize,
    rng: ChaCha8Rng,
    think_time: SimDuration,
    requested: u64,
    last_txid: u64,
    next_txid: u64,
    step: usize,
    amount: u32,
    in_flight: bool,
    committed: u64,
    writes_acked: u64,
    latency_sum: SimDuration,
    stopped: Option<String>,
}

const STEPS: [Role; 3] = [Role::SalesData, Role::StockData, Role::Commit];

impl Workload {
    /// `first_txid` lets a second run on the same app continue where the
    /// previous one stopped.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        app_id: AppId,
        sales: VolumeId,
        stock: VolumeId,
        layout: TxLayout,
        block_size: usize,
        first_txid: u64,
        spec: WorkloadSpec,
    ) -> Result<Self> {
        let last_txid = first_txid - 1 + spec.count;
        if last_txid > layout.capacity() {
            return Err(Error::InvalidArgument(format!(
                "{} transactions from txid {first_txid} exceed capacity {}",
                spec.count,
                layout.capacity()
            )));
        }
        Ok(Workload {
            app_id,
            sales,
            stock,
            layout,
            block_size,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            think_time: spec.think_time,
            requested: spec.count,
            last_txid,
            next_txid: first_txid,
            step: 0,
            amount: 0,
            in_flight: false,
            committed: 0,
            writes_acked: 0,
            latency_sum: SimDuration::ZERO,
            stopped: None,
        })
    }

    pub fn app_id(&self) -> AppId {
        self.app_id
    }

    pub fn is_running(&self) -> bool {
        self.stopped.is_none() && self.next_txid <= self.last_txid
    }

    /// Txid the next run on this app should start from.
    pub fn next_txid(&self) -> u64 {
        self.next_txid
    }

    pub fn next_write(&mut self) -> Option<PlannedWrite> {
        if !self.is_running() || self.in_flight {
            return None;
        }
        let txid = self.next_txid;
        let role = STEPS[self.step];
        if self.step == 0 {
            self.amount = self.rng.gen_range(MIN_AMOUNT..=MAX_AMOUNT);
        }
        let rec = TransactionRecord {
            txid: txid as u32,
            role,
            amount: self.amount,
        };
        let volume = match role {
            Role::StockData => self.stock,
            _ => self.sales,
        };
        self.in_flight = true;
        Some(PlannedWrite {
            txid,
            role,
            volume,
            block: self.layout.block_of(txid, role),
            data: rec
                .encode(self.block_size)
                .expect("block size checked at setup"),
        })
    }

    /// The planned write could not be issued yet; it will be planned again.
    pub fn retry_later(&mut self) {
        self.in_flight = false;
    }

    pub fn on_ack(&mut self, latency: SimDuration) -> (u64, Role, Next) {
        assert!(self.in_flight, "ack without a write in flight");
        self.in_flight = false;
        self.writes_acked += 1;
        self.latency_sum = self.latency_sum + latency;
        let txid = self.next_txid;
        let role = STEPS[self.step];
        self.step += 1;
        if self.step < STEPS.len() {
            return (txid, role, Next::IssueNow);
        }
        self.step = 0;
        self.committed += 1;
        self.next_txid += 1;
        let next = if self.next_txid > self.last_txid {
            Next::Done
        } else if self.think_time == SimDuration::ZERO {
            Next::IssueNow
        } else {
            Next::IssueAfter(self.think_time)
        };
        (txid, role, next)
    }

    pub fn stop(&mut self, reason: impl Into<String>) {
        self.in_flight = false;
        if self.stopped.is_none() {
            self.stopped = Some(reason.into());
        }
    }

    pub fn summary(&self) -> WorkloadSummary {
        let mean = if self.writes_acked == 0 {
            0.0
        } else {
            self.latency_sum.as_ms_f64() / self.writes_acked as f64
        };
        WorkloadSummary {
            app_id: self.app_id,
            requested: self.requested,
            acked_count: self.committed,
            writes_acked: self.writes_acked,
            mean_ack_latency_ms: mean,
            running: self.is_running(),
            stopped_reason: self.stopped.clone(),
        }
    }
}
