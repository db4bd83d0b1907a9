//! Exhaustive exploration of delivery orders for a short write schedule.
//!
//! The schedule is the first `write_count` writes of the transaction
//! protocol over two volumes. Every entry travels as its own message; each
//! link is FIFO, so a delivery order is a merge of the per-link queues. For
//! every merge and every cut point along it the backup is failed over and
//! scanned.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::blockstore::{Site, VolumeId};
use crate::controlplane::AppId;
use crate::error::Result;
use crate::replication::{
    EngineConfig, GroupId, ReplEvent, ReplMsg, ReplTimer, ReplicationEngine, ReplicationIo,
    ReplicationMode, WriteToken,
};
use crate::simnet::{LinkConfig, LinkId, SimDuration, SimTime};

use super::generator::{Workload, WorkloadSpec};
use super::oracle::matches_some_global_prefix;
use super::record::TxLayout;
use super::verify::scan;

const BLOCKS: usize = 8;
const BLOCK_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExplorationReport {
    pub mode: crate::replication::ReplicationMode,
    pub writes: usize,
    pub interleavings: u64,
    pub cuts_examined: u64,
    pub torn_cuts: u64,
    pub non_prefix_cuts: u64,
    /// Messages delivered per link at the first torn cut found.
    pub first_torn_cut: Option<Vec<usize>>,
}

/// Captures outgoing messages instead of delivering them.
#[derive(Default)]
struct Outbox {
    links: BTreeMap<LinkId, LinkConfig>,
    sent: Vec<(LinkId, ReplMsg)>,
}

impl ReplicationIo for Outbox {
    fn now(&self) -> SimTime {
        SimTime::ZERO
    }

    fn site_failed(&self, _site: Site) -> bool {
        false
    }

    fn add_link(&mut self, id: LinkId, config: LinkConfig) -> Result<()> {
        self.links.insert(id, config);
        Ok(())
    }

    fn link_config(&self, id: &LinkId) -> Option<LinkConfig> {
        self.links.get(id).cloned()
    }

    fn send(&mut self, link: &LinkId, msg: ReplMsg) {
        self.sent.push((link.clone(), msg));
    }

    fn schedule(&mut self, _delay: SimDuration, _timer: ReplTimer, _background: bool) {}
}

struct Explorer {
    group: GroupId,
    sales: VolumeId,
    stock: VolumeId,
    layout: TxLayout,
    queues: Vec<Vec<ReplMsg>>,
    report: ExplorationReport,
}

impl Explorer {
    fn visit(&mut self, engine: &ReplicationEngine, delivered: &mut Vec<usize>) {
        self.examine_cut(engine, delivered);
        let mut leaf = true;
        for q in 0..self.queues.len() {
            if delivered[q] == self.queues[q].len() {
                continue;
            }
            leaf = false;
            let mut next = engine.clone();
            let mut io = Outbox::default();
            let msg = self.queues[q][delivered[q]].clone();
            next.handle(&mut io, ReplEvent::Message(msg));
            delivered[q] += 1;
            self.visit(&next, delivered);
            delivered[q] -= 1;
        }
        if leaf {
            self.report.interleavings += 1;
        }
    }

    fn examine_cut(&mut self, engine: &ReplicationEngine, delivered: &[usize]) {
        let mut cut = engine.clone();
        cut.failover(&Outbox::default(), self.group)
            .expect("fresh clone has not failed over");
        let info = cut.group_info(self.group).expect("group exists");
        let backup = cut.store(Site::Backup);
        let images: BTreeMap<VolumeId, _> = info
            .members
            .iter()
            .map(|m| (m.main, backup.image(m.backup).expect("peer exists")))
            .collect();
        let result = scan(self.layout, &images[&self.sales], &images[&self.stock]);
        let history = cut.history(self.group).expect("group exists");
        self.report.cuts_examined += 1;
        if !result.torn.is_empty() {
            self.report.torn_cuts += 1;
            self.report
                .first_torn_cut
                .get_or_insert_with(|| delivered.to_vec());
        }
        if !matches_some_global_prefix(history, &images) {
            self.report.non_prefix_cuts += 1;
        }
    }
}

/// Issues the first `write_count` protocol writes, ships every entry as a
/// separate message and explores all FIFO-respecting delivery orders.
pub fn explore_interleavings(mode: ReplicationMode, write_count: usize) -> ExplorationReport {
    let cfg = EngineConfig {
        ship_batch: 1,
        auto_ship: false,
        auto_apply: true,
        ..EngineConfig::default()
    };
    let mut engine = ReplicationEngine::new(cfg);
    let mut io = Outbox::default();
    let sales = engine
        .store_mut(Site::Main)
        .create_volume(BLOCKS, BLOCK_SIZE)
        .expect("valid shape");
    let stock = engine
        .store_mut(Site::Main)
        .create_volume(BLOCKS, BLOCK_SIZE)
        .expect("valid shape");
    let group = engine
        .create_group(&mut io, &[sales, stock], mode, 64)
        .expect("fresh volumes");
    let layout = TxLayout {
        sales_blocks: BLOCKS,
        stock_blocks: BLOCKS,
    };
    let txs = write_count.div_ceil(3) as u64;
    let spec = WorkloadSpec {
        count: txs,
        seed: 0,
        think_time: SimDuration::ZERO,
    };
    let mut w = Workload::new(AppId(0), sales, stock, layout, BLOCK_SIZE, 1, spec)
        .expect("schedule fits the volumes");
    for i in 0..write_count {
        let p = w.next_write().expect("schedule long enough");
        engine
            .group_write(
                &mut io,
                group,
                p.volume,
                p.block,
                &p.data,
                WriteToken(i as u64),
            )
            .expect("write accepted");
        w.on_ack(SimDuration::ZERO);
    }
    io.sent.clear();
    engine
        .ship_entries(&mut io, group, usize::MAX)
        .expect("group exists");

    let mut by_link: BTreeMap<LinkId, Vec<ReplMsg>> = BTreeMap::new();
    for (link, msg) in io.sent {
        by_link.entry(link).or_default().push(msg);
    }
    let mut ex = Explorer {
        group,
        sales,
        stock,
        layout,
        queues: by_link.into_values().collect(),
        report: ExplorationReport {
            mode,
            writes: write_count,
            interleavings: 0,
            cuts_examined: 0,
            torn_cuts: 0,
            non_prefix_cuts: 0,
            first_torn_cut: None,
        },
    };
    let mut delivered = vec![0; ex.queues.len()];
    ex.visit(&engine, &mut delivered);
    ex.report
}
