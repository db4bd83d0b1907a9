//! Journal-based replication between the main and the backup site.
//!
//! Every consistency group owns one or more *streams*. A stream is a
//! sequencer plus a pair of journals (main and backup) and a pair of links.
//! In [`ReplicationMode::Grouped`] and [`ReplicationMode::Synchronous`] all
//! member volumes share a single stream, so the backup applies writes to all
//! members in exactly the order the main site acknowledged them. In
//! [`ReplicationMode::PerVolume`] each member gets its own stream and the
//! cross-volume order is lost.
//!
//! The engine never drives time itself. It reacts to [`ReplEvent`]s handed
//! back by the caller's event loop and talks to the network through
//! [`ReplicationIo`].

mod journal;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blockstore::{prefixed_id, BlockStore, Digest, Site, SnapshotId, VolumeId, VolumeImage};
use crate::error::{Error, Result};
use crate::simnet::{LinkConfig, LinkId, SimDuration, SimNet, SimTime, TraceEvent};

pub use journal::{Journal, JournalEntry, JournalInfo};

prefixed_id!(GroupId, "grp");
prefixed_id!(SnapshotGroupId, "sg");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationMode {
    /// Asynchronous, one shared journal for all members.
    Grouped,
    /// Asynchronous, one journal per member; cross-volume order is not kept.
    PerVolume,
    /// The host ack waits for the backup apply.
    Synchronous,
}

impl ReplicationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplicationMode::Grouped => "grouped",
            ReplicationMode::PerVolume => "per_volume",
            ReplicationMode::Synchronous => "synchronous",
        }
    }
}

impl fmt::Display for ReplicationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReplicationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grouped" => Ok(ReplicationMode::Grouped),
            "per_volume" => Ok(ReplicationMode::PerVolume),
            "synchronous" => Ok(ReplicationMode::Synchronous),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BaselineCopy,
    CatchingUp,
    Consistent,
    FailedOver,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::BaselineCopy => "baseline_copy",
            Phase::CatchingUp => "catching_up",
            Phase::Consistent => "consistent",
            Phase::FailedOver => "failed_over",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Counters of one group. For per-volume groups the sequence counters are
/// sums over the member streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationStatus {
    pub group_id: GroupId,
    pub phase: Phase,
    pub acked_seq: u64,
    pub shipped_seq: u64,
    pub applied_seq: u64,
    pub lag_entries: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lost_on_failover: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SnapshotGroup {
    pub snapshot_group_id: SnapshotGroupId,
    pub group_id: GroupId,
    pub at_seq: u64,
    /// One snapshot per backup member, in member order.
    pub member_snapshot_ids: Vec<SnapshotId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FailoverReport {
    pub recovered_applied_seq: u64,
    pub lost_entries: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WriteToken(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    pub token: WriteToken,
    pub group_id: GroupId,
    pub volume_id: VolumeId,
    pub group_seq: u64,
    pub ack_latency: SimDuration,
}

/// Things the engine reports back to the event loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notice {
    Acked(Ack),
    WriteFailed { token: WriteToken, error: Error },
    BaselineComplete { group_id: GroupId, barrier_seq: u64 },
    Consistent { group_id: GroupId },
}

#[derive(Debug, Clone)]
pub enum ReplMsg {
    Entries {
        group: GroupId,
        stream: usize,
        entries: Vec<JournalEntry>,
    },
    BaselineBlock {
        group: GroupId,
        stream: usize,
        member: usize,
        block: usize,
        data: Arc<[u8]>,
    },
    Confirm {
        group: GroupId,
        stream: usize,
        received: u64,
        applied: u64,
        baseline_block: Option<(usize, usize)>,
    },
}

#[derive(Debug, Clone)]
pub enum ReplTimer {
    Ship {
        group: GroupId,
        stream: usize,
    },
    Retransmit {
        group: GroupId,
        stream: usize,
    },
    BaselineTick {
        group: GroupId,
        stream: usize,
    },
    HostAck {
        group: GroupId,
        stream: usize,
        seq: u64,
        token: WriteToken,
        issued_at: SimTime,
    },
}

#[derive(Debug, Clone)]
pub enum ReplEvent {
    Message(ReplMsg),
    Timer(ReplTimer),
}

impl TraceEvent for ReplEvent {
    fn kind(&self) -> &'static str {
        match self {
            ReplEvent::Message(ReplMsg::Entries { .. }) => "entries",
            ReplEvent::Message(ReplMsg::BaselineBlock { .. }) => "baseline_block",
            ReplEvent::Message(ReplMsg::Confirm { .. }) => "confirm",
            ReplEvent::Timer(ReplTimer::Ship { .. }) => "ship",
            ReplEvent::Timer(ReplTimer::Retransmit { .. }) => "retransmit",
            ReplEvent::Timer(ReplTimer::BaselineTick { .. }) => "baseline_tick",
            ReplEvent::Timer(ReplTimer::HostAck { .. }) => "host_ack",
        }
    }

    fn detail(&self) -> String {
        match self {
            ReplEvent::Message(ReplMsg::Entries {
                group,
                stream,
                entries,
            }) => {
                let first = entries.first().map_or(0, |e| e.group_seq);
                let last = entries.last().map_or(0, |e| e.group_seq);
                format!("{group} stream={stream} seqs={first}..{last}")
            }
            ReplEvent::Message(ReplMsg::BaselineBlock {
                group,
                stream,
                member,
                block,
                ..
            }) => format!("{group} stream={stream} member={member} blk={block}"),
            ReplEvent::Message(ReplMsg::Confirm {
                group,
                stream,
                received,
                applied,
                baseline_block,
            }) => {
                let mut s =
                    format!("{group} stream={stream} received={received} applied={applied}");
                if let Some((m, b)) = baseline_block {
                    s.push_str(&format!(" baseline={m}:{b}"));
                }
                s
            }
            ReplEvent::Timer(
                ReplTimer::Ship { group, stream }
                | ReplTimer::Retransmit { group, stream }
                | ReplTimer::BaselineTick { group, stream },
            ) => format!("{group} stream={stream}"),
            ReplEvent::Timer(ReplTimer::HostAck {
                group, stream, seq, ..
            }) => format!("{group} stream={stream} seq={seq}"),
        }
    }
}

/// The engine's view of the network and the scheduler.
pub trait ReplicationIo {
    fn now(&self) -> SimTime;
    fn site_failed(&self, site: Site) -> bool;
    fn add_link(&mut self, id: LinkId, config: LinkConfig) -> Result<()>;
    fn link_config(&self, id: &LinkId) -> Option<LinkConfig>;
    fn send(&mut self, link: &LinkId, msg: ReplMsg);
    fn schedule(&mut self, delay: SimDuration, timer: ReplTimer, background: bool);
}

impl<A> ReplicationIo for SimNet<A>
where
    A: TraceEvent + From<ReplEvent>,
{
    fn now(&self) -> SimTime {
        SimNet::now(self)
    }

    fn site_failed(&self, site: Site) -> bool {
        SimNet::site_failed(self, site)
    }

    fn add_link(&mut self, id: LinkId, config: LinkConfig) -> Result<()> {
        SimNet::add_link(self, id, config)
    }

    fn link_config(&self, id: &LinkId) -> Option<LinkConfig> {
        SimNet::link_config(self, id).ok().cloned()
    }

    fn send(&mut self, link: &LinkId, msg: ReplMsg) {
        SimNet::send(self, link, A::from(ReplEvent::Message(msg)))
            .expect("replication links are registered at group creation");
    }

    fn schedule(&mut self, delay: SimDuration, timer: ReplTimer, background: bool) {
        let action = A::from(ReplEvent::Timer(timer));
        if background {
            self.schedule_background(delay, action);
        } else {
            SimNet::schedule(self, delay, action);
        }
    }
}

/// Nothing sent now could be applied: the forward link is partitioned or
/// the backup site is down. Timers waiting on such a peer run in the
/// background so they do not keep a quiescent run alive.
fn peer_unreachable(io: &dyn ReplicationIo, fwd: &LinkId) -> bool {
    io.site_failed(Site::Backup) || io.link_config(fwd).is_none_or(|c| c.partitioned)
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Time from write issue to local journal+volume completion.
    pub local_write_latency: SimDuration,
    /// Default configuration of every inter-site link, per direction.
    pub inter_site_link: LinkConfig,
    pub ship_batch: usize,
    pub retransmit_interval: SimDuration,
    /// Pacing of the initial copy: one block message per interval.
    pub baseline_block_interval: SimDuration,
    pub journal_capacity: usize,
    pub auto_ship: bool,
    pub auto_apply: bool,
    pub auto_baseline: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            local_write_latency: SimDuration::from_micros(200),
            inter_site_link: LinkConfig::with_latency(SimDuration::from_ms(50)),
            ship_batch: 64,
            retransmit_interval: SimDuration::from_ms(10),
            baseline_block_interval: SimDuration::from_ms(1),
            journal_capacity: 4096,
            auto_ship: true,
            auto_apply: true,
            auto_baseline: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemberPair {
    pub main: VolumeId,
    pub backup: VolumeId,
}

/// Everything a replay oracle needs: the main images at group creation and
/// every journal entry in the order it was sequenced.
#[derive(Debug, Clone, Default)]
pub struct GroupHistory {
    pub baseline: BTreeMap<VolumeId, VolumeImage>,
    pub entries: Vec<HistoryEntry>,
}

#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub stream: usize,
    pub entry: JournalEntry,
}

impl GroupHistory {
    /// Entries of one stream, in sequence order.
    pub fn stream_entries(&self, stream: usize) -> impl Iterator<Item = &JournalEntry> {
        self.entries
            .iter()
            .filter(move |h| h.stream == stream)
            .map(|h| &h.entry)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamInfo {
    pub label: String,
    pub members: Vec<VolumeId>,
    pub forward_link: LinkId,
    pub reverse_link: LinkId,
    pub acked_seq: u64,
    pub shipped_seq: u64,
    pub applied_seq: u64,
    pub host_acked_seq: u64,
    pub barrier_seq: Option<u64>,
    pub baseline_blocks_sent: u64,
    pub main_journal: JournalInfo,
    pub backup_journal: JournalInfo,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupInfo {
    pub group_id: GroupId,
    pub mode: ReplicationMode,
    pub phase: Phase,
    pub members: Vec<MemberPair>,
    pub streams: Vec<StreamInfo>,
    pub created_at: SimTime,
    pub consistent_at: Option<SimTime>,
}

#[derive(Debug, Clone, Default)]
struct Baseline {
    started: bool,
    /// Next (member position within the stream, block) to examine.
    cursor: Option<(usize, usize)>,
    outstanding: BTreeMap<(usize, usize), SimTime>,
    barrier_seq: Option<u64>,
    blocks_sent: u64,
}

#[derive(Debug, Clone)]
struct PendingSync {
    token: WriteToken,
    issued_at: SimTime,
}

#[derive(Debug, Clone)]
struct Stream {
    label: String,
    /// Indices into the group's member list.
    members: Vec<usize>,
    fwd: LinkId,
    rev: LinkId,
    main_journal: Journal,
    backup_journal: Journal,
    next_seq: u64,
    shipped_seq: u64,
    applied_seq: u64,
    host_acked_seq: u64,
    sent_upto: u64,
    /// Sent but not yet confirmed as received; value is the last send time.
    unconfirmed: BTreeMap<u64, SimTime>,
    main_known_received: u64,
    main_known_applied: u64,
    pending_sync: BTreeMap<u64, PendingSync>,
    ship_armed: bool,
    retransmit_armed: bool,
    baseline: Baseline,
}

impl Stream {
    fn acked_seq(&self) -> u64 {
        self.next_seq - 1
    }
}

#[derive(Debug, Clone)]
struct Group {
    id: GroupId,
    mode: ReplicationMode,
    members: Vec<MemberPair>,
    streams: Vec<Stream>,
    phase: Phase,
    lost_on_failover: Option<u64>,
    created_at: SimTime,
    consistent_at: Option<SimTime>,
    history: GroupHistory,
}

impl Group {
    fn member_index(&self, main: VolumeId) -> Option<usize> {
        self.members.iter().position(|m| m.main == main)
    }

    fn stream_of(&self, member: usize) -> usize {
        match self.mode {
            ReplicationMode::PerVolume => member,
            _ => 0,
        }
    }
}

/// Storage arrays of both sites plus the replication sessions between them.
#[derive(Debug, Clone)]
pub struct ReplicationEngine {
    cfg: EngineConfig,
    main: BlockStore,
    backup: BlockStore,
    groups: BTreeMap<GroupId, Group>,
    volume_group: BTreeMap<VolumeId, GroupId>,
    snapshot_groups: BTreeMap<SnapshotGroupId, SnapshotGroup>,
    next_group: u32,
    next_snapshot_group: u32,
    notices: Vec<Notice>,
}

impl ReplicationEngine {
    pub fn new(cfg: EngineConfig) -> Self {
        ReplicationEngine {
            cfg,
            main: BlockStore::new(Site::Main),
            backup: BlockStore::new(Site::Backup),
            groups: BTreeMap::new(),
            volume_group: BTreeMap::new(),
            snapshot_groups: BTreeMap::new(),
            next_group: 1,
            next_snapshot_group: 1,
            notices: Vec::new(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self, site: Site) -> &BlockStore {
        match site {
            Site::Main => &self.main,
            Site::Backup => &self.backup,
        }
    }

    /// Direct access for provisioning and non-replicated writes.
    pub fn store_mut(&mut self, site: Site) -> &mut BlockStore {
        match site {
            Site::Main => &mut self.main,
            Site::Backup => &mut self.backup,
        }
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.keys().copied()
    }

    pub fn group_of_volume(&self, main: VolumeId) -> Option<GroupId> {
        self.volume_group.get(&main).copied()
    }

    fn group(&self, id: GroupId) -> Result<&Group> {
        self.groups
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("group {id}")))
    }

    fn group_mut(&mut self, id: GroupId) -> Result<&mut Group> {
        self.groups
            .get_mut(&id)
            .ok_or_else(|| Error::NotFound(format!("group {id}")))
    }

    pub fn drain_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.notices)
    }

    /// Creates a group over main-site volumes, provisioning a shape-identical
    /// backup peer for each member and (unless disabled) scheduling the
    /// initial copy.
    pub fn create_group(
        &mut self,
        io: &mut dyn ReplicationIo,
        member_volume_ids: &[VolumeId],
        mode: ReplicationMode,
        journal_capacity: usize,
    ) -> Result<GroupId> {
        if member_volume_ids.is_empty() {
            return Err(Error::InvalidArgument(
                "a group needs at least one member".into(),
            ));
        }
        for (i, v) in member_volume_ids.iter().enumerate() {
            if member_volume_ids[..i].contains(v) {
                return Err(Error::InvalidArgument(format!("{v} listed twice")));
            }
            self.main.volume(*v)?;
            if let Some(g) = self.volume_group.get(v) {
                return Err(Error::Conflict(format!("{v} already belongs to {g}")));
            }
        }
        if journal_capacity == 0 {
            return Err(Error::InvalidArgument(
                "journal capacity must be positive".into(),
            ));
        }

        let id = GroupId(self.next_group);
        self.next_group += 1;
        let now = io.now();

        let mut members = Vec::with_capacity(member_volume_ids.len());
        let mut baseline = BTreeMap::new();
        for &main_id in member_volume_ids {
            let vol = self.main.volume(main_id)?;
            let (count, size) = (vol.block_count(), vol.block_size());
            baseline.insert(main_id, vol.image());
            let backup_id = if self.backup.contains(main_id) {
                self.backup.create_volume(count, size)?
            } else {
                self.backup.create_volume_with_id(main_id, count, size)?
            };
            members.push(MemberPair {
                main: main_id,
                backup: backup_id,
            });
        }

        let layout: Vec<(String, Vec<usize>)> = match mode {
            ReplicationMode::PerVolume => members
                .iter()
                .enumerate()
                .map(|(i, m)| (m.main.to_string(), vec![i]))
                .collect(),
            _ => vec![("all".to_string(), (0..members.len()).collect())],
        };
        let mut streams = Vec::with_capacity(layout.len());
        for (label, idx) in layout {
            let prefix = if mode == ReplicationMode::PerVolume {
                format!("{id}/{label}")
            } else {
                id.to_string()
            };
            let fwd = LinkId::new(format!("{prefix}/fwd"));
            let rev = LinkId::new(format!("{prefix}/rev"));
            io.add_link(fwd.clone(), self.cfg.inter_site_link.clone())?;
            io.add_link(rev.clone(), self.cfg.inter_site_link.clone())?;
            streams.push(Stream {
                label,
                members: idx,
                fwd,
                rev,
                main_journal: Journal::new(Site::Main, id, journal_capacity),
                backup_journal: Journal::new(Site::Backup, id, journal_capacity),
                next_seq: 1,
                shipped_seq: 0,
                applied_seq: 0,
                host_acked_seq: 0,
                sent_upto: 0,
                unconfirmed: BTreeMap::new(),
                main_known_received: 0,
                main_known_applied: 0,
                pending_sync: BTreeMap::new(),
                ship_armed: false,
                retransmit_armed: false,
                baseline: Baseline::default(),
            });
        }

        for m in &members {
            self.volume_group.insert(m.main, id);
        }
        self.groups.insert(
            id,
            Group {
                id,
                mode,
                members,
                streams,
                phase: Phase::BaselineCopy,
                lost_on_failover: None,
                created_at: now,
                consistent_at: None,
                history: GroupHistory {
                    baseline,
                    entries: Vec::new(),
                },
            },
        );
        if self.cfg.auto_baseline {
            self.run_baseline_copy(io, id)?;
        }
        Ok(id)
    }

    /// Starts streaming every non-zero main block to its backup peer. The
    /// copy is fuzzy: writes keep flowing through the journal meanwhile.
    /// Completion is reported as [`Notice::BaselineComplete`].
    pub fn run_baseline_copy(&mut self, io: &mut dyn ReplicationIo, group: GroupId) -> Result<()> {
        let g = self.group_mut(group)?;
        if g.phase != Phase::BaselineCopy {
            return Err(Error::FailedPrecondition(format!(
                "{group} is in phase {}",
                g.phase
            )));
        }
        if g.streams.iter().any(|s| s.baseline.started) {
            return Err(Error::FailedPrecondition(format!(
                "baseline copy of {group} already running"
            )));
        }
        for s in &mut g.streams {
            s.baseline.started = true;
            s.baseline.cursor = Some((0, 0));
        }
        for stream in 0..self.group(group)?.streams.len() {
            self.baseline_step(io, group, stream);
        }
        Ok(())
    }

    /// Sequences a write, applies it at the main site and arranges for the
    /// host ack. Returns the assigned sequence number; the ack itself
    /// arrives later as [`Notice::Acked`].
    pub fn group_write(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        volume: VolumeId,
        block_index: usize,
        data: &[u8],
        token: WriteToken,
    ) -> Result<u64> {
        if io.site_failed(Site::Main) {
            return Err(Error::Unavailable("main site has failed".into()));
        }
        let local = self.cfg.local_write_latency;
        let auto_ship = self.cfg.auto_ship;
        let now = io.now();
        let g = self
            .groups
            .get_mut(&group)
            .ok_or_else(|| Error::NotFound(format!("group {group}")))?;
        if g.phase == Phase::FailedOver {
            return Err(Error::Unavailable(format!("{group} has failed over")));
        }
        let member = g.member_index(volume).ok_or_else(|| {
            Error::InvalidArgument(format!("{volume} is not a member of {group}"))
        })?;
        let vol = self.main.volume(volume)?;
        if block_index >= vol.block_count() || data.len() != vol.block_size() {
            return Err(Error::InvalidArgument(format!(
                "bad write to {volume}: block {block_index}, {} bytes",
                data.len()
            )));
        }
        let si = g.stream_of(member);
        let mode = g.mode;
        let stream = &mut g.streams[si];
        let seq = stream.next_seq;
        let entry = JournalEntry {
            group_seq: seq,
            volume_id: volume,
            block_index,
            payload: data.into(),
            logical_time: now,
        };
        stream.main_journal.append(entry.clone())?;
        stream.next_seq += 1;
        self.main
            .apply_write(volume, block_index, data)
            .expect("validated above");
        g.history.entries.push(HistoryEntry { stream: si, entry });

        match mode {
            ReplicationMode::Synchronous => {
                g.streams[si].pending_sync.insert(
                    seq,
                    PendingSync {
                        token,
                        issued_at: now,
                    },
                );
                if auto_ship {
                    self.ship_stream(io, group, si, usize::MAX);
                }
            }
            _ => io.schedule(
                local,
                ReplTimer::HostAck {
                    group,
                    stream: si,
                    seq,
                    token,
                    issued_at: now,
                },
                false,
            ),
        }
        Ok(seq)
    }

    /// Hands up to `batch_limit` of the lowest unsent entries of every
    /// stream to the forward link. Returns the number of entries handed over.
    pub fn ship_entries(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        batch_limit: usize,
    ) -> Result<usize> {
        let n = self.group(group)?.streams.len();
        Ok((0..n)
            .map(|s| self.ship_stream(io, group, s, batch_limit))
            .sum())
    }

    fn ship_stream(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        si: usize,
        limit: usize,
    ) -> usize {
        if io.site_failed(Site::Main) || limit == 0 {
            return 0;
        }
        let auto_ship = self.cfg.auto_ship;
        let batch = self.cfg.ship_batch.max(1);
        let Some(g) = self.groups.get_mut(&group) else {
            return 0;
        };
        if g.phase == Phase::FailedOver {
            return 0;
        }
        let s = &mut g.streams[si];
        if peer_unreachable(io, &s.fwd) {
            return 0;
        }
        let from = s.sent_upto + 1;
        let to = s.acked_seq().min(s.sent_upto.saturating_add(limit as u64));
        if from > to {
            return 0;
        }
        let entries: Vec<JournalEntry> = s.main_journal.range(from, to).cloned().collect();
        let now = io.now();
        for e in &entries {
            s.unconfirmed.insert(e.group_seq, now);
        }
        s.sent_upto = to;
        let count = entries.len();
        for chunk in entries.chunks(batch) {
            io.send(
                &s.fwd,
                ReplMsg::Entries {
                    group,
                    stream: si,
                    entries: chunk.to_vec(),
                },
            );
        }
        let more = s.sent_upto < s.acked_seq();
        if auto_ship && more && !s.ship_armed {
            s.ship_armed = true;
            io.schedule(
                SimDuration::ZERO,
                ReplTimer::Ship { group, stream: si },
                false,
            );
        }
        self.arm_retransmit(io, group, si);
        count
    }

    fn arm_retransmit(&mut self, io: &mut dyn ReplicationIo, group: GroupId, si: usize) {
        let interval = self.cfg.retransmit_interval;
        let Some(g) = self.groups.get_mut(&group) else {
            return;
        };
        let s = &mut g.streams[si];
        let busy = !s.unconfirmed.is_empty()
            || !s.baseline.outstanding.is_empty()
            || s.sent_upto < s.acked_seq();
        if s.retransmit_armed || !busy {
            return;
        }
        s.retransmit_armed = true;
        let background = peer_unreachable(io, &s.fwd);
        io.schedule(
            interval,
            ReplTimer::Retransmit { group, stream: si },
            background,
        );
    }

    /// Stores entries that arrived at the backup journal. Duplicates and
    /// already-applied sequences are ignored.
    pub fn receive_entries(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        si: usize,
        entries: Vec<JournalEntry>,
    ) -> Result<()> {
        let auto_apply = self.cfg.auto_apply;
        let g = self.group_mut(group)?;
        if g.phase == Phase::FailedOver || io.site_failed(Site::Backup) {
            return Ok(());
        }
        let s = g
            .streams
            .get_mut(si)
            .ok_or_else(|| Error::NotFound(format!("stream {si} of {group}")))?;
        for e in entries {
            if e.group_seq > s.applied_seq {
                s.backup_journal.insert(e);
            }
        }
        while s.backup_journal.contains(s.shipped_seq + 1) {
            s.shipped_seq += 1;
        }
        if auto_apply {
            self.apply_stream(group, si, io.now());
        }
        self.send_confirm(io, group, si, None);
        Ok(())
    }

    /// Applies every gapless entry waiting in the backup journals.
    pub fn apply_entries(&mut self, io: &mut dyn ReplicationIo, group: GroupId) -> Result<usize> {
        let g = self.group(group)?;
        if g.phase == Phase::FailedOver || io.site_failed(Site::Backup) {
            return Ok(0);
        }
        let n = g.streams.len();
        let mut total = 0;
        for si in 0..n {
            let applied = self.apply_stream(group, si, io.now());
            if applied > 0 {
                self.send_confirm(io, group, si, None);
            }
            total += applied;
        }
        Ok(total)
    }

    fn apply_stream(&mut self, group: GroupId, si: usize, now: SimTime) -> usize {
        let g = self.groups.get_mut(&group).expect("caller checked");
        let s = &mut g.streams[si];
        let mut applied = 0;
        while let Some(e) = s.backup_journal.pop_if(s.applied_seq + 1) {
            let member = g
                .members
                .iter()
                .find(|m| m.main == e.volume_id)
                .expect("entries only reference members");
            self.backup
                .apply_write(member.backup, e.block_index, &e.payload)
                .expect("backup peer has the main volume's shape");
            s.applied_seq = e.group_seq;
            s.shipped_seq = s.shipped_seq.max(s.applied_seq);
            applied += 1;
        }
        if applied > 0 {
            self.check_consistent(group, now);
        }
        applied
    }

    fn check_consistent(&mut self, group: GroupId, now: SimTime) {
        let g = self.groups.get_mut(&group).expect("caller checked");
        if g.phase != Phase::CatchingUp {
            return;
        }
        let caught_up = g
            .streams
            .iter()
            .all(|s| s.baseline.barrier_seq.is_some_and(|b| s.applied_seq >= b));
        if caught_up {
            g.phase = Phase::Consistent;
            g.consistent_at = Some(now);
            self.notices.push(Notice::Consistent { group_id: group });
        }
    }

    fn send_confirm(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        si: usize,
        baseline_block: Option<(usize, usize)>,
    ) {
        if io.site_failed(Site::Backup) {
            return;
        }
        let g = self.groups.get(&group).expect("caller checked");
        let s = &g.streams[si];
        let msg = ReplMsg::Confirm {
            group,
            stream: si,
            received: s.shipped_seq,
            applied: s.applied_seq,
            baseline_block,
        };
        io.send(&s.rev.clone(), msg);
    }

    fn on_confirm(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        si: usize,
        received: u64,
        applied: u64,
        baseline_block: Option<(usize, usize)>,
    ) {
        if io.site_failed(Site::Main) {
            return;
        }
        let local = self.cfg.local_write_latency;
        let now = io.now();
        let Some(g) = self.groups.get_mut(&group) else {
            return;
        };
        if g.phase == Phase::FailedOver {
            return;
        }
        let s = &mut g.streams[si];
        s.main_known_received = s.main_known_received.max(received);
        s.main_known_applied = s.main_known_applied.max(applied);
        s.main_journal.trim_through(s.main_known_applied);
        let keep = s.unconfirmed.split_off(&(s.main_known_received + 1));
        s.unconfirmed = keep;
        if let Some(key) = baseline_block {
            s.baseline.outstanding.remove(&key);
        }
        let still_pending = s.pending_sync.split_off(&(s.main_known_applied + 1));
        let done = std::mem::replace(&mut s.pending_sync, still_pending);
        for (seq, p) in done {
            let ready = p.issued_at + local;
            let delay = if ready > now {
                ready - now
            } else {
                SimDuration::ZERO
            };
            io.schedule(
                delay,
                ReplTimer::HostAck {
                    group,
                    stream: si,
                    seq,
                    token: p.token,
                    issued_at: p.issued_at,
                },
                false,
            );
        }
        self.maybe_complete_baseline(io, group, si);
    }

    fn maybe_complete_baseline(&mut self, io: &mut dyn ReplicationIo, group: GroupId, si: usize) {
        let now = io.now();
        let g = self.groups.get_mut(&group).expect("caller checked");
        let s = &mut g.streams[si];
        let b = &mut s.baseline;
        if !b.started || b.cursor.is_some() || !b.outstanding.is_empty() || b.barrier_seq.is_some()
        {
            return;
        }
        let barrier = s.next_seq - 1;
        b.barrier_seq = Some(barrier);
        self.notices.push(Notice::BaselineComplete {
            group_id: group,
            barrier_seq: barrier,
        });
        if g.phase == Phase::BaselineCopy
            && g.streams.iter().all(|s| s.baseline.barrier_seq.is_some())
        {
            g.phase = Phase::CatchingUp;
            self.check_consistent(group, now);
        }
    }

    /// Sends the next non-zero block of the initial copy, or finishes the
    /// sending side when none is left.
    fn baseline_step(&mut self, io: &mut dyn ReplicationIo, group: GroupId, si: usize) {
        let interval = self.cfg.baseline_block_interval;
        if io.site_failed(Site::Main) {
            return;
        }
        let Some(g) = self.groups.get_mut(&group) else {
            return;
        };
        if g.phase == Phase::FailedOver {
            return;
        }
        let s = &mut g.streams[si];
        let Some(mut cursor) = s.baseline.cursor else {
            return;
        };
        if peer_unreachable(io, &s.fwd) {
            io.schedule(
                interval,
                ReplTimer::BaselineTick { group, stream: si },
                true,
            );
            return;
        }
        let mut found = None;
        while cursor.0 < s.members.len() {
            let member = s.members[cursor.0];
            let vol = self
                .main
                .volume(g.members[member].main)
                .expect("members exist");
            if cursor.1 >= vol.block_count() {
                cursor = (cursor.0 + 1, 0);
                continue;
            }
            let block = vol.block(cursor.1);
            let pos = cursor;
            cursor.1 += 1;
            if block.iter().any(|&b| b != 0) {
                found = Some((pos, member, Arc::<[u8]>::from(block)));
                break;
            }
        }
        match found {
            Some(((pos, blk), member, data)) => {
                s.baseline.cursor = Some(cursor);
                s.baseline.outstanding.insert((pos, blk), io.now());
                s.baseline.blocks_sent += 1;
                io.send(
                    &s.fwd,
                    ReplMsg::BaselineBlock {
                        group,
                        stream: si,
                        member,
                        block: blk,
                        data,
                    },
                );
                io.schedule(
                    interval,
                    ReplTimer::BaselineTick { group, stream: si },
                    false,
                );
                self.arm_retransmit(io, group, si);
            }
            None => {
                s.baseline.cursor = None;
                self.maybe_complete_baseline(io, group, si);
            }
        }
    }

    fn on_baseline_block(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        si: usize,
        member: usize,
        block: usize,
        data: &[u8],
    ) {
        if io.site_failed(Site::Backup) {
            return;
        }
        let Some(g) = self.groups.get(&group) else {
            return;
        };
        if g.phase == Phase::FailedOver {
            return;
        }
        let backup = g.members[member].backup;
        let pos = g.streams[si]
            .members
            .iter()
            .position(|&m| m == member)
            .expect("member belongs to stream");
        self.backup
            .apply_write(backup, block, data)
            .expect("backup peer has the main volume's shape");
        self.send_confirm(io, group, si, Some((pos, block)));
    }

    fn on_retransmit(&mut self, io: &mut dyn ReplicationIo, group: GroupId, si: usize) {
        let interval = self.cfg.retransmit_interval;
        let batch = self.cfg.ship_batch.max(1);
        let Some(g) = self.groups.get_mut(&group) else {
            return;
        };
        let s = &mut g.streams[si];
        s.retransmit_armed = false;
        if io.site_failed(Site::Main) || g.phase == Phase::FailedOver {
            return;
        }
        let fwd = io.link_config(&s.fwd);
        let rev = io.link_config(&s.rev);
        let (Some(fwd), Some(rev)) = (fwd, rev) else {
            return;
        };
        if !peer_unreachable(io, &s.fwd) {
            let now = io.now();
            let rto = fwd.max_delay() + rev.max_delay() + interval;
            let stale: Vec<u64> = s
                .unconfirmed
                .iter()
                .filter(|(_, &t)| t + rto <= now)
                .map(|(&seq, _)| seq)
                .collect();
            let entries: Vec<JournalEntry> = stale
                .iter()
                .filter_map(|&seq| s.main_journal.get(seq).cloned())
                .collect();
            for seq in &stale {
                s.unconfirmed.insert(*seq, now);
            }
            for chunk in entries.chunks(batch) {
                io.send(
                    &s.fwd,
                    ReplMsg::Entries {
                        group,
                        stream: si,
                        entries: chunk.to_vec(),
                    },
                );
            }
            let stale_blocks: Vec<(usize, usize)> = s
                .baseline
                .outstanding
                .iter()
                .filter(|(_, &t)| t + rto <= now)
                .map(|(&k, _)| k)
                .collect();
            for (pos, blk) in stale_blocks {
                let member = s.members[pos];
                // Re-read: the block may have changed since the first send.
                let data: Arc<[u8]> = self
                    .main
                    .read_block(g.members[member].main, blk)
                    .expect("members exist")
                    .into();
                s.baseline.outstanding.insert((pos, blk), now);
                io.send(
                    &s.fwd,
                    ReplMsg::BaselineBlock {
                        group,
                        stream: si,
                        member,
                        block: blk,
                        data,
                    },
                );
            }
            self.ship_stream(io, group, si, usize::MAX);
        }
        self.arm_retransmit(io, group, si);
    }

    fn on_host_ack(
        &mut self,
        io: &mut dyn ReplicationIo,
        group: GroupId,
        si: usize,
        seq: u64,
        token: WriteToken,
        issued_at: SimTime,
    ) {
        let auto_ship = self.cfg.auto_ship;
        let batch = self.cfg.ship_batch;
        let Some(g) = self.groups.get_mut(&group) else {
            return;
        };
        if io.site_failed(Site::Main) || g.phase == Phase::FailedOver {
            self.notices.push(Notice::WriteFailed {
                token,
                error: Error::Unavailable(format!("{group} lost its main site before ack")),
            });
            return;
        }
        let mode = g.mode;
        let s = &mut g.streams[si];
        s.host_acked_seq = s.host_acked_seq.max(seq);
        let volume = s
            .main_journal
            .get(seq)
            .map(|e| e.volume_id)
            .or_else(|| {
                g.history
                    .entries
                    .iter()
                    .rev()
                    .find(|h| h.stream == si && h.entry.group_seq == seq)
                    .map(|h| h.entry.volume_id)
            })
            .expect("acked entries are recorded");
        self.notices.push(Notice::Acked(Ack {
            token,
            group_id: group,
            volume_id: volume,
            group_seq: seq,
            ack_latency: io.now() - issued_at,
        }));
        if auto_ship && mode != ReplicationMode::Synchronous {
            self.ship_stream(io, group, si, batch);
        }
    }

    /// Dispatches one event addressed to the engine.
    pub fn handle(&mut self, io: &mut dyn ReplicationIo, event: ReplEvent) -> Vec<Notice> {
        match event {
            ReplEvent::Message(ReplMsg::Entries {
                group,
                stream,
                entries,
            }) => {
                let _ = self.receive_entries(io, group, stream, entries);
            }
            ReplEvent::Message(ReplMsg::BaselineBlock {
                group,
                stream,
                member,
                block,
                data,
            }) => self.on_baseline_block(io, group, stream, member, block, &data),
            ReplEvent::Message(ReplMsg::Confirm {
                group,
                stream,
                received,
                applied,
                baseline_block,
            }) => self.on_confirm(io, group, stream, received, applied, baseline_block),
            ReplEvent::Timer(ReplTimer::Ship { group, stream }) => {
                let batch = self.cfg.ship_batch;
                if let Some(g) = self.groups.get_mut(&group) {
                    g.streams[stream].ship_armed = false;
                }
                self.ship_stream(io, group, stream, batch);
            }
            ReplEvent::Timer(ReplTimer::Retransmit { group, stream }) => {
                self.on_retransmit(io, group, stream)
            }
            ReplEvent::Timer(ReplTimer::BaselineTick { group, stream }) => {
                self.baseline_step(io, group, stream)
            }
            ReplEvent::Timer(ReplTimer::HostAck {
                group,
                stream,
                seq,
                token,
                issued_at,
            }) => self.on_host_ack(io, group, stream, seq, token, issued_at),
        }
        self.drain_notices()
    }

    /// Pauses the applier at an entry boundary and snapshots every backup
    /// member at the same sequence.
    pub fn create_snapshot_group(&mut self, group: GroupId) -> Result<SnapshotGroup> {
        let g = self.group(group)?;
        if g.mode == ReplicationMode::PerVolume {
            return Err(Error::Unsupported(format!(
                "{group} replicates per volume; no group-consistent point exists"
            )));
        }
        if g.phase != Phase::Consistent {
            return Err(Error::FailedPrecondition(format!(
                "{group} is in phase {}",
                g.phase
            )));
        }
        // Single-threaded loop: between events the applier is always at an
        // entry boundary, so every member is captured at the same sequence.
        let at_seq = g.streams[0].applied_seq;
        let backups: Vec<VolumeId> = g.members.iter().map(|m| m.backup).collect();
        let member_snapshot_ids = backups
            .into_iter()
            .map(|v| self.backup.create_snapshot(v))
            .collect::<Result<Vec<_>>>()?;
        let id = SnapshotGroupId(self.next_snapshot_group);
        self.next_snapshot_group += 1;
        let sg = SnapshotGroup {
            snapshot_group_id: id,
            group_id: group,
            at_seq,
            member_snapshot_ids,
        };
        self.snapshot_groups.insert(id, sg.clone());
        Ok(sg)
    }

    pub fn snapshot_group(&self, id: SnapshotGroupId) -> Result<&SnapshotGroup> {
        self.snapshot_groups
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("snapshot group {id}")))
    }

    pub fn snapshot_groups(&self) -> impl Iterator<Item = &SnapshotGroup> {
        self.snapshot_groups.values()
    }

    /// Promotes the backup: applies every gapless entry it already holds,
    /// discards the rest and stops replication.
    pub fn failover(&mut self, io: &dyn ReplicationIo, group: GroupId) -> Result<FailoverReport> {
        if self.group(group)?.phase == Phase::FailedOver {
            return Err(Error::Conflict(format!("{group} has already failed over")));
        }
        let n = self.group(group)?.streams.len();
        for si in 0..n {
            self.apply_stream(group, si, io.now());
        }
        let g = self.group_mut(group)?;
        let mut recovered = 0;
        let mut lost = 0;
        for s in &mut g.streams {
            let tail = s.backup_journal.len();
            s.backup_journal.trim_through(u64::MAX - 1);
            debug_assert!(tail == 0 || s.backup_journal.is_empty());
            s.shipped_seq = s.applied_seq;
            s.unconfirmed.clear();
            s.pending_sync.clear();
            recovered += s.applied_seq;
            lost += s.host_acked_seq.saturating_sub(s.applied_seq);
        }
        g.phase = Phase::FailedOver;
        g.lost_on_failover = Some(lost);
        Ok(FailoverReport {
            recovered_applied_seq: recovered,
            lost_entries: lost,
        })
    }

    pub fn status(&self, group: GroupId) -> Result<ReplicationStatus> {
        let g = self.group(group)?;
        let acked: u64 = g.streams.iter().map(Stream::acked_seq).sum();
        let shipped: u64 = g.streams.iter().map(|s| s.shipped_seq).sum();
        let applied: u64 = g.streams.iter().map(|s| s.applied_seq).sum();
        Ok(ReplicationStatus {
            group_id: group,
            phase: g.phase,
            acked_seq: acked,
            shipped_seq: shipped,
            applied_seq: applied,
            lag_entries: acked - applied,
            lost_on_failover: g.lost_on_failover,
        })
    }

    pub fn group_info(&self, group: GroupId) -> Result<GroupInfo> {
        let g = self.group(group)?;
        Ok(GroupInfo {
            group_id: g.id,
            mode: g.mode,
            phase: g.phase,
            members: g.members.clone(),
            streams: g
                .streams
                .iter()
                .map(|s| StreamInfo {
                    label: s.label.clone(),
                    members: s.members.iter().map(|&m| g.members[m].main).collect(),
                    forward_link: s.fwd.clone(),
                    reverse_link: s.rev.clone(),
                    acked_seq: s.acked_seq(),
                    shipped_seq: s.shipped_seq,
                    applied_seq: s.applied_seq,
                    host_acked_seq: s.host_acked_seq,
                    barrier_seq: s.baseline.barrier_seq,
                    baseline_blocks_sent: s.baseline.blocks_sent,
                    main_journal: s.main_journal.info(),
                    backup_journal: s.backup_journal.info(),
                })
                .collect(),
            created_at: g.created_at,
            consistent_at: g.consistent_at,
        })
    }

    pub fn history(&self, group: GroupId) -> Result<&GroupHistory> {
        Ok(&self.group(group)?.history)
    }

    /// Every entry ever sequenced for the group, one line per entry.
    pub fn journal_dump(&self, group: GroupId) -> Result<String> {
        let mut out = String::new();
        for h in &self.group(group)?.history.entries {
            out.push_str(&h.entry.to_string());
            out.push('\n');
        }
        Ok(out)
    }

    /// Digests of the backup members, in member order.
    pub fn backup_digests(&self, group: GroupId) -> Result<Vec<Digest>> {
        self.group(group)?
            .members
            .iter()
            .map(|m| self.backup.volume_digest(m.backup))
            .collect()
    }

    pub fn main_digests(&self, group: GroupId) -> Result<Vec<Digest>> {
        self.group(group)?
            .members
            .iter()
            .map(|m| self.main.volume_digest(m.main))
            .collect()
    }

    /// Checks the per-stream counter and journal invariants.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for g in self.groups.values() {
            for s in &g.streams {
                if !(s.applied_seq <= s.shipped_seq && s.shipped_seq <= s.acked_seq()) {
                    return Err(format!(
                        "{} stream {}: applied {} shipped {} acked {}",
                        g.id,
                        s.label,
                        s.applied_seq,
                        s.shipped_seq,
                        s.acked_seq()
                    ));
                }
                if s.main_journal.len() > s.main_journal.capacity()
                    || s.backup_journal.len() > s.backup_journal.capacity()
                {
                    return Err(format!(
                        "{} stream {}: journal over capacity",
                        g.id, s.label
                    ));
                }
                if g.phase == Phase::Consistent
                    && s.baseline.barrier_seq.is_none_or(|b| s.applied_seq < b)
                {
                    return Err(format!("{} consistent before reaching its barrier", g.id));
                }
            }
        }
        Ok(())
    }
}
