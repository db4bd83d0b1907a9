//! One complete simulated installation: both sites, the replication engine,
//! the control plane and any running workloads, all driven by a single
//! event loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest as _, Sha256};

use crate::blockstore::{Site, VolumeId, VolumeImage, DEFAULT_BLOCK_SIZE};
use crate::controlplane::{
    AppId, AppRecord, ClaimSpec, ControlPlane, EnginePlugin, PluginCtx, PvSummary, ReconcileAction,
};
use crate::error::{Error, Result};
use crate::replication::{
    EngineConfig, FailoverReport, GroupId, Notice, ReplEvent, ReplicationEngine, ReplicationMode,
    ReplicationStatus, SnapshotGroup, SnapshotGroupId, WriteToken,
};
use crate::simnet::{
    EventId, FaultInjection, FaultKind, LinkConfig, RunLimit, SimDuration, SimNet, SimTime,
    TraceEvent,
};
use crate::workload::{
    replay_oracle, scan, AnalyticsReport, FeedLine, Next, TxLayout, VerificationReport, Workload,
    WorkloadSpec, WorkloadSummary,
};

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub seed: u64,
    /// Inter-site round trip; each direction gets half.
    pub rtt: SimDuration,
    /// Mode the operator uses when a namespace does not pick one.
    pub mode: ReplicationMode,
    pub block_size: usize,
    pub journal_capacity: usize,
    pub reconcile_period: SimDuration,
    pub backpressure_retry: SimDuration,
    pub trace: bool,
    pub engine: EngineConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            rtt: SimDuration::from_ms(100),
            mode: ReplicationMode::Grouped,
            block_size: DEFAULT_BLOCK_SIZE,
            journal_capacity: 4096,
            reconcile_period: SimDuration::from_ms(100),
            backpressure_retry: SimDuration::from_ms(1),
            trace: false,
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Action {
    Repl(ReplEvent),
    Reconcile {
        periodic: bool,
    },
    Workload(AppId),
    /// Completion of a write to a volume that is not replicated yet.
    LocalAck {
        token: WriteToken,
        issued_at: SimTime,
    },
}

impl From<ReplEvent> for Action {
    fn from(ev: ReplEvent) -> Self {
        Action::Repl(ev)
    }
}

impl TraceEvent for Action {
    fn kind(&self) -> &'static str {
        match self {
            Action::Repl(ev) => ev.kind(),
            Action::Reconcile { .. } => "reconcile",
            Action::Workload(_) => "workload",
            Action::LocalAck { .. } => "local_ack",
        }
    }

    fn detail(&self) -> String {
        match self {
            Action::Repl(ev) => ev.detail(),
            Action::Reconcile { periodic: true } => "periodic".into(),
            Action::Reconcile { periodic: false } => "kick".into(),
            Action::Workload(app) => app.to_string(),
            Action::LocalAck { token, .. } => format!("token={}", token.0),
        }
    }
}

/// What `verify` should scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyTarget {
    /// Backup members of the lowest-numbered group.
    Backup,
    Group(GroupId),
    SnapshotGroup(SnapshotGroupId),
}

impl std::str::FromStr for VerifyTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" | "backup" => Ok(VerifyTarget::Backup),
            s if s.starts_with("grp-") => s.parse().map(VerifyTarget::Group),
            s if s.starts_with("sg-") => s.parse().map(VerifyTarget::SnapshotGroup),
            other => Err(Error::InvalidArgument(format!(
                "verify target {other:?}: expected backup, grp-N or sg-N"
            ))),
        }
    }
}

pub struct World {
    cfg: WorldConfig,
    net: SimNet<Action>,
    engine: ReplicationEngine,
    cp: ControlPlane,
    workloads: BTreeMap<AppId, Workload>,
    tokens: BTreeMap<WriteToken, AppId>,
    next_token: u64,
    feed: Vec<FeedLine>,
    kick_pending: bool,
    failovers: BTreeMap<GroupId, FailoverReport>,
    reconcile_log: Vec<(SimTime, ReconcileAction)>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("now", &self.net.now())
            .field("controlplane", &self.cp)
            .finish_non_exhaustive()
    }
}

impl World {
    pub fn new(mut cfg: WorldConfig) -> Self {
        let one_way = SimDuration::from_micros(cfg.rtt.as_micros() / 2);
        cfg.engine.inter_site_link = LinkConfig {
            latency: one_way,
            ..cfg.engine.inter_site_link.clone()
        };
        cfg.engine.journal_capacity = cfg.journal_capacity;
        let mut net = SimNet::new(cfg.seed);
        if cfg.trace {
            net.enable_trace();
        }
        net.schedule_background(cfg.reconcile_period, Action::Reconcile { periodic: true });
        World {
            engine: ReplicationEngine::new(cfg.engine.clone()),
            cp: ControlPlane::new(Box::new(EnginePlugin::new(cfg.journal_capacity)), cfg.mode),
            cfg,
            net,
            workloads: BTreeMap::new(),
            tokens: BTreeMap::new(),
            next_token: 1,
            feed: Vec::new(),
            kick_pending: false,
            failovers: BTreeMap::new(),
            reconcile_log: Vec::new(),
        }
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.net.now()
    }

    pub fn net(&self) -> &SimNet<Action> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut SimNet<Action> {
        &mut self.net
    }

    pub fn engine(&self) -> &ReplicationEngine {
        &self.engine
    }

    pub fn controlplane(&self) -> &ControlPlane {
        &self.cp
    }

    pub fn trace(&self) -> &[String] {
        self.net.trace()
    }

    fn note(&mut self, kind: &str, detail: impl FnOnce() -> String) {
        self.net.trace_note(kind, detail);
    }

    /// Schedules a one-off reconcile at the next period boundary so input
    /// changes are picked up even by a run that stops at quiescence.
    fn kick(&mut self) {
        if self.kick_pending {
            return;
        }
        let period = self.cfg.reconcile_period.as_micros().max(1);
        let delay = period - self.net.now().as_micros() % period;
        self.net.schedule(
            SimDuration::from_micros(delay),
            Action::Reconcile { periodic: false },
        );
        self.kick_pending = true;
    }

    // ---- control plane -------------------------------------------------

    pub fn create_namespace(&mut self, name: &str) -> Result<()> {
        self.cp.create_namespace(name)?;
        self.note("cmd", || format!("create-ns {name}"));
        Ok(())
    }

    pub fn create_app(
        &mut self,
        namespace: &str,
        name: &str,
        claims: &[ClaimSpec],
    ) -> Result<AppRecord> {
        let mut ctx = PluginCtx {
            engine: &mut self.engine,
            io: &mut self.net,
        };
        let app = self.cp.create_app(&mut ctx, namespace, name, claims)?;
        self.note("cmd", || {
            format!("create-app {namespace}/{name} {}", app.app_id)
        });
        self.kick();
        Ok(app)
    }

    /// Claim spec with the world's default block size.
    pub fn claim(&self, requested_blocks: usize) -> ClaimSpec {
        ClaimSpec {
            requested_blocks,
            block_size: self.cfg.block_size,
        }
    }

    pub fn add_claims(&mut self, app: AppId, claims: &[ClaimSpec]) -> Result<()> {
        let mut ctx = PluginCtx {
            engine: &mut self.engine,
            io: &mut self.net,
        };
        self.cp.add_claims(&mut ctx, app, claims)?;
        self.note("cmd", || format!("add-claims {app} n={}", claims.len()));
        self.kick();
        Ok(())
    }

    pub fn tag_namespace(&mut self, namespace: &str, key: &str, value: &str) -> Result<()> {
        self.cp.tag_namespace(namespace, key, value)?;
        self.note("cmd", || format!("tag {namespace} {key}={value}"));
        self.kick();
        Ok(())
    }

    pub fn untag_namespace(&mut self, namespace: &str, key: &str) -> Result<bool> {
        let removed = self.cp.untag_namespace(namespace, key)?;
        self.note("cmd", || format!("untag {namespace} {key}"));
        self.kick();
        Ok(removed)
    }

    /// Runs one reconcile pass immediately.
    pub fn reconcile_now(&mut self) -> Vec<ReconcileAction> {
        let mut ctx = PluginCtx {
            engine: &mut self.engine,
            io: &mut self.net,
        };
        let actions = self.cp.reconcile(&mut ctx);
        let now = self.net.now();
        for a in &actions {
            self.net.trace_note("operator", || a.to_string());
            self.reconcile_log.push((now, a.clone()));
        }
        let notices = self.engine.drain_notices();
        self.process_notices(notices);
        actions
    }

    pub fn reconcile_log(&self) -> &[(SimTime, ReconcileAction)] {
        &self.reconcile_log
    }

    pub fn list_pvs(&self, site: Site) -> Vec<PvSummary> {
        self.cp.list_pvs(site)
    }

    pub fn find_app(&self, namespace: &str, name: &str) -> Result<AppId> {
        self.cp.find_app(namespace, name).map(|a| a.app_id)
    }

    // ---- replication ---------------------------------------------------

    pub fn groups(&self) -> Vec<GroupId> {
        self.engine.group_ids().collect()
    }

    pub fn status(&self, group: GroupId) -> Result<ReplicationStatus> {
        self.engine.status(group)
    }

    pub fn create_snapshot_group(&mut self, group: GroupId) -> Result<SnapshotGroup> {
        let mut ctx = PluginCtx {
            engine: &mut self.engine,
            io: &mut self.net,
        };
        let sg = self.cp.create_snapshot_group(&mut ctx, group)?;
        self.note("cmd", || {
            format!(
                "snapshot-group {group} {} at_seq={}",
                sg.snapshot_group_id, sg.at_seq
            )
        });
        Ok(sg)
    }

    pub fn failover(&mut self, group: GroupId) -> Result<FailoverReport> {
        let report = self.engine.failover(&self.net, group)?;
        self.failovers.insert(group, report);
        self.note("cmd", || {
            format!(
                "failover {group} recovered={} lost={}",
                report.recovered_applied_seq, report.lost_entries
            )
        });
        Ok(report)
    }

    pub fn failover_report(&self, group: GroupId) -> Option<FailoverReport> {
        self.failovers.get(&group).copied()
    }

    pub fn inject(&mut self, fault: FaultInjection) -> Result<EventId> {
        let id = self.net.inject(fault.clone())?;
        self.note("cmd", || format!("inject {fault} at={}", fault.at_time));
        Ok(id)
    }

    /// Fails a site at the current instant.
    pub fn fail_site(&mut self, site: Site) -> Result<()> {
        self.net.apply_fault(&FaultInjection {
            kind: FaultKind::SiteFailure,
            target: site.to_string(),
            at_time: self.net.now(),
        })
    }

    // ---- workload ------------------------------------------------------

    /// Starts the transaction generator of an app with exactly two bound
    /// volumes (sales first, stock second). The writes run as the clock
    /// advances.
    pub fn run_transactions(
        &mut self,
        app: AppId,
        count: u64,
        seed: u64,
        think_time: SimDuration,
    ) -> Result<WorkloadSummary> {
        let vols = self.cp.app_volumes(app)?;
        let [sales, stock] = vols[..] else {
            return Err(Error::InvalidArgument(format!(
                "{app} has {} bound volumes; the workload needs exactly 2",
                vols.len()
            )));
        };
        if self.workloads.get(&app).is_some_and(Workload::is_running) {
            return Err(Error::Conflict(format!("{app} already runs a workload")));
        }
        let main = self.engine.store(Site::Main);
        let (s, k) = (main.volume(sales)?, main.volume(stock)?);
        if s.block_size() != k.block_size() {
            return Err(Error::InvalidArgument(
                "sales and stock volumes differ in block size".into(),
            ));
        }
        let layout = TxLayout {
            sales_blocks: s.block_count(),
            stock_blocks: k.block_count(),
        };
        let first = self.workloads.get(&app).map_or(1, Workload::next_txid);
        let spec = WorkloadSpec {
            count,
            seed,
            think_time,
        };
        let w = Workload::new(app, sales, stock, layout, s.block_size(), first, spec)?;
        let summary = w.summary();
        self.workloads.insert(app, w);
        self.note("cmd", || {
            format!("run-workload {app} count={count} seed={seed}")
        });
        if count > 0 {
            self.net.schedule(SimDuration::ZERO, Action::Workload(app));
        }
        Ok(summary)
    }

    pub fn workload_summary(&self, app: AppId) -> Result<WorkloadSummary> {
        self.workloads
            .get(&app)
            .map(Workload::summary)
            .ok_or_else(|| Error::NotFound(format!("workload of {app}")))
    }

    pub fn workload_summaries(&self) -> Vec<WorkloadSummary> {
        self.workloads.values().map(Workload::summary).collect()
    }

    pub fn workloads_running(&self) -> bool {
        self.workloads.values().any(Workload::is_running)
    }

    pub fn feed_since(&self, since: u64) -> &[FeedLine] {
        let start = (since as usize).min(self.feed.len());
        &self.feed[start..]
    }

    fn push_feed(&mut self, app_id: AppId, txid: u64, phase: &'static str) {
        self.feed.push(FeedLine {
            index: self.feed.len() as u64,
            app_id,
            txid,
            phase,
            logical_time: self.net.now(),
        });
    }

    fn issue(&mut self, app: AppId) {
        let Some(w) = self.workloads.get_mut(&app) else {
            return;
        };
        let Some(p) = w.next_write() else {
            return;
        };
        let token = WriteToken(self.next_token);
        self.next_token += 1;
        let result = match self.engine.group_of_volume(p.volume) {
            Some(g) => self
                .engine
                .group_write(&mut self.net, g, p.volume, p.block, &p.data, token)
                .map(|_| ()),
            None => self.local_write(p.volume, p.block, &p.data, token),
        };
        let w = self.workloads.get_mut(&app).expect("exists");
        match result {
            Ok(()) => {
                self.tokens.insert(token, app);
            }
            Err(Error::Backpressure(_)) => {
                w.retry_later();
                self.net
                    .schedule(self.cfg.backpressure_retry, Action::Workload(app));
            }
            Err(e) => {
                w.stop(e.to_string());
                self.push_feed(app, p.txid, "stopped");
            }
        }
    }

    fn local_write(
        &mut self,
        volume: VolumeId,
        block: usize,
        data: &[u8],
        token: WriteToken,
    ) -> Result<()> {
        if self.net.site_failed(Site::Main) {
            return Err(Error::Unavailable("main site has failed".into()));
        }
        self.engine
            .store_mut(Site::Main)
            .apply_write(volume, block, data)?;
        let issued_at = self.net.now();
        self.net.schedule(
            self.cfg.engine.local_write_latency,
            Action::LocalAck { token, issued_at },
        );
        Ok(())
    }

    fn on_write_acked(&mut self, token: WriteToken, latency: SimDuration) {
        let Some(app) = self.tokens.remove(&token) else {
            return;
        };
        let w = self
            .workloads
            .get_mut(&app)
            .expect("tokens map to workloads");
        let (txid, role, next) = w.on_ack(latency);
        self.push_feed(app, txid, role.as_str());
        match next {
            Next::IssueNow => self.issue(app),
            Next::IssueAfter(d) => {
                self.net.schedule(d, Action::Workload(app));
            }
            Next::Done => {}
        }
    }

    fn on_write_failed(&mut self, token: WriteToken, error: &Error) {
        let Some(app) = self.tokens.remove(&token) else {
            return;
        };
        let w = self
            .workloads
            .get_mut(&app)
            .expect("tokens map to workloads");
        let txid = w.next_txid();
        w.stop(error.to_string());
        self.push_feed(app, txid, "stopped");
    }

    fn process_notices(&mut self, notices: Vec<Notice>) {
        for n in notices {
            match n {
                Notice::Acked(a) => self.on_write_acked(a.token, a.ack_latency),
                Notice::WriteFailed { token, error } => self.on_write_failed(token, &error),
                Notice::BaselineComplete {
                    group_id,
                    barrier_seq,
                } => self.note("baseline_complete", || {
                    format!("{group_id} barrier_seq={barrier_seq}")
                }),
                Notice::Consistent { group_id } => self.note("consistent", || group_id.to_string()),
            }
        }
    }

    // ---- event loop ----------------------------------------------------

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::Repl(ev) => {
                let notices = self.engine.handle(&mut self.net, ev);
                self.process_notices(notices);
            }
            Action::Reconcile { periodic } => {
                if periodic {
                    self.net.schedule_background(
                        self.cfg.reconcile_period,
                        Action::Reconcile { periodic: true },
                    );
                } else {
                    self.kick_pending = false;
                }
                self.reconcile_now();
            }
            Action::Workload(app) => self.issue(app),
            Action::LocalAck { token, issued_at } => {
                if self.net.site_failed(Site::Main) {
                    self.on_write_failed(token, &Error::Unavailable("main site has failed".into()));
                } else {
                    let latency = self.net.now() - issued_at;
                    self.on_write_acked(token, latency);
                }
            }
        }
    }

    /// Fires one event. Returns `false` when nothing is due within `limit`.
    pub fn step(&mut self, limit: RunLimit) -> bool {
        match self.net.next_event(limit) {
            Some(a) => {
                self.dispatch(a);
                true
            }
            None => false,
        }
    }

    /// Fires events until the limit; returns how many fired.
    pub fn run(&mut self, limit: RunLimit) -> u64 {
        let start = self.net.events_fired();
        while self.step(limit) {}
        self.net.events_fired() - start
    }

    pub fn advance(&mut self, by: SimDuration) -> u64 {
        let until = self.net.now() + by;
        self.run(RunLimit::Until(until))
    }

    pub fn run_until_quiescent(&mut self) -> u64 {
        self.run(RunLimit::Quiescent)
    }

    // ---- verification --------------------------------------------------

    /// Main-site (sales, stock) volumes of the app whose workload volumes
    /// are members of `group`.
    fn workload_pair(&self, group: GroupId) -> Result<(VolumeId, VolumeId)> {
        let members: Vec<VolumeId> = self
            .engine
            .group_info(group)?
            .members
            .iter()
            .map(|m| m.main)
            .collect();
        for app in self.cp.apps() {
            if let Ok(v) = self.cp.app_volumes(app.app_id) {
                if let [s, k] = v[..] {
                    if members.contains(&s) && members.contains(&k) {
                        return Ok((s, k));
                    }
                }
            }
        }
        match members[..] {
            [s, k] => Ok((s, k)),
            _ => Err(Error::InvalidArgument(format!(
                "{group} has no sales/stock volume pair"
            ))),
        }
    }

    fn layout_of(&self, sales: VolumeId, stock: VolumeId) -> Result<TxLayout> {
        let main = self.engine.store(Site::Main);
        Ok(TxLayout {
            sales_blocks: main.volume(sales)?.block_count(),
            stock_blocks: main.volume(stock)?.block_count(),
        })
    }

    pub fn verify(&self, target: VerifyTarget) -> Result<VerificationReport> {
        match target {
            VerifyTarget::Backup => match self.engine.group_ids().next() {
                Some(g) => self.verify_group(g, "backup"),
                None => Ok(VerificationReport::empty("backup")),
            },
            VerifyTarget::Group(g) => self.verify_group(g, &g.to_string()),
            VerifyTarget::SnapshotGroup(sg) => self.verify_snapshot_group(sg),
        }
    }

    fn backup_images(&self, group: GroupId) -> Result<BTreeMap<VolumeId, VolumeImage>> {
        let backup = self.engine.store(Site::Backup);
        self.engine
            .group_info(group)?
            .members
            .iter()
            .map(|m| Ok((m.main, backup.image(m.backup)?)))
            .collect()
    }

    fn verify_group(&self, group: GroupId, label: &str) -> Result<VerificationReport> {
        let (sales, stock) = self.workload_pair(group)?;
        let layout = self.layout_of(sales, stock)?;
        let images = self.backup_images(group)?;
        let result = scan(layout, &images[&sales], &images[&stock]);
        let info = self.engine.group_info(group)?;
        let history = self.engine.history(group)?;
        let prefix_ok = if info.mode == ReplicationMode::PerVolume {
            crate::workload::matches_some_global_prefix(history, &images)
        } else {
            let applied = info.streams[0].applied_seq;
            let oracle = replay_oracle(history.stream_entries(0), applied, &history.baseline)?;
            images_match(&oracle, &images)
        };
        Ok(VerificationReport::from_scan(
            format!("{label} ({group})"),
            result,
            prefix_ok,
        ))
    }

    fn snapshot_images(&self, sg: &SnapshotGroup) -> Result<BTreeMap<VolumeId, VolumeImage>> {
        let info = self.engine.group_info(sg.group_id)?;
        let backup = self.engine.store(Site::Backup);
        info.members
            .iter()
            .zip(&sg.member_snapshot_ids)
            .map(|(m, s)| Ok((m.main, backup.snapshot_image(*s)?)))
            .collect()
    }

    fn verify_snapshot_group(&self, id: SnapshotGroupId) -> Result<VerificationReport> {
        let sg = self.engine.snapshot_group(id)?.clone();
        let (sales, stock) = self.workload_pair(sg.group_id)?;
        let layout = self.layout_of(sales, stock)?;
        let images = self.snapshot_images(&sg)?;
        let result = scan(layout, &images[&sales], &images[&stock]);
        let history = self.engine.history(sg.group_id)?;
        let oracle = replay_oracle(history.stream_entries(0), sg.at_seq, &history.baseline)?;
        Ok(VerificationReport::from_scan(
            id.to_string(),
            result,
            images_match(&oracle, &images),
        ))
    }

    /// Committed-transaction aggregate as read from the snapshot volumes.
    pub fn analytics_report(&self, id: SnapshotGroupId) -> Result<AnalyticsReport> {
        let sg = self.engine.snapshot_group(id)?.clone();
        let (sales, stock) = self.workload_pair(sg.group_id)?;
        let layout = self.layout_of(sales, stock)?;
        let images = self.snapshot_images(&sg)?;
        let result = scan(layout, &images[&sales], &images[&stock]);
        Ok(AnalyticsReport {
            snapshot_group_id: id,
            at_seq: sg.at_seq,
            committed_count: result.committed.len() as u64,
            total_sales_amount: result.total_sales_amount,
        })
    }

    // ---- whole-state views ---------------------------------------------

    /// Hash of every volume on both sites plus the control-plane records,
    /// for comparing two runs that should have reached the same state.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for site in [Site::Main, Site::Backup] {
            for v in self.engine.store(site).volumes() {
                h.update(format!("{site} {} {}\n", v.id(), v.digest()));
            }
        }
        for site in [Site::Main, Site::Backup] {
            let pvs = serde_json::to_string(&self.cp.list_pvs(site)).expect("serializable");
            h.update(pvs);
        }
        for cr in self.cp.crs() {
            h.update(serde_json::to_string(cr).expect("serializable"));
        }
        for g in self.engine.group_ids() {
            let st = self.engine.status(g).expect("listed");
            h.update(serde_json::to_string(&st).expect("serializable"));
        }
        hex::encode(h.finalize())
    }

    /// Writes every volume of both sites to `dir`.
    pub fn persist(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = self.engine.store(Site::Main).persist_all(dir)?;
        out.extend(self.engine.store(Site::Backup).persist_all(dir)?);
        Ok(out)
    }
}

fn images_match(
    expected: &BTreeMap<VolumeId, VolumeImage>,
    actual: &BTreeMap<VolumeId, VolumeImage>,
) -> bool {
    actual
        .iter()
        .all(|(v, img)| expected.get(v).is_some_and(|e| e.digest() == img.digest()))
}
