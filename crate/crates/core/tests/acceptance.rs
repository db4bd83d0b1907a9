//! Acceptance campaigns. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgrepl::blockstore::{BlockStore, Site, VolumeId, VolumeImage};
use cgrepl::controlplane::{AppId, MODE_TAG_KEY, TRIGGER_TAG_KEY, TRIGGER_TAG_VALUE};
use cgrepl::replication::{GroupId, Phase, ReplicationMode};
use cgrepl::scenario::run_scenario;
use cgrepl::simnet::{FaultInjection, FaultKind, RunLimit, SimDuration};
use cgrepl::workload::{
    explore_interleavings, replay_oracle, BlockContent, Role, TransactionRecord,
};
use cgrepl::world::{VerifyTarget, World, WorldConfig};

const TXS: u64 = 500;
const BLOCKS: usize = 1024;
const BLOCK_SIZE: usize = 256;

struct Outcome {
    pass: bool,
    summary: String,
}

fn world(seed: u64, rtt_ms: u64, trace: bool) -> World {
    World::new(WorldConfig {
        seed,
        rtt: SimDuration::from_ms(rtt_ms),
        block_size: BLOCK_SIZE,
        trace,
        ..WorldConfig::default()
    })
}

fn tag(w: &mut World, mode: ReplicationMode) {
    if mode != ReplicationMode::Grouped {
        w.tag_namespace("shop", MODE_TAG_KEY, mode.as_str())
            .unwrap();
    }
    w.tag_namespace("shop", TRIGGER_TAG_KEY, TRIGGER_TAG_VALUE)
        .unwrap();
}

fn add_app(w: &mut World) -> AppId {
    w.create_namespace("shop").unwrap();
    let claims = [w.claim(BLOCKS), w.claim(BLOCKS)];
    w.create_app("shop", "db", &claims).unwrap().app_id
}

/// Steps until the namespace's group exists and is consistent.
fn until_consistent(w: &mut World) -> GroupId {
    loop {
        if let Some(g) = w.controlplane().group_for("shop") {
            if w.status(g).unwrap().phase == Phase::Consistent {
                return g;
            }
        }
        assert!(w.step(RunLimit::Quiescent), "group never became consistent");
    }
}

/// A replicated app with a started workload.
fn replicated(seed: u64, rtt_ms: u64, mode: ReplicationMode) -> (World, GroupId, AppId) {
    let mut w = world(seed, rtt_ms, false);
    let app = add_app(&mut w);
    tag(&mut w, mode);
    let g = until_consistent(&mut w);
    (w, g, app)
}

fn start(w: &mut World, app: AppId, seed: u64) {
    w.run_transactions(app, TXS, seed, SimDuration::from_ms(1))
        .unwrap();
}

fn slow_links(w: &mut World, g: GroupId) {
    for (vol, ms) in [("vol-0001", 1), ("vol-0002", 50)] {
        w.inject(FaultInjection {
            kind: FaultKind::DelayChange {
                latency: SimDuration::from_ms(ms),
                jitter: None,
            },
            target: format!("{g}/{vol}/fwd"),
            at_time: w.now(),
        })
        .unwrap();
    }
}

/// Events from workload start until it finishes.
fn workload_events(w: &mut World) -> u64 {
    let start = w.net().events_fired();
    while w.workloads_running() && w.step(RunLimit::Quiescent) {}
    w.net().events_fired() - start
}

struct FailoverRun {
    torn: usize,
    prefix_ok: bool,
    lost: u64,
}

/// Fails the main site after `k` events of the workload, fails over and
/// verifies the backup, both immediately and after in-flight traffic has
/// had time to land.
fn fail_after(mut w: World, g: GroupId, k: u64) -> FailoverRun {
    for _ in 0..k {
        if !w.step(RunLimit::Quiescent) {
            break;
        }
    }
    w.fail_site(Site::Main).unwrap();
    let report = w.failover(g).unwrap();
    let first = w.verify(VerifyTarget::Group(g)).unwrap();
    w.advance(SimDuration::from_ms(500));
    let later = w.verify(VerifyTarget::Group(g)).unwrap();
    assert_eq!(first, later, "backup changed after failover");
    FailoverRun {
        torn: first.torn_txids.len(),
        prefix_ok: first.prefix_ok,
        lost: report.lost_entries,
    }
}

fn failover_campaign(
    runs: u64,
    mode: ReplicationMode,
    pick: impl Fn(&mut ChaCha8Rng, u64) -> u64,
) -> Vec<FailoverRun> {
    (0..runs)
        .map(|seed| {
            let setup = || {
                let (mut w, g, app) = replicated(seed, 100, mode);
                if mode == ReplicationMode::PerVolume {
                    slow_links(&mut w, g);
                }
                start(&mut w, app, seed);
                (w, g)
            };
            let (mut probe, _) = setup();
            let total = workload_events(&mut probe);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa11);
            let k = pick(&mut rng, total);
            let (w, g) = setup();
            fail_after(w, g, k)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let runs = failover_campaign(100, ReplicationMode::Grouped, |rng, total| {
        rng.gen_range(1..=total)
    });
    let clean = runs.iter().filter(|r| r.torn == 0).count();
    let prefix = runs.iter().filter(|r| r.prefix_ok).count();
    Outcome {
        pass: clean == 100 && prefix == 100,
        summary: format!("grouped failover: {clean}/100 runs without torn transactions, {prefix}/100 prefix-consistent"),
    }
}

fn criterion_2() -> Outcome {
    let runs = failover_campaign(100, ReplicationMode::PerVolume, |rng, total| {
        rng.gen_range(total / 4..=3 * total / 4)
    });
    let torn_runs = runs.iter().filter(|r| r.torn > 0).count();
    let torn_total: usize = runs.iter().map(|r| r.torn).sum();
    let explored = explore_interleavings(ReplicationMode::PerVolume, 4);
    Outcome {
        pass: torn_runs >= 1 && explored.torn_cuts >= 1,
        summary: format!(
            "per_volume 1ms/50ms links: {torn_runs}/100 runs torn ({torn_total} torn txids total); \
             exhaustive 4-write schedule: {} of {} cuts torn over {} interleavings",
            explored.torn_cuts, explored.cuts_examined, explored.interleavings
        ),
    }
}

fn mean_ack_ms(seed: u64, rtt_ms: u64, mode: ReplicationMode) -> f64 {
    let (mut w, _, app) = replicated(seed, rtt_ms, mode);
    start(&mut w, app, seed);
    workload_events(&mut w);
    let s = w.workload_summary(app).unwrap();
    assert_eq!(s.acked_count, TXS);
    s.mean_ack_latency_ms
}

fn criterion_3() -> Outcome {
    let near = mean_ack_ms(1, 0, ReplicationMode::Grouped);
    let far = mean_ack_ms(1, 100, ReplicationMode::Grouped);
    let rel = (far - near).abs() / near;
    let sync = mean_ack_ms(1, 100, ReplicationMode::Synchronous);
    let runs = failover_campaign(20, ReplicationMode::Synchronous, |rng, total| {
        rng.gen_range(1..=total)
    });
    let lossless = runs.iter().filter(|r| r.lost == 0 && r.torn == 0).count();
    Outcome {
        pass: rel < 0.10 && sync >= 100.0 && lossless == runs.len(),
        summary: format!(
            "grouped mean ack {near:.3} ms at RTT 0, {far:.3} ms at RTT 100 ({:.1}% apart); \
             synchronous {sync:.3} ms at RTT 100; synchronous failover lost nothing in {lossless}/{} runs",
            rel * 100.0,
            runs.len()
        ),
    }
}

fn oracle_digests(w: &World, g: GroupId, upto: u64) -> Vec<cgrepl::blockstore::Digest> {
    let h = w.engine().history(g).unwrap();
    let images = replay_oracle(h.stream_entries(0), upto, &h.baseline).unwrap();
    let info = w.engine().group_info(g).unwrap();
    info.members
        .iter()
        .map(|m| images[&m.main].digest())
        .collect()
}

fn criterion_4() -> Outcome {
    // Writes before the copy starts and throughout it.
    let mut w = world(4, 100, true);
    let app = add_app(&mut w);
    w.run_transactions(app, 150, 4, SimDuration::from_ms(1))
        .unwrap();
    workload_events(&mut w);
    tag(&mut w, ReplicationMode::Grouped);
    w.run_transactions(app, 300, 5, SimDuration::from_ms(1))
        .unwrap();
    let g = until_consistent(&mut w);
    let barrier: u64 = w
        .trace()
        .iter()
        .find_map(|l| {
            l.split("ev=baseline_complete")
                .nth(1)?
                .split("barrier_seq=")
                .nth(1)?
                .parse()
                .ok()
        })
        .expect("baseline completion is traced");
    let applied = w.status(g).unwrap().applied_seq;
    let at_barrier = w.engine().backup_digests(g).unwrap() == oracle_digests(&w, g, applied);
    workload_events(&mut w);
    w.run_until_quiescent();
    let applied_end = w.status(g).unwrap().applied_seq;
    let at_end = w.engine().backup_digests(g).unwrap() == oracle_digests(&w, g, applied_end);

    // Quiet copy: only prior writes.
    let mut q = world(6, 100, false);
    let app = add_app(&mut q);
    q.run_transactions(app, 150, 6, SimDuration::from_ms(1))
        .unwrap();
    workload_events(&mut q);
    tag(&mut q, ReplicationMode::Grouped);
    let gq = until_consistent(&mut q);
    let quiet = q.engine().backup_digests(gq).unwrap() == q.engine().main_digests(gq).unwrap();

    Outcome {
        pass: barrier >= 50 && at_barrier && at_end && quiet,
        summary: format!(
            "{barrier} writes during copy; backup = oracle at consistency (seq {applied}): {at_barrier}, \
             at end (seq {applied_end}): {at_end}; quiet copy equals main: {quiet}"
        ),
    }
}

/// Committed count and sales total after the first `at_seq` acked writes,
/// read straight from the written records.
fn aggregate_at(w: &World, g: GroupId, at_seq: u64) -> (u64, u64) {
    let h = w.engine().history(g).unwrap();
    let mut sales = BTreeMap::new();
    let mut committed = BTreeSet::new();
    for e in h.stream_entries(0).take_while(|e| e.group_seq <= at_seq) {
        if let BlockContent::Record(r) = TransactionRecord::decode(&e.payload) {
            match r.role {
                Role::SalesData => {
                    sales.insert(r.txid, r.amount as u64);
                }
                Role::Commit => {
                    committed.insert(r.txid);
                }
                Role::StockData => {}
            }
        }
    }
    let total = committed.iter().map(|t| sales[t]).sum();
    (committed.len() as u64, total)
}

fn criterion_5() -> Outcome {
    let setup = || {
        let (mut w, g, app) = replicated(5, 100, ReplicationMode::Grouped);
        start(&mut w, app, 5);
        (w, g)
    };
    let (mut probe, _) = setup();
    let total = workload_events(&mut probe);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut instants = BTreeSet::new();
    while instants.len() < 50 {
        instants.insert(rng.gen_range(0..total));
    }
    let (mut w, g) = setup();
    let mut sgs = Vec::new();
    for i in 0..total {
        if instants.contains(&i) {
            sgs.push(w.create_snapshot_group(g).unwrap());
        }
        w.step(RunLimit::Quiescent);
    }
    w.run_until_quiescent();
    let backup = w.engine().store(Site::Backup);
    let mut digests_ok = 0;
    let mut analytics_ok = 0;
    for sg in &sgs {
        let expect = oracle_digests(&w, g, sg.at_seq);
        let got: Vec<_> = sg
            .member_snapshot_ids
            .iter()
            .map(|s| backup.snapshot_digest(*s).unwrap())
            .collect();
        digests_ok += (got == expect) as usize;
        let a = w.analytics_report(sg.snapshot_group_id).unwrap();
        analytics_ok +=
            ((a.committed_count, a.total_sales_amount) == aggregate_at(&w, g, sg.at_seq)) as usize;
    }
    let distinct: BTreeSet<u64> = sgs.iter().map(|s| s.at_seq).collect();
    Outcome {
        pass: sgs.len() == 50 && digests_ok == 50 && analytics_ok == 50,
        summary: format!(
            "{} snapshot groups ({} distinct at_seq): {digests_ok} match the oracle digests, {analytics_ok} match the oracle aggregate",
            sgs.len(),
            distinct.len()
        ),
    }
}

fn criterion_6() -> Outcome {
    let mut w = world(6, 100, false);
    w.create_namespace("shop").unwrap();
    w.create_namespace("quiet").unwrap();
    for ns in ["shop", "quiet"] {
        let claims = [w.claim(64), w.claim(64)];
        w.create_app(ns, "db", &claims).unwrap();
    }
    w.reconcile_now();
    w.tag_namespace("shop", TRIGGER_TAG_KEY, TRIGGER_TAG_VALUE)
        .unwrap();
    let shop_vols = w.controlplane().namespace_volumes("shop").unwrap();
    let mut cycles = None;
    for c in 1..=3 {
        w.reconcile_now();
        let converged = w.groups().len() == 1
            && w.controlplane().group_for("shop").is_some_and(|g| {
                let info = w.engine().group_info(g).unwrap();
                info.members.iter().map(|m| m.main).collect::<Vec<_>>() == shop_vols
            })
            && w.list_pvs(Site::Backup).len() == 2;
        if converged {
            cycles = Some(c);
            break;
        }
    }
    let extra: usize = (0..100).map(|_| w.reconcile_now().len()).sum();
    let quiet_groups = w.controlplane().group_for("quiet").is_some() as usize
        + w.controlplane().cr_for("quiet").is_some() as usize;
    let backup_of_quiet = w
        .list_pvs(Site::Backup)
        .iter()
        .filter(|p| p.replica_of.is_some_and(|v| !shop_vols.contains(&v)))
        .count();
    Outcome {
        pass: cycles.is_some() && extra == 0 && quiet_groups == 0 && backup_of_quiet == 0 && w.groups().len() == 1,
        summary: format!(
            "converged after {} reconcile cycle(s); {extra} actions over 100 further cycles; untagged namespace has {quiet_groups} groups/CRs",
            cycles.map_or("no".to_string(), |c| c.to_string())
        ),
    }
}

fn criterion_7() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    names.sort();
    let mut identical = 0;
    for path in &names {
        let text = std::fs::read_to_string(path).unwrap();
        let cfg = WorldConfig {
            seed: 42,
            trace: true,
            ..WorldConfig::default()
        };
        let (a, wa) = run_scenario(&text, cfg.clone());
        let (b, wb) = run_scenario(&text, cfg);
        let same = a == b && wa.trace() == wb.trace() && !wa.trace().is_empty();
        identical += same as usize;
    }
    Outcome {
        pass: !names.is_empty() && identical == names.len(),
        summary: format!(
            "{identical}/{} bundled scenarios reproduce byte-identical traces and reports",
            names.len()
        ),
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut matched = 0;
    for _ in 0..1000 {
        let blocks = rng.gen_range(1..=8);
        let mut store = BlockStore::new(Site::Main);
        let vol: VolumeId = store.create_volume(blocks, 16).unwrap();
        let mut live = VolumeImage::zeroed(blocks, 16);
        let mut copies = Vec::new();
        let mut ok = true;
        for _ in 0..rng.gen_range(1..40) {
            if rng.gen_bool(0.3) {
                copies.push((store.create_snapshot(vol).unwrap(), live.clone()));
            } else {
                let b = rng.gen_range(0..blocks);
                let mut data = [0u8; 16];
                rng.fill_bytes(&mut data);
                store.apply_write(vol, b, &data).unwrap();
                live.block_mut(b).copy_from_slice(&data);
            }
            ok &= store.image(vol).unwrap() == live;
            ok &= copies.iter().all(|(s, img)| {
                store.snapshot_image(*s).unwrap() == *img
                    && store.snapshot_digest(*s).unwrap() == img.digest()
                    && (0..blocks).all(|b| store.read_snapshot(*s, b).unwrap() == img.block(b))
            });
        }
        matched += ok as usize;
    }
    Outcome {
        pass: matched == 1000,
        summary: format!(
            "{matched}/1000 randomized write/snapshot interleavings match the full-copy oracle"
        ),
    }
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| Outcome {
            pass: false,
            summary: format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .map(String::as_str)
                    .or(p.downcast_ref::<&str>().copied())
                    .unwrap_or("?")
            ),
        });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} criterion {n}: {} [{:.1}s]",
            outcome.summary,
            t.elapsed().as_secs_f64()
        );
        failed += !outcome.pass as usize;
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
