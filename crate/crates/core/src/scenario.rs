//! Line-oriented scenario files.
//!
//! Each non-blank line is `verb key=value ...`; `#` starts a comment. Every
//! command accepts `expect_err=<Code>` to assert that it fails with that
//! error code. A run exits 0 when every command and assertion succeeded, 1
//! on a failed assertion or unexpected error, 2 when the file does not
//! parse.

use std::collections::BTreeMap;
use std::fmt;

use crate::blockstore::Site;
use crate::controlplane::{ClaimSpec, CrStatus, TRIGGER_TAG_KEY};
use crate::error::Error;
use crate::replication::{GroupId, SnapshotGroupId};
use crate::simnet::{FaultInjection, FaultKind, RunLimit, SimDuration, SimTime};
use crate::world::{VerifyTarget, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    CreateNs,
    CreateApp,
    Tag,
    RunWorkload,
    SnapshotGroup,
    Inject,
    Failover,
    Verify,
    Advance,
    Assert,
}

impl Verb {
    fn parse(s: &str) -> Option<Verb> {
        Some(match s {
            "create-ns" => Verb::CreateNs,
            "create-app" => Verb::CreateApp,
            "tag" => Verb::Tag,
            "run-workload" => Verb::RunWorkload,
            "snapshot-group" => Verb::SnapshotGroup,
            "inject" => Verb::Inject,
            "failover" => Verb::Failover,
            "verify" => Verb::Verify,
            "advance" => Verb::Advance,
            "assert" => Verb::Assert,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::CreateNs => "create-ns",
            Verb::CreateApp => "create-app",
            Verb::Tag => "tag",
            Verb::RunWorkload => "run-workload",
            Verb::SnapshotGroup => "snapshot-group",
            Verb::Inject => "inject",
            Verb::Failover => "failover",
            Verb::Verify => "verify",
            Verb::Advance => "advance",
            Verb::Assert => "assert",
        }
    }

    /// (required keys, optional keys)
    fn keys(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Verb::CreateNs => (&["name"], &[]),
            Verb::CreateApp => (&["ns", "name", "claims"], &["block_size"]),
            Verb::Tag => (&["ns"], &["key", "value", "remove"]),
            Verb::RunWorkload => (&["app", "count"], &["seed", "think_ms", "wait"]),
            Verb::SnapshotGroup => (&[], &["group", "ns"]),
            Verb::Inject => (
                &["kind", "target"],
                &["at_ms", "in_ms", "latency_ms", "jitter_ms", "heal"],
            ),
            Verb::Failover => (&[], &["group", "ns"]),
            Verb::Verify => (&[], &["target"]),
            Verb::Advance => (&[], &["ms", "until", "group", "ns"]),
            Verb::Assert => (
                &["metric"],
                &[
                    "group", "ns", "app", "sg", "target", "site", "eq", "ne", "gt", "ge", "lt",
                    "le",
                ],
            ),
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioCommand {
    pub verb: Verb,
    pub args: BTreeMap<String, String>,
    pub line_no: usize,
}

impl fmt::Display for ScenarioCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.verb)?;
        for (k, v) in &self.args {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line_no: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line_no, self.message)
    }
}

impl std::error::Error for ParseError {}

const COMPARISONS: [&str; 6] = ["eq", "ne", "gt", "ge", "lt", "le"];

pub fn parse(text: &str) -> std::result::Result<Vec<ScenarioCommand>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| ParseError { line_no, message };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let word = words.next().expect("line is not empty");
        let verb = Verb::parse(word).ok_or_else(|| err(format!("unknown verb {word:?}")))?;
        let (required, optional) = verb.keys();
        let mut args = BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {w:?}")))?;
            if k != "expect_err" && !required.contains(&k) && !optional.contains(&k) {
                return Err(err(format!("{verb} does not take {k:?}")));
            }
            if args.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("{k:?} given twice")));
            }
        }
        if let Some(k) = required.iter().find(|k| !args.contains_key(**k)) {
            return Err(err(format!("{verb} needs {k}=")));
        }
        if verb == Verb::Assert
            && COMPARISONS
                .iter()
                .filter(|c| args.contains_key(**c))
                .count()
                != 1
        {
            return Err(err(
                "assert needs exactly one of eq= ne= gt= ge= lt= le=".into()
            ));
        }
        if verb == Verb::Advance && args.contains_key("ms") == args.contains_key("until") {
            return Err(err("advance needs exactly one of ms= or until=".into()));
        }
        out.push(ScenarioCommand {
            verb,
            args,
            line_no,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioOutcome {
    pub exit_code: i32,
    pub commands_run: usize,
    pub assertions_failed: usize,
    pub report: Vec<String>,
}

impl ScenarioOutcome {
    pub fn report_text(&self) -> String {
        let mut s = self.report.join("\n");
        s.push('\n');
        s
    }
}

/// Parses and runs a scenario against a fresh world built from `cfg`.
/// Returns the world too, so callers can write its trace.
pub fn run_scenario(text: &str, cfg: WorldConfig) -> (ScenarioOutcome, World) {
    let mut world = World::new(cfg);
    let commands = match parse(text) {
        Ok(c) => c,
        Err(e) => {
            let outcome = ScenarioOutcome {
                exit_code: 2,
                commands_run: 0,
                assertions_failed: 0,
                report: vec![format!("parse error: {e}")],
            };
            return (outcome, world);
        }
    };
    let mut runner = Runner {
        world: &mut world,
        report: Vec::new(),
        failed: 0,
    };
    let mut exit_code = 0;
    let mut run = 0;
    for cmd in &commands {
        run += 1;
        match runner.exec(cmd) {
            Ok(()) => {}
            Err(Stop(msg)) => {
                runner
                    .report
                    .push(format!("line {}: {cmd}: {msg}", cmd.line_no));
                exit_code = 1;
                break;
            }
        }
    }
    if runner.failed > 0 {
        exit_code = 1;
    }
    let summary = format!(
        "done: {run}/{} commands, {} failed assertions, exit {exit_code}, t={}",
        commands.len(),
        runner.failed,
        runner.world.now()
    );
    runner.report.push(summary);
    let outcome = ScenarioOutcome {
        exit_code,
        commands_run: run,
        assertions_failed: runner.failed,
        report: runner.report,
    };
    (outcome, world)
}

/// A command that cannot continue; aborts the run.
struct Stop(String);

impl From<Error> for Stop {
    fn from(e: Error) -> Self {
        Stop(format!("{}: {e}", e.code()))
    }
}

struct Runner<'w> {
    world: &'w mut World,
    report: Vec<String>,
    failed: usize,
}

fn arg<'a>(cmd: &'a ScenarioCommand, key: &str) -> std::result::Result<&'a str, Stop> {
    cmd.args
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Stop(format!("missing {key}=")))
}

fn num<T: std::str::FromStr>(
    cmd: &ScenarioCommand,
    key: &str,
) -> std::result::Result<Option<T>, Stop> {
    cmd.args
        .get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Stop(format!("{key}={v} is not a number")))
        })
        .transpose()
}

fn flag(cmd: &ScenarioCommand, key: &str) -> std::result::Result<bool, Stop> {
    match cmd.args.get(key).map(String::as_str) {
        None | Some("false") => Ok(false),
        Some("true") => Ok(true),
        Some(v) => Err(Stop(format!("{key}={v} is not true/false"))),
    }
}

impl Runner<'_> {
    fn log(&mut self, cmd: &ScenarioCommand, what: impl fmt::Display) {
        self.report.push(format!(
            "line {}: t={} {} -> {what}",
            cmd.line_no,
            self.world.now(),
            cmd.verb
        ));
    }

    fn exec(&mut self, cmd: &ScenarioCommand) -> std::result::Result<(), Stop> {
        let expected = cmd.args.get("expect_err").cloned();
        let result = self.apply(cmd);
        match (result, expected) {
            (Ok(out), None) => {
                self.log(cmd, out);
                Ok(())
            }
            (Err(Outcome::Error(e)), Some(code)) if e.code() == code => {
                self.log(cmd, format!("expected error {code}"));
                Ok(())
            }
            (Err(Outcome::Error(e)), Some(code)) => Err(Stop(format!(
                "expected error {code}, got {}: {e}",
                e.code()
            ))),
            (Ok(_), Some(code)) => Err(Stop(format!("expected error {code}, command succeeded"))),
            (Err(Outcome::Error(e)), None) => Err(e.into()),
            (Err(Outcome::Stop(s)), _) => Err(s),
        }
    }

    fn group_arg(&self, cmd: &ScenarioCommand) -> std::result::Result<GroupId, Outcome> {
        if let Some(g) = cmd.args.get("group") {
            return Ok(g.parse()?);
        }
        if let Some(ns) = cmd.args.get("ns") {
            return self
                .world
                .controlplane()
                .group_for(ns)
                .ok_or_else(|| Error::NotFound(format!("group of namespace {ns}")).into());
        }
        self.world
            .groups()
            .first()
            .copied()
            .ok_or_else(|| Error::NotFound("no consistency group exists".into()).into())
    }

    fn app_arg(
        &self,
        cmd: &ScenarioCommand,
    ) -> std::result::Result<crate::controlplane::AppId, Outcome> {
        let spec = arg(cmd, "app")?;
        let (ns, name) = spec
            .split_once('/')
            .ok_or_else(|| Stop(format!("app={spec} must be namespace/name")))?;
        Ok(self.world.find_app(ns, name)?)
    }

    fn apply(&mut self, cmd: &ScenarioCommand) -> std::result::Result<String, Outcome> {
        let w = &mut *self.world;
        match cmd.verb {
            Verb::CreateNs => {
                w.create_namespace(arg(cmd, "name")?)?;
                Ok("ok".into())
            }
            Verb::CreateApp => {
                let block_size = num(cmd, "block_size")?.unwrap_or(w.config().block_size);
                let claims = arg(cmd, "claims")?
                    .split(',')
                    .map(|c| {
                        c.parse().map(|requested_blocks| ClaimSpec {
                            requested_blocks,
                            block_size,
                        })
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Stop("claims= must be comma-separated block counts".into()))?;
                let app = w.create_app(arg(cmd, "ns")?, arg(cmd, "name")?, &claims)?;
                Ok(format!(
                    "{} with {} claims",
                    app.app_id,
                    app.claim_ids.len()
                ))
            }
            Verb::Tag => {
                let ns = arg(cmd, "ns")?;
                let key = cmd.args.get("key").map_or(TRIGGER_TAG_KEY, String::as_str);
                if flag(cmd, "remove")? {
                    let removed = w.untag_namespace(ns, key)?;
                    return Ok(format!("removed={removed}"));
                }
                w.tag_namespace(ns, key, arg(cmd, "value")?)?;
                Ok("ok".into())
            }
            Verb::RunWorkload => {
                let app = self.app_arg(cmd)?;
                let w = &mut *self.world;
                let count = num(cmd, "count")?.unwrap_or(0);
                let seed = num(cmd, "seed")?.unwrap_or(0);
                let think = SimDuration::from_micros(
                    (num::<f64>(cmd, "think_ms")?.unwrap_or(0.0) * 1000.0).round() as u64,
                );
                w.run_transactions(app, count, seed, think)?;
                if flag(cmd, "wait")? {
                    while w.workloads_running() && w.step(RunLimit::Quiescent) {}
                }
                let s = w.workload_summary(app)?;
                Ok(format!(
                    "{app} acked={} mean_ack_ms={:.3}",
                    s.acked_count, s.mean_ack_latency_ms
                ))
            }
            Verb::SnapshotGroup => {
                let g = self.group_arg(cmd)?;
                let sg = self.world.create_snapshot_group(g)?;
                Ok(format!("{} at_seq={}", sg.snapshot_group_id, sg.at_seq))
            }
            Verb::Inject => {
                let kind = match arg(cmd, "kind")? {
                    "site_failure" => FaultKind::SiteFailure,
                    "partition" => FaultKind::Partition {
                        partitioned: !flag(cmd, "heal")?,
                    },
                    "delay_change" => FaultKind::DelayChange {
                        latency: ms_arg(cmd, "latency_ms")?
                            .ok_or_else(|| Stop("delay_change needs latency_ms=".into()))?,
                        jitter: ms_arg(cmd, "jitter_ms")?,
                    },
                    other => return Err(Stop(format!("unknown fault kind {other:?}")).into()),
                };
                let now = w.now();
                let at_time = match (ms_arg(cmd, "at_ms")?, ms_arg(cmd, "in_ms")?) {
                    (Some(at), None) => SimTime(at.as_micros()),
                    (None, Some(d)) => now + d,
                    (None, None) => now,
                    (Some(_), Some(_)) => {
                        return Err(Stop("give at_ms= or in_ms=, not both".into()).into())
                    }
                };
                let fault = FaultInjection {
                    kind,
                    target: arg(cmd, "target")?.to_string(),
                    at_time,
                };
                w.inject(fault)?;
                Ok(format!("scheduled at {at_time}"))
            }
            Verb::Failover => {
                let g = self.group_arg(cmd)?;
                let r = self.world.failover(g)?;
                Ok(format!(
                    "{g} recovered_applied_seq={} lost_entries={}",
                    r.recovered_applied_seq, r.lost_entries
                ))
            }
            Verb::Verify => {
                let target: VerifyTarget = cmd
                    .args
                    .get("target")
                    .map_or("backup", String::as_str)
                    .parse()?;
                let r = w.verify(target)?;
                Ok(format!(
                    "{}: committed={} incomplete={} torn={} prefix_ok={} max_recovered_txid={}",
                    r.checked_site_or_snapshot,
                    r.committed_txids.len(),
                    r.incomplete_txids.len(),
                    r.torn_txids.len(),
                    r.prefix_ok,
                    r.max_recovered_txid
                ))
            }
            Verb::Advance => {
                let before = w.now();
                let fired = match cmd.args.get("until").map(String::as_str) {
                    None => {
                        let d = ms_arg(cmd, "ms")?.expect("checked at parse time");
                        w.advance(d)
                    }
                    Some("quiescent") => w.run_until_quiescent(),
                    Some("workload-done") => {
                        let start = w.net().events_fired();
                        while w.workloads_running() && w.step(RunLimit::Quiescent) {}
                        w.net().events_fired() - start
                    }
                    Some("consistent") => {
                        // The group may not exist yet; it appears after a reconcile pass.
                        let start = w.net().events_fired();
                        loop {
                            let consistent = self
                                .group_arg(cmd)
                                .ok()
                                .and_then(|g| self.world.status(g).ok())
                                .is_some_and(|s| s.phase == crate::replication::Phase::Consistent);
                            if consistent || !self.world.step(RunLimit::Quiescent) {
                                break;
                            }
                        }
                        self.world.net().events_fired() - start
                    }
                    Some(other) => return Err(Stop(format!("unknown until={other}")).into()),
                };
                let w = &*self.world;
                Ok(format!("{fired} events, {} -> {}", before, w.now()))
            }
            Verb::Assert => self.assert(cmd),
        }
    }

    fn metric(&self, cmd: &ScenarioCommand) -> std::result::Result<String, Outcome> {
        let w = &*self.world;
        let name = arg(cmd, "metric")?;
        let verify = || -> std::result::Result<_, Outcome> {
            let target: VerifyTarget = cmd
                .args
                .get("target")
                .map_or("backup", String::as_str)
                .parse()?;
            Ok(w.verify(target)?)
        };
        let sg = || -> std::result::Result<SnapshotGroupId, Outcome> {
            match cmd.args.get("sg") {
                Some(s) => Ok(s.parse()?),
                None => w
                    .engine()
                    .snapshot_groups()
                    .last()
                    .map(|s| s.snapshot_group_id)
                    .ok_or_else(|| Error::NotFound("no snapshot group exists".into()).into()),
            }
        };
        Ok(match name {
            "torn_count" => verify()?.torn_txids.len().to_string(),
            "committed_count" => verify()?.committed_txids.len().to_string(),
            "incomplete_count" => verify()?.incomplete_txids.len().to_string(),
            "max_recovered_txid" => verify()?.max_recovered_txid.to_string(),
            "prefix_ok" => verify()?.prefix_ok.to_string(),
            "phase" => w.status(self.group_arg(cmd)?)?.phase.to_string(),
            "acked_seq" => w.status(self.group_arg(cmd)?)?.acked_seq.to_string(),
            "shipped_seq" => w.status(self.group_arg(cmd)?)?.shipped_seq.to_string(),
            "applied_seq" => w.status(self.group_arg(cmd)?)?.applied_seq.to_string(),
            "lag" => w.status(self.group_arg(cmd)?)?.lag_entries.to_string(),
            "lost_on_failover" => w
                .status(self.group_arg(cmd)?)?
                .lost_on_failover
                .map_or("absent".into(), |n| n.to_string()),
            "mode" => w
                .engine()
                .group_info(self.group_arg(cmd)?)?
                .mode
                .to_string(),
            "members" => w
                .engine()
                .group_info(self.group_arg(cmd)?)?
                .members
                .len()
                .to_string(),
            "digests_equal" => {
                let g = self.group_arg(cmd)?;
                (w.engine().main_digests(g)? == w.engine().backup_digests(g)?).to_string()
            }
            "groups" => w.groups().len().to_string(),
            "snapshot_groups" => w.engine().snapshot_groups().count().to_string(),
            "pvs" => {
                let site: Site = arg(cmd, "site")?.parse()?;
                w.list_pvs(site).len().to_string()
            }
            "cr_status" => {
                let ns = arg(cmd, "ns")?;
                w.controlplane()
                    .cr_for(ns)
                    .map_or("absent".to_string(), |c| {
                        match c.status {
                            CrStatus::Pending => "pending",
                            CrStatus::Configuring => "configuring",
                            CrStatus::Bound => "bound",
                            CrStatus::Error => "error",
                        }
                        .to_string()
                    })
            }
            "acked_count" => w
                .workload_summary(self.app_arg(cmd)?)?
                .acked_count
                .to_string(),
            "mean_ack_latency_ms" => format!(
                "{:.3}",
                w.workload_summary(self.app_arg(cmd)?)?.mean_ack_latency_ms
            ),
            "analytics_committed" => w.analytics_report(sg()?)?.committed_count.to_string(),
            "analytics_amount" => w.analytics_report(sg()?)?.total_sales_amount.to_string(),
            "sg_at_seq" => w.engine().snapshot_group(sg()?)?.at_seq.to_string(),
            "reconcile_actions" => w.reconcile_log().len().to_string(),
            "sim_time_ms" => format!("{}", w.now()),
            other => return Err(Stop(format!("unknown metric {other:?}")).into()),
        })
    }

    fn assert(&mut self, cmd: &ScenarioCommand) -> std::result::Result<String, Outcome> {
        let observed = self.metric(cmd)?;
        let (op, expected) = COMPARISONS
            .iter()
            .find_map(|c| cmd.args.get(*c).map(|v| (*c, v.as_str())))
            .expect("checked at parse time");
        let holds = compare(&observed, op, expected)
            .ok_or_else(|| Stop(format!("{op} needs numbers, observed {observed:?}")))?;
        let metric = &cmd.args["metric"];
        if holds {
            Ok(format!("ok {metric}={observed} ({op} {expected})"))
        } else {
            self.failed += 1;
            Ok(format!(
                "FAILED {metric}: expected {op} {expected}, observed {observed}"
            ))
        }
    }
}

/// Errors a command can produce: engine errors (which `expect_err` may
/// match) or scenario misuse.
enum Outcome {
    Error(Error),
    Stop(Stop),
}

impl From<Error> for Outcome {
    fn from(e: Error) -> Self {
        Outcome::Error(e)
    }
}

impl From<Stop> for Outcome {
    fn from(s: Stop) -> Self {
        Outcome::Stop(s)
    }
}

fn ms_arg(cmd: &ScenarioCommand, key: &str) -> std::result::Result<Option<SimDuration>, Stop> {
    Ok(num::<f64>(cmd, key)?.map(|ms| SimDuration::from_micros((ms * 1000.0).round() as u64)))
}

fn compare(observed: &str, op: &str, expected: &str) -> Option<bool> {
    if let (Ok(a), Ok(b)) = (observed.parse::<f64>(), expected.parse::<f64>()) {
        return Some(match op {
            "eq" => a == b,
            "ne" => a != b,
            "gt" => a > b,
            "ge" => a >= b,
            "lt" => a < b,
            "le" => a <= b,
            _ => unreachable!("validated comparison"),
        });
    }
    match op {
        "eq" => Some(observed == expected),
        "ne" => Some(observed != expected),
        _ => None,
    }
}
