//! Deterministic discrete-event scheduler and inter-site link model.
//!
//! Time is logical and measured in microseconds. Events fire in
//! `(fire_time, sequence)` order, so two runs with the same seed and the
//! same inputs produce the same event trace byte for byte.
//!
//! Links are FIFO: jitter can only delay the head of a link's queue, never
//! reorder it. A partitioned link holds every message until it heals and
//! then releases the held messages in send order.
//!
//! Events are either foreground or background. Periodic housekeeping (the
//! operator loop, idle retransmit timers on a partitioned link) runs in the
//! background; [`RunLimit::Quiescent`] stops once no foreground work is
//! left.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockstore::Site;
use crate::error::{Error, Result};

/// Logical instant in microseconds since simulation start. Serialized as
/// fractional milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

/// Logical duration in microseconds. Serialized as fractional milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimDuration(pub u64);

macro_rules! millis_serde {
    ($t:ident) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(
                &self,
                s: S,
            ) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_f64(self.0 as f64 / 1000.0)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(
                d: D,
            ) -> std::result::Result<Self, D::Error> {
                let ms = f64::deserialize(d)?;
                if !ms.is_finite() || ms < 0.0 {
                    return Err(serde::de::Error::custom(format!(
                        "{ms} is not a non-negative number of milliseconds"
                    )));
                }
                Ok($t((ms * 1000.0).round() as u64))
            }
        }
    };
}

millis_serde!(SimTime);
millis_serde!(SimDuration);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1000)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub fn from_ms(ms: u64) -> Self {
        SimDuration(ms * 1000)
    }

    pub fn from_micros(us: u64) -> Self {
        SimDuration(us)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        self.since(rhs)
    }
}

// Rendered in milliseconds with microsecond precision, e.g. `12.250`.
impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub String);

impl LinkId {
    pub fn new(s: impl Into<String>) -> Self {
        LinkId(s.into())
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One direction of an inter-site link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub latency: SimDuration,
    /// Upper bound of the uniformly drawn extra delay.
    pub jitter: SimDuration,
    pub drop_probability: f64,
    pub partitioned: bool,
}

impl LinkConfig {
    pub fn with_latency(latency: SimDuration) -> Self {
        LinkConfig {
            latency,
            jitter: SimDuration::ZERO,
            drop_probability: 0.0,
            partitioned: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(Error::InvalidArgument(format!(
                "drop_probability {} outside [0, 1)",
                self.drop_probability
            )));
        }
        Ok(())
    }

    /// Worst-case one-way delay ignoring partitions.
    pub fn max_delay(&self) -> SimDuration {
        self.latency + self.jitter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    SiteFailure,
    /// `partitioned = false` heals the link.
    Partition {
        partitioned: bool,
    },
    DelayChange {
        latency: SimDuration,
        jitter: Option<SimDuration>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    #[serde(flatten)]
    pub kind: FaultKind,
    /// A site name for `SiteFailure`, a link id otherwise.
    pub target: String,
    pub at_time: SimTime,
}

impl fmt::Display for FaultInjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FaultKind::SiteFailure => write!(f, "site_failure target={}", self.target),
            FaultKind::Partition { partitioned } => {
                write!(
                    f,
                    "partition target={} partitioned={partitioned}",
                    self.target
                )
            }
            FaultKind::DelayChange { latency, jitter } => {
                write!(f, "delay_change target={} latency={latency}", self.target)?;
                if let Some(j) = jitter {
                    write!(f, " jitter={j}")?;
                }
                Ok(())
            }
        }
    }
}

/// Payloads the scheduler can trace.
pub trait TraceEvent {
    fn kind(&self) -> &'static str;
    fn detail(&self) -> String;
}

pub type EventId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLimit {
    /// Fire every event due at or before this instant, then set the clock to it.
    Until(SimTime),
    /// Fire events until no foreground event is pending.
    Quiescent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled { deliver_at: SimTime },
    Held,
    Dropped,
}

#[derive(Debug, Clone)]
enum Payload<A> {
    Action(A),
    Deliver {
        link: LinkId,
        send_seq: u64,
        action: A,
    },
    Fault(FaultInjection),
}

#[derive(Debug, Clone)]
struct Event<A> {
    fire_time: SimTime,
    seq: u64,
    background: bool,
    payload: Payload<A>,
}

impl<A> PartialEq for Event<A> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_time, self.seq) == (other.fire_time, other.seq)
    }
}
impl<A> Eq for Event<A> {}
impl<A> PartialOrd for Event<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<A> Ord for Event<A> {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_time, other.seq).cmp(&(self.fire_time, self.seq))
    }
}

#[derive(Debug, Clone)]
struct LinkState<A> {
    config: LinkConfig,
    last_delivery: SimTime,
    next_send_seq: u64,
    held: BTreeMap<u64, A>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub held: u64,
}

/// The scheduler, the links and the seeded randomness of one simulation.
#[derive(Debug, Clone)]
pub struct SimNet<A> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Event<A>>,
    foreground: usize,
    links: BTreeMap<LinkId, LinkState<A>>,
    stats: BTreeMap<LinkId, LinkStats>,
    failed_sites: BTreeSet<Site>,
    rng: ChaCha8Rng,
    trace: Option<Vec<String>>,
    fired: u64,
}

impl<A: TraceEvent> SimNet<A> {
    pub fn new(seed: u64) -> Self {
        SimNet {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            foreground: 0,
            links: BTreeMap::new(),
            stats: BTreeMap::new(),
            failed_sites: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: None,
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn events_fired(&self) -> u64 {
        self.fired
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_quiescent(&self) -> bool {
        self.foreground == 0
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<String> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Adds a line for something that happened outside the event queue,
    /// such as an operator command.
    pub fn trace_note(&mut self, kind: &str, detail: impl FnOnce() -> String) {
        self.record(kind, detail);
    }

    fn record(&mut self, kind: &str, detail: impl FnOnce() -> String) {
        if let Some(trace) = &mut self.trace {
            trace.push(format!("t={} ev={} detail={}", self.now, kind, detail()));
        }
    }

    fn push(&mut self, fire_time: SimTime, background: bool, payload: Payload<A>) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        if !background {
            self.foreground += 1;
        }
        self.queue.push(Event {
            fire_time,
            seq,
            background,
            payload,
        });
        seq
    }

    /// Schedules a foreground action `delay` after now.
    pub fn schedule(&mut self, delay: SimDuration, action: A) -> EventId {
        self.push(self.now + delay, false, Payload::Action(action))
    }

    /// Schedules an action that does not keep the simulation busy.
    pub fn schedule_background(&mut self, delay: SimDuration, action: A) -> EventId {
        self.push(self.now + delay, true, Payload::Action(action))
    }

    pub fn add_link(&mut self, id: LinkId, config: LinkConfig) -> Result<()> {
        config.validate()?;
        if self.links.contains_key(&id) {
            return Err(Error::AlreadyExists(format!("link {id}")));
        }
        self.stats.insert(id.clone(), LinkStats::default());
        self.links.insert(
            id,
            LinkState {
                config,
                last_delivery: SimTime::ZERO,
                next_send_seq: 0,
                held: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn links(&self) -> impl Iterator<Item = (&LinkId, &LinkConfig)> {
        self.links.iter().map(|(id, l)| (id, &l.config))
    }

    pub fn link_config(&self, id: &LinkId) -> Result<&LinkConfig> {
        self.links
            .get(id)
            .map(|l| &l.config)
            .ok_or_else(|| Error::NotFound(format!("link {id}")))
    }

    pub fn link_stats(&self, id: &LinkId) -> Result<&LinkStats> {
        self.stats
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("link {id}")))
    }

    pub fn set_link_config(&mut self, id: &LinkId, config: LinkConfig) -> Result<()> {
        config.validate()?;
        let heal = {
            let link = self
                .links
                .get_mut(id)
                .ok_or_else(|| Error::NotFound(format!("link {id}")))?;
            let heal = link.config.partitioned && !config.partitioned;
            link.config = config;
            heal
        };
        if heal {
            self.release_held(id);
        }
        Ok(())
    }

    fn delivery_time(&mut self, id: &LinkId) -> SimTime {
        let link = self.links.get(id).expect("link exists");
        let jitter = link.config.jitter.as_micros();
        let extra = if jitter > 0 {
            self.rng.gen_range(0..=jitter)
        } else {
            0
        };
        let link = self.links.get_mut(id).expect("link exists");
        let at = (self.now + link.config.latency + SimDuration(extra)).max(link.last_delivery);
        link.last_delivery = at;
        at
    }

    fn release_held(&mut self, id: &LinkId) {
        let held = std::mem::take(&mut self.links.get_mut(id).expect("link exists").held);
        for (send_seq, action) in held {
            let at = self.delivery_time(id);
            self.push(
                at,
                false,
                Payload::Deliver {
                    link: id.clone(),
                    send_seq,
                    action,
                },
            );
        }
    }

    /// Hands a message to a link. The action fires when the message is
    /// delivered; drops are decided by a seeded draw at send time.
    pub fn send(&mut self, id: &LinkId, action: A) -> Result<SendOutcome> {
        let (drop_p, partitioned, send_seq) = {
            let link = self
                .links
                .get_mut(id)
                .ok_or_else(|| Error::NotFound(format!("link {id}")))?;
            let seq = link.next_send_seq;
            link.next_send_seq += 1;
            (link.config.drop_probability, link.config.partitioned, seq)
        };
        self.stats.get_mut(id).expect("stats exist").sent += 1;
        if drop_p > 0.0 && self.rng.gen::<f64>() < drop_p {
            self.stats.get_mut(id).expect("stats exist").dropped += 1;
            self.record("drop", || format!("link={id} {}", action.detail()));
            return Ok(SendOutcome::Dropped);
        }
        if partitioned {
            self.stats.get_mut(id).expect("stats exist").held += 1;
            self.links
                .get_mut(id)
                .expect("link exists")
                .held
                .insert(send_seq, action);
            return Ok(SendOutcome::Held);
        }
        let deliver_at = self.delivery_time(id);
        self.push(
            deliver_at,
            false,
            Payload::Deliver {
                link: id.clone(),
                send_seq,
                action,
            },
        );
        Ok(SendOutcome::Scheduled { deliver_at })
    }

    /// Schedules a fault. Targets are validated immediately.
    pub fn inject(&mut self, fault: FaultInjection) -> Result<EventId> {
        if fault.at_time < self.now {
            return Err(Error::InvalidArgument(format!(
                "fault at {} is before the current time {}",
                fault.at_time, self.now
            )));
        }
        match &fault.kind {
            FaultKind::SiteFailure => {
                fault
                    .target
                    .parse::<Site>()
                    .map_err(|_| Error::NotFound(format!("site {:?}", fault.target)))?;
            }
            FaultKind::Partition { .. } | FaultKind::DelayChange { .. } => {
                self.link_config(&LinkId::new(fault.target.clone()))?;
            }
        }
        let at = fault.at_time;
        Ok(self.push(at, false, Payload::Fault(fault)))
    }

    /// Applies a fault at the current instant without scheduling it.
    pub fn apply_fault(&mut self, fault: &FaultInjection) -> Result<()> {
        match &fault.kind {
            FaultKind::SiteFailure => {
                let site: Site = fault
                    .target
                    .parse()
                    .map_err(|_| Error::NotFound(format!("site {:?}", fault.target)))?;
                self.failed_sites.insert(site);
            }
            FaultKind::Partition { partitioned } => {
                let id = LinkId::new(fault.target.clone());
                let mut cfg = self.link_config(&id)?.clone();
                cfg.partitioned = *partitioned;
                self.set_link_config(&id, cfg)?;
            }
            FaultKind::DelayChange { latency, jitter } => {
                let id = LinkId::new(fault.target.clone());
                let mut cfg = self.link_config(&id)?.clone();
                cfg.latency = *latency;
                if let Some(j) = jitter {
                    cfg.jitter = *j;
                }
                self.set_link_config(&id, cfg)?;
            }
        }
        self.record("fault", || fault.to_string());
        Ok(())
    }

    pub fn site_failed(&self, site: Site) -> bool {
        self.failed_sites.contains(&site)
    }

    /// Pops the next event within `limit`, handling link and fault events
    /// internally. Returns the caller's action, or `None` when the limit is
    /// reached (in which case a bounded run leaves the clock at the limit).
    pub fn next_event(&mut self, limit: RunLimit) -> Option<A> {
        loop {
            if let RunLimit::Quiescent = limit {
                if self.foreground == 0 {
                    return None;
                }
            }
            let due = match (self.queue.peek(), limit) {
                (None, _) => false,
                (Some(ev), RunLimit::Until(t)) => ev.fire_time <= t,
                (Some(_), RunLimit::Quiescent) => true,
            };
            if !due {
                if let RunLimit::Until(t) = limit {
                    self.now = self.now.max(t);
                }
                return None;
            }
            let ev = self.queue.pop().expect("peeked");
            if !ev.background {
                self.foreground -= 1;
            }
            debug_assert!(ev.fire_time >= self.now, "clock must not run backwards");
            self.now = ev.fire_time;
            self.fired += 1;
            match ev.payload {
                Payload::Action(action) => {
                    self.record(action.kind(), || action.detail());
                    return Some(action);
                }
                Payload::Fault(fault) => {
                    // Targets were validated at injection time.
                    let _ = self.apply_fault(&fault);
                }
                Payload::Deliver {
                    link,
                    send_seq,
                    action,
                } => {
                    let state = self.links.get_mut(&link).expect("link exists");
                    if state.config.partitioned {
                        state.held.insert(send_seq, action);
                        self.stats.get_mut(&link).expect("stats exist").held += 1;
                        self.record("hold", || format!("link={link}"));
                        continue;
                    }
                    self.stats.get_mut(&link).expect("stats exist").delivered += 1;
                    self.record("deliver", || format!("link={link} {}", action.detail()));
                    return Some(action);
                }
            }
        }
    }

    /// Runs events through `handler` until the limit; returns events fired.
    pub fn run_until<F>(&mut self, limit: RunLimit, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, A),
    {
        let start = self.fired;
        while let Some(action) = self.next_event(limit) {
            handler(self, action);
        }
        self.fired - start
    }
}
