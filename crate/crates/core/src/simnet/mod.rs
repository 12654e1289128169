//! Discrete-event simulation of the star topology.
//!
//! Events are delivered in `(time, sequence)` order. Each entity is busy
//! while it works off the compute a handler reported, priced by a
//! [`CostTable`]; anything it sends leaves when that work ends and arrives
//! after the link delay. Deliveries on one directed link never overtake
//! each other.

mod cost;
mod graph;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::Write;

use thiserror::Error;

use crate::protocol::{
    Category, Endpoint, Federation, Message, MessageKind, ProtocolError, RoundOutcome, Step, TranscriptSink,
    WireRecord,
};

pub use cost::CostTable;
pub use graph::{build_graph, build_named_graph, LatencyGraph};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown latency profile {0:?}")]
    UnknownProfile(String),

    #[error("latency profile {0:?} has invalid parameters")]
    InvalidProfile(String),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error("cannot write timing output: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Compute time by `(category, entity, round)`. DH setup has no round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimingReport {
    entries: BTreeMap<(Category, Endpoint, Option<u32>), u64>,
    /// Simulated time at which the server finished each round.
    pub round_end_ns: Vec<u64>,
    /// Time the last event was handled.
    pub end_ns: u64,
    pub events: u64,
    pub messages_by_kind: BTreeMap<MessageKind, u64>,
}

impl TimingReport {
    fn charge(&mut self, category: Category, entity: Endpoint, round: Option<u32>, ns: u64) {
        let round = if category == Category::DhSetup { None } else { round };
        *self.entries.entry((category, entity, round)).or_default() += ns;
    }

    pub fn entries(&self) -> impl Iterator<Item = (Category, Endpoint, Option<u32>, u64)> + '_ {
        self.entries.iter().map(|(&(c, e, r), &ns)| (c, e, r, ns))
    }

    pub fn total_ns(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn category_ns(&self, category: Category) -> u64 {
        self.entries().filter(|e| e.0 == category).map(|e| e.3).sum()
    }

    pub fn entity_ns(&self, category: Category, entity: Endpoint) -> u64 {
        self.entries().filter(|e| e.0 == category && e.1 == entity).map(|e| e.3).sum()
    }

    /// Distinct rounds charged to `(category, entity)`; `None` is DH setup.
    pub fn rounds_charged(&self, category: Category, entity: Endpoint) -> Vec<Option<u32>> {
        self.entries()
            .filter(|e| e.0 == category && e.1 == entity)
            .map(|e| e.2)
            .collect()
    }

    /// Duration of each round, the first one including setup.
    pub fn round_durations_ns(&self) -> Vec<u64> {
        let mut prev = 0;
        self.round_end_ns
            .iter()
            .map(|&t| {
                let d = t - prev;
                prev = t;
                d
            })
            .collect()
    }

    /// `category,entity,round,ns` with a leading config hash column.
    pub fn write_csv<W: Write>(&self, out: W, config_hash: &str) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config_hash", "category", "entity", "round", "ns"])?;
        for (c, e, r, ns) in self.entries() {
            let round = r.map_or_else(|| "setup".to_string(), |r| r.to_string());
            w.write_record([config_hash, c.name(), &e.to_string(), &round, &ns.to_string()])?;
        }
        w.flush()
    }
}

/// One row of the per-category breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownRow {
    pub category: Category,
    pub entity: Endpoint,
    pub total_ns: u64,
    /// Total over the rounds charged; DH setup is charged once.
    pub per_iteration_ns: f64,
}

pub fn timing_breakdown(report: &TimingReport) -> Vec<BreakdownRow> {
    let mut acc: BTreeMap<(Category, Endpoint), (u64, usize)> = BTreeMap::new();
    for (c, e, _, ns) in report.entries() {
        let slot = acc.entry((c, e)).or_default();
        slot.0 += ns;
        slot.1 += 1;
    }
    acc.into_iter()
        .map(|((category, entity), (total_ns, rounds))| BreakdownRow {
            category,
            entity,
            total_ns,
            per_iteration_ns: total_ns as f64 / rounds as f64,
        })
        .collect()
}

/// One delivered message, for causality checks and `events.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub seq: u64,
    pub sent_ns: u64,
    pub delivered_ns: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: MessageKind,
}

pub fn write_events_csv<W: Write>(events: &[EventRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seq", "sent_ns", "delivered_ns", "from", "to", "kind"])?;
    for e in events {
        w.write_record([
            e.seq.to_string(),
            e.sent_ns.to_string(),
            e.delivered_ns.to_string(),
            e.from.to_string(),
            e.to.to_string(),
            e.kind.name().to_string(),
        ])?;
    }
    w.flush()
}

#[derive(Debug)]
pub struct SimOutput {
    pub outcomes: Vec<RoundOutcome>,
    pub timing: TimingReport,
    /// Empty unless requested.
    pub events: Vec<EventRecord>,
}

struct Event {
    at: u64,
    seq: u64,
    sent: u64,
    from: Endpoint,
    to: Endpoint,
    msg: Message,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct Sim<'a> {
    graph: &'a mut LatencyGraph,
    costs: &'a CostTable,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    busy: HashMap<Endpoint, u64>,
    last_arrival: HashMap<(Endpoint, Endpoint), u64>,
    timing: TimingReport,
    record_events: bool,
    events: Vec<EventRecord>,
}

impl Sim<'_> {
    /// Runs `step` on `entity` from `start`; returns when it finishes.
    fn commit(
        &mut self,
        fed: &Federation,
        entity: Endpoint,
        start: u64,
        step: Step,
        round: Option<u32>,
        sink: &mut dyn TranscriptSink,
    ) -> u64 {
        let mut finish = start;
        for w in &step.work {
            let ns = self.costs.cost(w);
            self.timing.charge(w.category, entity, round, ns);
            finish += ns;
        }
        self.busy.insert(entity, finish);
        for (to, msg) in step.out {
            let link = (entity, to);
            let at = (finish + self.graph.sample_delay(entity, to)).max(self.last_arrival.get(&link).copied().unwrap_or(0));
            self.last_arrival.insert(link, at);
            *self.timing.messages_by_kind.entry(msg.kind()).or_default() += 1;
            if fed.captures(&msg) {
                sink.record_message(WireRecord {
                    time_ns: finish,
                    from: entity,
                    to,
                    message: msg.clone(),
                });
            }
            self.queue.push(Reverse(Event {
                at,
                seq: self.seq,
                sent: finish,
                from: entity,
                to,
                msg,
            }));
            self.seq += 1;
        }
        finish
    }
}

/// Runs `fed` to completion under the event queue.
pub fn run_simulation(
    fed: &mut Federation,
    initial: Vec<(Endpoint, Step)>,
    graph: &mut LatencyGraph,
    costs: &CostTable,
    sink: &mut dyn TranscriptSink,
    record_events: bool,
    mut on_round: impl FnMut(&RoundOutcome),
) -> Result<SimOutput> {
    let mut sim = Sim {
        graph,
        costs,
        queue: BinaryHeap::new(),
        seq: 0,
        busy: HashMap::new(),
        last_arrival: HashMap::new(),
        timing: TimingReport::default(),
        record_events,
        events: Vec::new(),
    };
    for (entity, step) in initial {
        sim.commit(fed, entity, 0, step, None, sink);
    }
    let mut outcomes = Vec::new();
    while let Some(Reverse(ev)) = sim.queue.pop() {
        sim.timing.events += 1;
        if sim.record_events {
            sim.events.push(EventRecord {
                seq: ev.seq,
                sent_ns: ev.sent,
                delivered_ns: ev.at,
                from: ev.from,
                to: ev.to,
                kind: ev.msg.kind(),
            });
        }
        let start = ev.at.max(sim.busy.get(&ev.to).copied().unwrap_or(0));
        let slot_round = ev.msg.slot().map(|(r, _)| r);
        let step = fed.deliver(ev.to, ev.msg)?;
        fed.flush_logs(ev.to, sink);
        let round = match ev.to {
            Endpoint::Server => slot_round,
            Endpoint::Client(id) => Some(fed.client(id).round()),
        };
        let finish = sim.commit(fed, ev.to, start, step, round, sink);
        sim.timing.end_ns = sim.timing.end_ns.max(finish);
        for outcome in fed.take_completed() {
            sim.timing.round_end_ns.push(finish);
            sink.end_round(outcome.round, &outcome.global);
            on_round(&outcome);
            outcomes.push(outcome);
        }
    }
    if !fed.is_done() {
        return Err(ProtocolError::Stalled(fed.stall_report()).into());
    }
    Ok(SimOutput {
        outcomes,
        timing: sim.timing,
        events: sim.events,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::config::{default_profiles, JitterConfig, LatencyProfile};
    use crate::dpnoise::NoiseHook;
    use crate::keyexchange::DhParams;
    use crate::protocol::{Capture, Mode, NullSink, ProtocolParams, Seeds};
    use crate::regression::{synthetic, TrainConfig};
    use crate::ring::FixedPointParams;

    fn params(n: usize, mode: Mode, rounds: u32) -> ProtocolParams {
        ProtocolParams {
            n,
            mode,
            rounds,
            n_weights: 3,
            fixed_point: FixedPointParams::default(),
            laplace_scale: 0.5,
            hook: NoiseHook::Live,
            dh: Arc::new(DhParams::toy()),
            train: TrainConfig {
                learning_rate: 0.5,
                iterations: 5,
                reg_alpha: 1e-4,
            },
            local_size: 20,
            capture: Capture::Nothing,
        }
    }

    fn simulate(p: ProtocolParams, profile: &str, jitter: Option<JitterConfig>, costs: &CostTable) -> SimOutput {
        let n = p.n;
        let data = Arc::new(synthetic(100, 3, 2).unwrap());
        let (mut fed, initial) = Federation::setup(Arc::new(p), &Seeds::default(), data).unwrap();
        let mut profiles = default_profiles();
        if let Some(j) = jitter {
            profiles.get_mut(profile).unwrap().jitter = j;
        }
        let mut g = build_named_graph(&profiles, profile, n, 4).unwrap();
        run_simulation(&mut fed, initial, &mut g, costs, &mut NullSink, true, |_| {}).unwrap()
    }

    #[test]
    fn event_count_matches_closed_form() {
        let (n, rounds, m) = (3u64, 2u64, 3u64);
        let out = simulate(params(3, Mode::Oblivious, 2), "metro", None, &CostTable::uniform(1));
        let dh = n + n * (n - 1);
        assert_eq!(out.timing.events, dh + 4 * n * rounds * m);
        assert_eq!(out.outcomes.len(), 2);
        let plain = simulate(params(3, Mode::Plain, 2), "metro", None, &CostTable::uniform(1));
        assert_eq!(plain.timing.events, dh + 2 * n * rounds * m);
    }

    #[test]
    fn delivery_is_causal_and_fifo_per_link() {
        let out = simulate(params(4, Mode::Oblivious, 2), "global", None, &CostTable::synthetic());
        let mut last: HashMap<(Endpoint, Endpoint), (u64, u64)> = HashMap::new();
        let mut by_seq = out.events.clone();
        by_seq.sort_by_key(|e| e.seq);
        for e in &by_seq {
            assert!(e.delivered_ns > e.sent_ns);
            if let Some(&(prev_at, _)) = last.get(&(e.from, e.to)) {
                assert!(e.delivered_ns >= prev_at, "overtaking on {:?}", (e.from, e.to));
            }
            last.insert((e.from, e.to), (e.delivered_ns, e.seq));
        }
        assert!(out.events.windows(2).all(|w| w[0].delivered_ns <= w[1].delivered_ns));
    }

    #[test]
    fn zero_jitter_runs_repeat_exactly() {
        let run = || simulate(params(4, Mode::Oblivious, 3), "metro", Some(JitterConfig::None), &CostTable::synthetic());
        let (a, b) = (run(), run());
        assert_eq!(a.timing, b.timing);
        assert_eq!(a.timing.round_durations_ns(), b.timing.round_durations_ns());
        assert_eq!(a.outcomes, b.outcomes);
    }

    #[test]
    fn categories_partition_compute() {
        let out = simulate(params(4, Mode::Oblivious, 2), "metro", None, &CostTable::synthetic());
        let t = &out.timing;
        let by_cat: u64 = Category::ALL.iter().map(|&c| t.category_ns(c)).sum();
        assert_eq!(by_cat, t.total_ns());
        assert!(Category::ALL.iter().all(|&c| t.category_ns(c) > 0));
        for row in timing_breakdown(t) {
            if row.category == Category::ServerAgg {
                assert_eq!(row.entity, Endpoint::Server);
            } else {
                assert_ne!(row.entity, Endpoint::Server);
            }
        }
        for c in 0..4 {
            assert_eq!(t.rounds_charged(Category::DhSetup, Endpoint::Client(c)), vec![None]);
            assert_eq!(
                t.entity_ns(Category::DhSetup, Endpoint::Client(c)),
                CostTable::synthetic().ns(crate::protocol::Op::ModExp) * 4 + CostTable::synthetic().ns(crate::protocol::Op::KeyDerive) * 3
            );
        }
    }

    #[test]
    fn training_scales_with_rounds() {
        let costs = CostTable::synthetic();
        let two = simulate(params(3, Mode::Plain, 2), "metro", None, &costs);
        let four = simulate(params(3, Mode::Plain, 4), "metro", None, &costs);
        assert_eq!(
            2 * two.timing.category_ns(Category::Training),
            four.timing.category_ns(Category::Training)
        );
    }

    #[test]
    fn timing_csv_has_header_and_setup_rows() {
        let out = simulate(params(3, Mode::Plain, 1), "metro", None, &CostTable::synthetic());
        let mut buf = Vec::new();
        out.timing.write_csv(&mut buf, "abc").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("config_hash,category,entity,round,ns\n"));
        assert!(text.contains("abc,DH_SETUP,client-0,setup,"));
        assert!(text.contains("abc,SERVER_AGG,server,0,"));
    }

    #[test]
    fn stalls_are_reported() {
        let data = Arc::new(synthetic(100, 3, 2).unwrap());
        let (mut fed, mut initial) = Federation::setup(Arc::new(params(3, Mode::Plain, 1)), &Seeds::default(), data).unwrap();
        initial.pop();
        let mut g = build_graph(
            "flat",
            &LatencyProfile {
                min_ms: 1.0,
                max_ms: 1.0,
                jitter: JitterConfig::None,
            },
            3,
            0,
        )
        .unwrap();
        let err = run_simulation(&mut fed, initial, &mut g, &CostTable::uniform(1), &mut NullSink, false, |_| {}).unwrap_err();
        assert!(matches!(err, SimError::Protocol(ProtocolError::Stalled(_))), "{err}");
    }
}
