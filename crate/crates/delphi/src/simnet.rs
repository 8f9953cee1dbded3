//! Deterministic discrete-event network simulation.
//!
//! The simulator is a single event heap ordered by `(delivery time,
//! sequence number)`. Every send draws its base delay from one seeded
//! stream cipher RNG, in send-creation order, so a run is a pure function
//! of its configuration and seed: replaying the same seed reproduces every
//! delivery, every tally, and every output byte for byte. Links never drop
//! messages and are FIFO per ordered pair (a later send on a link is
//! clamped to arrive strictly after the earlier one), which the delta
//! encoding relies on.
//!
//! Schedulers shape the delay distribution to model adversarial timing:
//! uniform random jitter, multiplied delays on chosen links, or a lag
//! across a node partition. Faulty nodes are modeled as machines: mute
//! nodes, split-brain equivocators that run two divergent protocol states
//! and show each half of the network a different one, protocol-following
//! nodes pinned to the range edges, and noise generators spraying
//! well-formed but meaningless batches.

use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{FixedValue, ProtocolConfig, Rational};
use crate::delphi::{DelphiNode, Geometry, NodeOutput, NodeStats};
use crate::encoding::{
    encode_batch, EncodeMode, MessageKind, WireBatch, WirePayload, WireRecord,
};
use crate::finalize::{attest_tag, Certificate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event budget exhausted after {events} deliveries; likely livelock")]
    NonTermination { events: u64 },
    #[error("simulation config: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

/// One network payload: opaque bytes plus the logical message count inside
/// (for traffic accounting).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub bytes: Vec<u8>,
    pub logical: u64,
}

impl Payload {
    pub fn new(bytes: Vec<u8>, logical: u64) -> Rc<Self> {
        Rc::new(Payload { bytes, logical })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Every node except the sender, in id order.
    All,
    One(u16),
}

#[derive(Debug, Clone)]
pub struct Outbound {
    pub to: Target,
    pub payload: Rc<Payload>,
}

impl Outbound {
    pub fn broadcast(payload: Rc<Payload>) -> Self {
        Outbound {
            to: Target::All,
            payload,
        }
    }

    pub fn one(to: u16, payload: Rc<Payload>) -> Self {
        Outbound {
            to: Target::One(to),
            payload,
        }
    }
}

/// A node in the simulation: reacts to startup and to message deliveries.
pub trait Machine {
    fn on_start(&mut self) -> Vec<Outbound>;
    fn on_message(&mut self, from: u16, payload: &Rc<Payload>) -> Vec<Outbound>;
}

// ---------------------------------------------------------------------------
// Schedulers
// ---------------------------------------------------------------------------

/// Adversarial timing model. Every scheduler draws the same base delay
/// stream; the variants only transform the drawn value, so switching
/// schedulers never desynchronizes the RNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Independent uniform delay in `1..=max_delay` per message.
    UniformRandom { max_delay: u64 },
    /// Uniform base delay, multiplied by `factor` on the listed links.
    TargetedDelay {
        max_delay: u64,
        factor: u64,
        links: Vec<(u16, u16)>,
    },
    /// Uniform base delay plus `lag` when crossing the partition boundary
    /// (bit `i` of `partition` says which side node `i` is on).
    Skew {
        max_delay: u64,
        lag: u64,
        partition: u64,
    },
}

impl SchedulerKind {
    /// Bare name for report columns.
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::UniformRandom { .. } => "uniform_random",
            SchedulerKind::TargetedDelay { .. } => "targeted_delay",
            SchedulerKind::Skew { .. } => "skew",
        }
    }

    /// Delays every link into `node` by `factor`.
    pub fn targeted_into(node: u16, n: u16, factor: u64, max_delay: u64) -> Self {
        SchedulerKind::TargetedDelay {
            max_delay,
            factor,
            links: (0..n).filter(|s| *s != node).map(|s| (s, node)).collect(),
        }
    }

    /// Splits the first `k` nodes from the rest with `lag` extra latency.
    pub fn skew_split(k: u16, lag: u64, max_delay: u64) -> Self {
        SchedulerKind::Skew {
            max_delay,
            lag,
            partition: (1u64 << k) - 1,
        }
    }

    fn delay(&self, rng: &mut ChaCha20Rng, from: u16, to: u16) -> u64 {
        match self {
            SchedulerKind::UniformRandom { max_delay } => rng.gen_range(1..=*max_delay),
            SchedulerKind::TargetedDelay {
                max_delay,
                factor,
                links,
            } => {
                let base = rng.gen_range(1..=*max_delay);
                if links.contains(&(from, to)) {
                    base * (*factor).max(1)
                } else {
                    base
                }
            }
            SchedulerKind::Skew {
                max_delay,
                lag,
                partition,
            } => {
                let base = rng.gen_range(1..=*max_delay);
                let side = |x: u16| partition >> x & 1;
                if side(from) != side(to) {
                    base + lag
                } else {
                    base
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Event loop
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Event {
    time: u64,
    seq: u64,
    from: u16,
    to: u16,
    payload: Rc<Payload>,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
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
        // BinaryHeap is a max-heap; invert for earliest-first
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Traffic totals for one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    /// Logical per-checkpoint messages, summed over link sends.
    pub messages_sent: u64,
    /// Serialized bytes, summed over link sends.
    pub bytes_sent: u64,
    /// Deliveries processed.
    pub events: u64,
}

/// The event loop. Generic over the machine type so protocol state can be
/// recovered without downcasts after the run.
pub struct Simulation<M: Machine> {
    machines: Vec<M>,
    scheduler: SchedulerKind,
    rng: ChaCha20Rng,
    heap: BinaryHeap<Event>,
    last_on_link: HashMap<(u16, u16), u64>,
    now: u64,
    seq: u64,
    event_cap: u64,
    pub stats: NetStats,
}

impl<M: Machine> Simulation<M> {
    pub fn new(machines: Vec<M>, scheduler: SchedulerKind, seed: u64) -> Self {
        assert!(machines.len() >= 2 && machines.len() <= 64);
        Simulation {
            machines,
            scheduler,
            rng: ChaCha20Rng::seed_from_u64(seed),
            heap: BinaryHeap::new(),
            last_on_link: HashMap::new(),
            now: 0,
            seq: 0,
            event_cap: 100_000_000,
            stats: NetStats::default(),
        }
    }

    pub fn with_event_cap(mut self, cap: u64) -> Self {
        self.event_cap = cap;
        self
    }

    fn dispatch(&mut self, from: u16, out: Vec<Outbound>) {
        let n = self.machines.len() as u16;
        for o in out {
            match o.to {
                Target::All => {
                    for to in 0..n {
                        if to != from {
                            self.schedule(from, to, o.payload.clone());
                        }
                    }
                }
                Target::One(to) => {
                    if to < n && to != from {
                        self.schedule(from, to, o.payload.clone());
                    }
                }
            }
        }
    }

    fn schedule(&mut self, from: u16, to: u16, payload: Rc<Payload>) {
        let delay = self.scheduler.delay(&mut self.rng, from, to);
        let mut at = self.now + delay.max(1);
        // FIFO per link: never overtake the previous message
        let last = self.last_on_link.entry((from, to)).or_insert(0);
        if at <= *last {
            at = *last + 1;
        }
        *last = at;
        self.stats.messages_sent += payload.logical;
        self.stats.bytes_sent += payload.bytes.len() as u64;
        self.seq += 1;
        self.heap.push(Event {
            time: at,
            seq: self.seq,
            from,
            to,
            payload,
        });
    }

    /// Runs to quiescence: starts every machine, then delivers until the
    /// heap empties or the event budget trips.
    pub fn run(&mut self) -> Result<(), SimError> {
        for id in 0..self.machines.len() {
            let out = self.machines[id].on_start();
            self.dispatch(id as u16, out);
        }
        while let Some(ev) = self.heap.pop() {
            self.stats.events += 1;
            if self.stats.events > self.event_cap {
                return Err(SimError::NonTermination {
                    events: self.stats.events,
                });
            }
            self.now = ev.time;
            let out = self.machines[ev.to as usize].on_message(ev.from, &ev.payload);
            self.dispatch(ev.to, out);
        }
        Ok(())
    }

    pub fn machines(&self) -> &[M] {
        &self.machines
    }

    pub fn into_machines(self) -> Vec<M> {
        self.machines
    }
}

// ---------------------------------------------------------------------------
// Behaviors
// ---------------------------------------------------------------------------

/// Per-node behavior. Anything other than `Honest` counts against the
/// fault budget in run assertions, including the protocol-following
/// extremists (their inputs deliberately break the spread assumption).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Honest,
    /// Sends nothing at all.
    Silent,
    /// Runs two protocol states with opposite extreme inputs, shows the
    /// lower half of the network one and the upper half the other, with
    /// one node hearing both streams.
    Equivocator,
    /// Follows the protocol with input pinned to the lower range bound.
    ExtremeLow,
    /// Follows the protocol with input pinned to the upper range bound.
    ExtremeHigh,
    /// Broadcasts well-formed batches of meaningless echoes and attests.
    RandomNoise,
}

/// Named fault mixes for sweeps: the last `t` nodes take the preset's
/// behavior, everyone else stays honest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorPreset {
    Honest,
    Silent,
    Equivocator,
    Extreme,
    RandomNoise,
}

impl BehaviorPreset {
    pub fn all() -> [BehaviorPreset; 5] {
        [
            BehaviorPreset::Honest,
            BehaviorPreset::Silent,
            BehaviorPreset::Equivocator,
            BehaviorPreset::Extreme,
            BehaviorPreset::RandomNoise,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            BehaviorPreset::Honest => "honest",
            BehaviorPreset::Silent => "silent",
            BehaviorPreset::Equivocator => "equivocator",
            BehaviorPreset::Extreme => "extreme",
            BehaviorPreset::RandomNoise => "random_noise",
        }
    }

    /// Expands to per-node behaviors: the last `t` nodes act out the preset.
    pub fn expand(&self, n: u16, t: u16) -> Vec<BehaviorKind> {
        let mut v = vec![BehaviorKind::Honest; n as usize];
        for (j, slot) in v.iter_mut().skip((n - t) as usize).enumerate() {
            *slot = match self {
                BehaviorPreset::Honest => BehaviorKind::Honest,
                BehaviorPreset::Silent => BehaviorKind::Silent,
                BehaviorPreset::Equivocator => BehaviorKind::Equivocator,
                BehaviorPreset::Extreme => {
                    if j % 2 == 0 {
                        BehaviorKind::ExtremeLow
                    } else {
                        BehaviorKind::ExtremeHigh
                    }
                }
                BehaviorPreset::RandomNoise => BehaviorKind::RandomNoise,
            };
        }
        v
    }
}

/// One simulated protocol participant.
#[allow(clippy::large_enum_variant)] // both data variants are already boxed
pub enum DelphiMachine {
    Honest(Box<DelphiNode>),
    Silent,
    Equivocator {
        low: Box<DelphiNode>,
        high: Box<DelphiNode>,
        n: u16,
    },
    Noise(NoiseState),
}

impl DelphiMachine {
    pub fn node(&self) -> Option<&DelphiNode> {
        match self {
            DelphiMachine::Honest(node) => Some(node),
            _ => None,
        }
    }

    fn flush_of(node: &mut DelphiNode) -> Option<Rc<Payload>> {
        node.flush().map(|(bytes, logical)| Payload::new(bytes, logical))
    }
}

impl Machine for DelphiMachine {
    fn on_start(&mut self) -> Vec<Outbound> {
        match self {
            DelphiMachine::Honest(node) => Self::flush_of(node)
                .map(|p| vec![Outbound::broadcast(p)])
                .unwrap_or_default(),
            DelphiMachine::Silent => Vec::new(),
            DelphiMachine::Equivocator { low, high, n } => {
                let mut out = Vec::new();
                split_brain_route(low, high, *n, &mut out);
                out
            }
            DelphiMachine::Noise(state) => state.maybe_spray(true),
        }
    }

    fn on_message(&mut self, from: u16, payload: &Rc<Payload>) -> Vec<Outbound> {
        match self {
            DelphiMachine::Honest(node) => {
                node.handle_batch(from, &payload.bytes);
                Self::flush_of(node)
                    .map(|p| vec![Outbound::broadcast(p)])
                    .unwrap_or_default()
            }
            DelphiMachine::Silent => Vec::new(),
            DelphiMachine::Equivocator { low, high, n } => {
                low.handle_batch(from, &payload.bytes);
                high.handle_batch(from, &payload.bytes);
                let mut out = Vec::new();
                split_brain_route(low, high, *n, &mut out);
                out
            }
            DelphiMachine::Noise(state) => state.maybe_spray(false),
        }
    }
}

/// Routes the two brains' flushes: the low brain speaks to ids `0..=n/2`,
/// the high brain to ids `n/2..`. Node `n/2` hears both streams, so the
/// double-talk is observable there while the rest of the network sees a
/// clean split.
fn split_brain_route(low: &mut DelphiNode, high: &mut DelphiNode, n: u16, out: &mut Vec<Outbound>) {
    let half = n / 2;
    if let Some(p) = DelphiMachine::flush_of(low) {
        for to in 0..=half.min(n - 1) {
            out.push(Outbound::one(to, p.clone()));
        }
    }
    if let Some(p) = DelphiMachine::flush_of(high) {
        for to in half..n {
            out.push(Outbound::one(to, p.clone()));
        }
    }
}

/// Noise generator: emits deterministic pseudo-random, structurally valid
/// batches so they survive decoding and stress the tally allowances.
pub struct NoiseState {
    id: u16,
    geo: Geometry,
    rng: ChaCha20Rng,
    run_context: u64,
    budget: u32,
}

impl NoiseState {
    pub fn new(id: u16, geo: Geometry, run_context: u64, seed: u64) -> Self {
        let n = geo.cfg.n as u32;
        NoiseState {
            id,
            geo,
            rng: ChaCha20Rng::seed_from_u64(
                seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(id as u64 + 1),
            ),
            run_context,
            budget: 4 * n,
        }
    }

    fn maybe_spray(&mut self, force: bool) -> Vec<Outbound> {
        if self.budget == 0 {
            return Vec::new();
        }
        // fire on start and then on roughly a quarter of deliveries
        if !force && self.rng.gen_range(0u32..4) != 0 {
            return Vec::new();
        }
        self.budget -= 1;
        let batch = self.make_batch();
        let logical = batch.records.len() as u64;
        let bytes = encode_batch(&batch).expect("noise batches are well-formed");
        vec![Outbound::broadcast(Payload::new(bytes, logical))]
    }

    fn make_batch(&mut self) -> WireBatch {
        let l_max = self.geo.params.l_max;
        let r_spray = self.geo.params.r_max.min(3);
        let count = self.rng.gen_range(3..=10u32);
        let mut used: Vec<(u8, u8, u16, i64)> = Vec::new();
        let mut records = Vec::new();
        for _ in 0..count {
            let level = self.rng.gen_range(0..=l_max) as u8;
            let (k_min, k_max) = self.geo.k_range(level as u32);
            let k = self.rng.gen_range(k_min..=k_max);
            let kind = if self.rng.gen_bool(0.5) {
                MessageKind::Echo1
            } else {
                MessageKind::Echo2
            };
            let round = self.rng.gen_range(1..=r_spray) as u16;
            let slot = (kind_byte(kind), level, round, k);
            if used.contains(&slot) {
                continue; // an overlap would void the whole batch
            }
            used.push(slot);
            // a value on the round's grid: numer/2^(round-1) in [0, 1]
            let depth = round as u32 - 1;
            let numer = self.rng.gen_range(0..=(1i64 << depth));
            let value = FixedValue::new(numer as i128, depth);
            records.push(WireRecord::Point {
                level,
                k: k as i32,
                kind,
                round,
                payload: WirePayload::Explicit(value),
            });
        }
        // one self-consistent attest for a random grid value, plus an
        // occasional forged one that receivers must reject
        let eps = self.geo.cfg.epsilon;
        let lo = self.geo.cfg.s_bound.div_ceil(&eps);
        let hi = self.geo.cfg.e_bound.div_floor(&eps);
        let g = eps.mul(&FixedValue::from_int(self.rng.gen_range(lo..=hi)));
        records.push(WireRecord::Attest {
            value: g,
            tag: attest_tag(self.id, &g, self.run_context),
        });
        if self.rng.gen_bool(0.25) {
            records.push(WireRecord::Attest {
                value: g,
                tag: [0xAB; 32],
            });
        }
        WireBatch {
            sender: self.id,
            records,
            round_tag: 0,
        }
    }
}

fn kind_byte(k: MessageKind) -> u8 {
    match k {
        MessageKind::Echo1 => 0,
        MessageKind::Echo2 => 1,
        MessageKind::Val => 2,
    }
}

// ---------------------------------------------------------------------------
// Protocol run harness
// ---------------------------------------------------------------------------

/// Everything one simulated protocol run needs.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub protocol: ProtocolConfig,
    /// Per-node inputs; ignored for nodes whose behavior dictates its own.
    pub inputs: Vec<FixedValue>,
    pub behaviors: Vec<BehaviorKind>,
    pub scheduler: SchedulerKind,
    pub mode: EncodeMode,
    pub seed: u64,
    /// Overrides the derived per-instance round count (testing only).
    pub r_max_override: Option<u32>,
    /// Collects per-round audit records from every honest instance.
    pub round_log: bool,
}

impl SimConfig {
    pub fn new(
        protocol: ProtocolConfig,
        inputs: Vec<FixedValue>,
        behaviors: Vec<BehaviorKind>,
        scheduler: SchedulerKind,
        mode: EncodeMode,
        seed: u64,
    ) -> Self {
        SimConfig {
            protocol,
            inputs,
            behaviors,
            scheduler,
            mode,
            seed,
            r_max_override: None,
            round_log: false,
        }
    }

    pub fn with_round_log(mut self) -> Self {
        self.round_log = true;
        self
    }
}

/// Result of one simulated run.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Node ids that were honest (assertions quantify over these).
    pub honest: Vec<u16>,
    /// Per-node outputs; `None` for faulty nodes and unfinished runs.
    pub outputs: Vec<Option<NodeOutput>>,
    pub certificates: Vec<Option<Certificate>>,
    pub audit_errors: Vec<Option<String>>,
    pub node_stats: Vec<Option<NodeStats>>,
    pub net: NetStats,
    pub rounds_used: u32,
    /// Per-honest-node, per-instance audit trails (empty unless the run
    /// asked for round logging).
    pub round_logs: Vec<Option<Vec<Vec<crate::binaa::RoundRecord>>>>,
}

impl RunResult {
    /// Largest pairwise distance between honest outputs.
    pub fn agreement_distance(&self) -> Option<Rational> {
        let outs: Vec<&Rational> = self
            .honest
            .iter()
            .filter_map(|i| self.outputs[*i as usize].as_ref().map(|o| &o.value))
            .collect();
        if outs.len() != self.honest.len() || outs.is_empty() {
            return None;
        }
        let lo = outs.iter().min()?;
        let hi = outs.iter().max()?;
        Some(*hi - *lo)
    }

    /// How far honest outputs strayed outside the honest input hull.
    pub fn validity_relaxation(&self, inputs: &[FixedValue]) -> Option<Rational> {
        use num::Zero;
        let m = self
            .honest
            .iter()
            .map(|i| inputs[*i as usize])
            .min()?
            .to_rational();
        let big_m = self
            .honest
            .iter()
            .map(|i| inputs[*i as usize])
            .max()?
            .to_rational();
        let mut worst = Rational::zero();
        for i in &self.honest {
            let o = &self.outputs[*i as usize].as_ref()?.value;
            if *o < m {
                worst = worst.max(&m - o);
            }
            if *o > big_m {
                worst = worst.max(o - &big_m);
            }
        }
        Some(worst)
    }

    pub fn all_honest_finished(&self) -> bool {
        self.honest
            .iter()
            .all(|i| self.outputs[*i as usize].is_some())
    }

    pub fn total_equivocations(&self) -> u64 {
        self.node_stats
            .iter()
            .flatten()
            .map(|s| s.equivocations)
            .sum()
    }
}

/// Builds machines from a [`SimConfig`], runs to quiescence, and collects
/// outputs, certificates, and traffic statistics.
pub fn run_protocol(cfg: &SimConfig) -> Result<RunResult, SimError> {
    let n = cfg.protocol.n;
    if cfg.inputs.len() != n as usize || cfg.behaviors.len() != n as usize {
        return Err(SimError::Config(format!(
            "need {} inputs and behaviors, got {} and {}",
            n,
            cfg.inputs.len(),
            cfg.behaviors.len()
        )));
    }
    let mut geo = Geometry::new(cfg.protocol.clone())
        .map_err(|e| SimError::Config(e.to_string()))?;
    if let Some(r) = cfg.r_max_override {
        geo.params.r_max = r;
    }
    let mk_node = |id: u16, input: FixedValue| -> Result<Box<DelphiNode>, SimError> {
        DelphiNode::new(id, &geo, input, cfg.mode, cfg.seed)
            .map(Box::new)
            .map_err(|e| SimError::Config(e.to_string()))
    };
    let mut machines = Vec::with_capacity(n as usize);
    let mut honest = Vec::new();
    for id in 0..n {
        let m = match cfg.behaviors[id as usize] {
            BehaviorKind::Honest => {
                honest.push(id);
                let mut node = mk_node(id, cfg.inputs[id as usize])?;
                if cfg.round_log {
                    node.set_round_logging(true);
                }
                DelphiMachine::Honest(node)
            }
            BehaviorKind::Silent => DelphiMachine::Silent,
            BehaviorKind::Equivocator => DelphiMachine::Equivocator {
                low: mk_node(id, cfg.protocol.s_bound)?,
                high: mk_node(id, cfg.protocol.e_bound)?,
                n,
            },
            BehaviorKind::ExtremeLow => DelphiMachine::Honest(mk_node(id, cfg.protocol.s_bound)?),
            BehaviorKind::ExtremeHigh => DelphiMachine::Honest(mk_node(id, cfg.protocol.e_bound)?),
            BehaviorKind::RandomNoise => {
                DelphiMachine::Noise(NoiseState::new(id, geo.clone(), cfg.seed, cfg.seed))
            }
        };
        machines.push(m);
    }
    let mut sim = Simulation::new(machines, cfg.scheduler.clone(), cfg.seed);
    sim.run()?;
    let net = sim.stats;
    let machines = sim.into_machines();
    let mut outputs = Vec::new();
    let mut certificates = Vec::new();
    let mut audit_errors = Vec::new();
    let mut node_stats = Vec::new();
    let mut round_logs = Vec::new();
    let mut rounds_used = 0;
    for (id, m) in machines.iter().enumerate() {
        match m.node() {
            Some(node) => {
                outputs.push(node.output().cloned());
                certificates.push(node.certificate().cloned());
                audit_errors.push(node.audit_error().map(|e| e.to_string()));
                node_stats.push(Some(node.stats()));
                rounds_used = rounds_used.max(node.rounds_used());
                if cfg.round_log && honest.binary_search(&(id as u16)).is_ok() {
                    round_logs.push(Some(
                        (0..geo.instance_count())
                            .map(|i| node.instance_round_log(i).to_vec())
                            .collect(),
                    ));
                } else {
                    round_logs.push(None);
                }
            }
            None => {
                outputs.push(None);
                certificates.push(None);
                audit_errors.push(None);
                node_stats.push(None);
                round_logs.push(None);
            }
        }
    }
    Ok(RunResult {
        honest,
        outputs,
        certificates,
        audit_errors,
        node_stats,
        net,
        rounds_used,
        round_logs,
    })
}
