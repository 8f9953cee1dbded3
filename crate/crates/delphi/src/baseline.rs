//! Witness-protocol baseline for cost comparison.
//!
//! This is the classic asynchronous approximate-agreement construction:
//! every node reliably broadcasts its current value each round, waits for
//! the first `n - t` deliveries, publishes that set as a report, and
//! accepts a peer as a witness once the peer's reported set is a subset of
//! its own deliveries. With `n - t` witnesses the node reduces the union
//! of witnessed values (sort, trim `t` from each end, take the midpoint)
//! and moves to the next round. Reliable broadcast makes equivocation
//! ineffective, at the price of `O(n^3)` link messages per round; the
//! checkpoint protocol in [`crate::delphi`] exists to beat this cost.
//!
//! Round 0 estimates the needed horizon from the observed spread. A node's
//! own estimate can undershoot the true honest spread by at most a factor
//! of two (some honest node always observes at least half of it), so one
//! safety round is added. Nodes past their own horizon stop initiating
//! rounds but still join rounds others start, carrying their current value
//! forward, so every round that forms completes at every honest node.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use thiserror::Error;

use crate::core::{FixedValue, ProtocolConfig, Rational};
use crate::simnet::{
    Machine, NetStats, Outbound, Payload, SchedulerKind, SimError, Simulation,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BaselineError {
    #[error("malformed baseline batch: {0}")]
    Malformed(&'static str),
}

// ---------------------------------------------------------------------------
// Pure reduction helpers
// ---------------------------------------------------------------------------

/// Sorts, trims `t` values from each end, and returns the midpoint of the
/// remaining extremes. Panics if fewer than `2t + 1` values remain.
pub fn reduce(values: &[FixedValue], t: u16) -> FixedValue {
    let mut sorted = values.to_vec();
    sorted.sort();
    let t = t as usize;
    assert!(sorted.len() > 2 * t, "reduce needs more than 2t values");
    let trimmed = &sorted[t..sorted.len() - t];
    trimmed[0].avg(&trimmed[trimmed.len() - 1])
}

/// Rounds of halving needed to bring `range` at or below `epsilon`.
pub fn estimate_rounds(range: &FixedValue, epsilon: &FixedValue) -> u32 {
    assert!(epsilon.numer() > 0);
    if range.numer() <= 0 {
        return 0;
    }
    let mut r = 0u32;
    while epsilon.mul_pow2(r as i32) < *range {
        r += 1;
        assert!(r <= 128, "range/epsilon ratio out of bounds");
    }
    r
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

const TAG_INIT: u8 = 0x10;
const TAG_ECHO: u8 = 0x11;
const TAG_READY: u8 = 0x12;
const TAG_REPORT: u8 = 0x13;

/// One logical baseline message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BaseRecord {
    /// Reliable-broadcast initiation of the sender's round value.
    Init { round: u16, value: FixedValue },
    Echo {
        round: u16,
        origin: u16,
        value: FixedValue,
    },
    Ready {
        round: u16,
        origin: u16,
        value: FixedValue,
    },
    /// The first `n - t` deliveries the sender observed this round.
    Report {
        round: u16,
        entries: Vec<(u16, FixedValue)>,
    },
}

fn put_value(out: &mut Vec<u8>, v: &FixedValue) -> Result<(), BaselineError> {
    let numer = i64::try_from(v.numer())
        .map_err(|_| BaselineError::Malformed("value numerator out of range"))?;
    let scale =
        u8::try_from(v.scale_exp()).map_err(|_| BaselineError::Malformed("value scale too deep"))?;
    out.extend_from_slice(&numer.to_le_bytes());
    out.push(scale);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BaselineError> {
        if self.pos + n > self.buf.len() {
            return Err(BaselineError::Malformed("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, BaselineError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, BaselineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, BaselineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn value(&mut self) -> Result<FixedValue, BaselineError> {
        let numer = i64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let scale = self.u8()?;
        if scale > 64 {
            return Err(BaselineError::Malformed("value scale too deep"));
        }
        Ok(FixedValue::new(numer as i128, scale as u32))
    }
}

/// Serializes records behind a `{sender, count}` header.
pub fn encode_base_batch(sender: u16, records: &[BaseRecord]) -> Result<Vec<u8>, BaselineError> {
    let mut out = Vec::new();
    out.extend_from_slice(&sender.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        match rec {
            BaseRecord::Init { round, value } => {
                out.push(TAG_INIT);
                out.extend_from_slice(&round.to_le_bytes());
                put_value(&mut out, value)?;
            }
            BaseRecord::Echo {
                round,
                origin,
                value,
            } => {
                out.push(TAG_ECHO);
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&origin.to_le_bytes());
                put_value(&mut out, value)?;
            }
            BaseRecord::Ready {
                round,
                origin,
                value,
            } => {
                out.push(TAG_READY);
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&origin.to_le_bytes());
                put_value(&mut out, value)?;
            }
            BaseRecord::Report { round, entries } => {
                out.push(TAG_REPORT);
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
                for (origin, value) in entries {
                    out.extend_from_slice(&origin.to_le_bytes());
                    put_value(&mut out, value)?;
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_base_batch(bytes: &[u8]) -> Result<(u16, Vec<BaseRecord>), BaselineError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let sender = r.u16()?;
    let count = r.u32()?;
    if count > 1 << 20 {
        return Err(BaselineError::Malformed("absurd record count"));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rec = match r.u8()? {
            TAG_INIT => BaseRecord::Init {
                round: r.u16()?,
                value: r.value()?,
            },
            TAG_ECHO => BaseRecord::Echo {
                round: r.u16()?,
                origin: r.u16()?,
                value: r.value()?,
            },
            TAG_READY => BaseRecord::Ready {
                round: r.u16()?,
                origin: r.u16()?,
                value: r.value()?,
            },
            TAG_REPORT => {
                let round = r.u16()?;
                let len = r.u16()?;
                let mut entries = Vec::with_capacity(len as usize);
                for _ in 0..len {
                    let origin = r.u16()?;
                    let value = r.value()?;
                    entries.push((origin, value));
                }
                BaseRecord::Report { round, entries }
            }
            _ => return Err(BaselineError::Malformed("unknown tag")),
        };
        records.push(rec);
    }
    if r.pos != bytes.len() {
        return Err(BaselineError::Malformed("trailing bytes"));
    }
    Ok((sender, records))
}

// ---------------------------------------------------------------------------
// Node state
// ---------------------------------------------------------------------------

/// Reliable-broadcast state for one `(round, origin)` slot.
#[derive(Default)]
struct Rbc {
    echoes: BTreeMap<FixedValue, u64>,
    readys: BTreeMap<FixedValue, u64>,
    echoed: bool,
    ready_sent: bool,
    delivered: bool,
}

#[derive(Default)]
struct RoundState {
    /// Deliveries in arrival order plus an index for subset checks.
    order: Vec<(u16, FixedValue)>,
    by_origin: BTreeMap<u16, FixedValue>,
    reported: bool,
    reports: BTreeMap<u16, Vec<(u16, FixedValue)>>,
    witnesses: u64,
    accepted: Vec<u16>,
    completed: bool,
    initiated: bool,
    traffic: bool,
}

/// One baseline participant.
pub struct BaselineNode {
    id: u16,
    n: u16,
    t: u16,
    lo: FixedValue,
    hi: FixedValue,
    epsilon: FixedValue,
    value: FixedValue,
    round: u16,
    /// Last round this node initiates on its own; set after round 0.
    horizon: Option<u16>,
    /// Hard bound on rounds anyone can drag the node into.
    cap: u16,
    rbcs: HashMap<(u16, u16), Rbc>,
    rounds: HashMap<u16, RoundState>,
    rounds_completed: u16,
    /// `history[0]` is the input; `history[k]` the value after `k` reduce
    /// rounds. Round 0 only estimates the horizon, so it adds no entry.
    history: Vec<FixedValue>,
    out: Vec<BaseRecord>,
    pub invalid: u64,
}

impl BaselineNode {
    pub fn new(id: u16, cfg: &ProtocolConfig, input: FixedValue) -> Self {
        assert!(input >= cfg.s_bound && input <= cfg.e_bound);
        let span = cfg.e_bound.sub(&cfg.s_bound);
        let cap = estimate_rounds(&span, &cfg.epsilon) as u16 + 1;
        BaselineNode {
            id,
            n: cfg.n,
            t: cfg.t,
            lo: cfg.s_bound,
            hi: cfg.e_bound,
            epsilon: cfg.epsilon,
            value: input,
            round: 0,
            horizon: None,
            cap,
            rbcs: HashMap::new(),
            rounds: HashMap::new(),
            rounds_completed: 0,
            history: vec![input],
            out: Vec::new(),
            invalid: 0,
        }
    }

    pub fn value(&self) -> FixedValue {
        self.value
    }

    pub fn rounds_completed(&self) -> u16 {
        self.rounds_completed
    }

    /// Input followed by the value after each completed reduce round.
    pub fn history(&self) -> &[FixedValue] {
        &self.history
    }

    /// Starts round 0 and returns the wire batch to broadcast.
    pub fn start(&mut self) -> Result<Vec<u8>, BaselineError> {
        self.initiate(0);
        self.drain()
    }

    /// Ingests one inbound batch and returns the response batch, if any.
    pub fn handle(&mut self, bytes: &[u8]) -> Result<Vec<u8>, BaselineError> {
        let (sender, records) = decode_base_batch(bytes)?;
        if sender >= self.n {
            return Err(BaselineError::Malformed("sender out of range"));
        }
        for rec in records {
            self.apply(sender, &rec);
        }
        self.drain()
    }

    fn drain(&mut self) -> Result<Vec<u8>, BaselineError> {
        // emitting records can trigger more state transitions locally, so
        // iterate self-application to a fixed point before serializing
        let mut batch = Vec::new();
        while !self.out.is_empty() {
            let pending = std::mem::take(&mut self.out);
            for rec in &pending {
                self.apply(self.id, rec);
            }
            batch.extend(pending);
        }
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        encode_base_batch(self.id, &batch)
    }

    fn emit(&mut self, rec: BaseRecord) {
        self.out.push(rec);
    }

    fn initiate(&mut self, round: u16) {
        let st = self.rounds.entry(round).or_default();
        if st.initiated {
            return;
        }
        st.initiated = true;
        let value = self.value;
        self.emit(BaseRecord::Init { round, value });
    }

    fn value_ok(&self, v: &FixedValue) -> bool {
        *v >= self.lo && *v <= self.hi && v.scale_exp() <= 62
    }

    fn apply(&mut self, sender: u16, rec: &BaseRecord) {
        match rec {
            BaseRecord::Init { round, value } => {
                if *round > self.cap || !self.value_ok(value) {
                    self.invalid += 1;
                    return;
                }
                self.touch(*round);
                let cell = self.rbcs.entry((*round, sender)).or_default();
                if !cell.echoed {
                    cell.echoed = true;
                    let (round, origin, value) = (*round, sender, *value);
                    self.emit(BaseRecord::Echo {
                        round,
                        origin,
                        value,
                    });
                }
            }
            BaseRecord::Echo {
                round,
                origin,
                value,
            } => {
                if *round > self.cap || *origin >= self.n || !self.value_ok(value) {
                    self.invalid += 1;
                    return;
                }
                self.touch(*round);
                let quorum = (self.n - self.t) as u32;
                let send_ready = {
                    let cell = self.rbcs.entry((*round, *origin)).or_default();
                    let mask = cell.echoes.entry(*value).or_insert(0);
                    *mask |= 1 << sender;
                    let hit = mask.count_ones() >= quorum && !cell.ready_sent;
                    if hit {
                        cell.ready_sent = true;
                    }
                    hit
                };
                if send_ready {
                    self.emit(BaseRecord::Ready {
                        round: *round,
                        origin: *origin,
                        value: *value,
                    });
                }
            }
            BaseRecord::Ready {
                round,
                origin,
                value,
            } => {
                if *round > self.cap || *origin >= self.n || !self.value_ok(value) {
                    self.invalid += 1;
                    return;
                }
                self.touch(*round);
                let t = self.t as u32;
                let (send_ready, deliver) = {
                    let cell = self.rbcs.entry((*round, *origin)).or_default();
                    let mask = cell.readys.entry(*value).or_insert(0);
                    *mask |= 1 << sender;
                    let count = mask.count_ones();
                    let amplify = count >= t + 1 && !cell.ready_sent;
                    if amplify {
                        cell.ready_sent = true;
                    }
                    let deliver = count >= 2 * t + 1 && !cell.delivered;
                    if deliver {
                        cell.delivered = true;
                    }
                    (amplify, deliver)
                };
                if send_ready {
                    self.emit(BaseRecord::Ready {
                        round: *round,
                        origin: *origin,
                        value: *value,
                    });
                }
                if deliver {
                    self.deliver(*round, *origin, *value);
                }
            }
            BaseRecord::Report { round, entries } => {
                let distinct =
                    entries.iter().map(|(o, _)| *o).collect::<std::collections::BTreeSet<_>>();
                if *round > self.cap
                    || entries.len() != (self.n - self.t) as usize
                    || distinct.len() != entries.len()
                    || entries.iter().any(|(o, v)| *o >= self.n || !self.value_ok(v))
                {
                    self.invalid += 1;
                    return;
                }
                self.touch(*round);
                let st = self.rounds.entry(*round).or_default();
                st.reports.entry(sender).or_insert_with(|| entries.clone());
                self.progress(*round);
            }
        }
    }

    /// Marks traffic on a round and lazily joins it if this node is past
    /// its own horizon but peers are still running.
    fn touch(&mut self, round: u16) {
        let st = self.rounds.entry(round).or_default();
        st.traffic = true;
        if let Some(h) = self.horizon {
            if round == self.round && round > h && round <= self.cap {
                self.initiate(round);
            }
        }
    }

    fn deliver(&mut self, round: u16, origin: u16, value: FixedValue) {
        let st = self.rounds.entry(round).or_default();
        if st.by_origin.contains_key(&origin) {
            return;
        }
        st.by_origin.insert(origin, value);
        st.order.push((origin, value));
        self.progress(round);
    }

    fn progress(&mut self, round: u16) {
        if round != self.round {
            return;
        }
        let quorum = (self.n - self.t) as usize;
        let (report, complete) = {
            let st = self.rounds.entry(round).or_default();
            if st.completed {
                return;
            }
            let mut report = None;
            if !st.reported && st.order.len() >= quorum {
                st.reported = true;
                report = Some(st.order[..quorum].to_vec());
            }
            // a report is a witness once every entry matches an own delivery
            let pending: Vec<u16> = st
                .reports
                .keys()
                .filter(|r| st.witnesses >> **r & 1 == 0)
                .copied()
                .collect();
            for reporter in pending {
                let ok = st.reports[&reporter]
                    .iter()
                    .all(|(o, v)| st.by_origin.get(o) == Some(v));
                if ok {
                    st.witnesses |= 1 << reporter;
                    st.accepted.push(reporter);
                }
            }
            let complete = st.witnesses.count_ones() >= quorum as u32;
            if complete {
                st.completed = true;
            }
            (report, complete)
        };
        if let Some(entries) = report {
            self.emit(BaseRecord::Report { round, entries });
        }
        if complete {
            self.finish(round);
        }
    }

    fn finish(&mut self, round: u16) {
        let st = &self.rounds[&round];
        let mut union: BTreeMap<u16, FixedValue> = BTreeMap::new();
        for reporter in &st.accepted {
            for (o, v) in &st.reports[reporter] {
                union.insert(*o, *v);
            }
        }
        let values: Vec<FixedValue> = union.values().copied().collect();
        if round == 0 {
            let span = values
                .iter()
                .max()
                .unwrap()
                .sub(values.iter().min().unwrap());
            // own estimates can miss up to half the honest spread, so pad
            // by one halving round
            let h = (estimate_rounds(&span, &self.epsilon) as u16 + 1).min(self.cap);
            self.horizon = Some(h);
        } else {
            self.value = reduce(&values, self.t);
            self.history.push(self.value);
        }
        self.rounds_completed = round;
        self.round = round + 1;
        let next = self.round;
        if next <= self.horizon.expect("set in round 0") {
            self.initiate(next);
        } else if next <= self.cap && self.rounds.entry(next).or_default().traffic {
            // peers are already running the next round; join immediately
            self.initiate(next);
        }
        self.progress(next);
    }
}

// ---------------------------------------------------------------------------
// Simulation integration
// ---------------------------------------------------------------------------

pub enum BaselineMachine {
    Honest(Box<BaselineNode>),
    Silent,
}

impl BaselineMachine {
    pub fn node(&self) -> Option<&BaselineNode> {
        match self {
            BaselineMachine::Honest(n) => Some(n),
            BaselineMachine::Silent => None,
        }
    }

    fn wrap(bytes: Vec<u8>) -> Vec<Outbound> {
        if bytes.is_empty() {
            return Vec::new();
        }
        let logical = u32::from_le_bytes(bytes[2..6].try_into().unwrap()) as u64;
        vec![Outbound::broadcast(Payload::new(bytes, logical))]
    }
}

impl Machine for BaselineMachine {
    fn on_start(&mut self) -> Vec<Outbound> {
        match self {
            BaselineMachine::Honest(node) => {
                Self::wrap(node.start().expect("own batches encode"))
            }
            BaselineMachine::Silent => Vec::new(),
        }
    }

    fn on_message(&mut self, _from: u16, payload: &Rc<Payload>) -> Vec<Outbound> {
        match self {
            BaselineMachine::Honest(node) => match node.handle(&payload.bytes) {
                Ok(bytes) => Self::wrap(bytes),
                Err(_) => {
                    node.invalid += 1;
                    Vec::new()
                }
            },
            BaselineMachine::Silent => Vec::new(),
        }
    }
}

/// Configuration of one baseline run. The last `silent` nodes send nothing.
#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub protocol: ProtocolConfig,
    pub inputs: Vec<FixedValue>,
    pub silent: u16,
    pub scheduler: SchedulerKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub honest: Vec<u16>,
    pub outputs: Vec<Option<FixedValue>>,
    /// Per node: input plus the value after each reduce round (`None` for
    /// faulty nodes). Lengths can differ by one when horizons differ.
    pub histories: Vec<Option<Vec<FixedValue>>>,
    pub rounds_used: u16,
    pub net: NetStats,
}

impl BaselineResult {
    pub fn agreement_distance(&self) -> Option<Rational> {
        let vals: Vec<FixedValue> = self
            .honest
            .iter()
            .filter_map(|i| self.outputs[*i as usize])
            .collect();
        if vals.is_empty() {
            return None;
        }
        let lo = vals.iter().min()?.to_rational();
        let hi = vals.iter().max()?.to_rational();
        Some(hi - lo)
    }
}

/// Runs the witness baseline to quiescence.
pub fn run_baseline(cfg: &BaselineConfig) -> Result<BaselineResult, SimError> {
    let n = cfg.protocol.n;
    if cfg.inputs.len() != n as usize || cfg.silent > cfg.protocol.t {
        return Err(SimError::Config(
            "need n inputs and at most t silent nodes".into(),
        ));
    }
    cfg.protocol
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let mut machines = Vec::new();
    let mut honest = Vec::new();
    for id in 0..n {
        if id >= n - cfg.silent {
            machines.push(BaselineMachine::Silent);
        } else {
            honest.push(id);
            machines.push(BaselineMachine::Honest(Box::new(BaselineNode::new(
                id,
                &cfg.protocol,
                cfg.inputs[id as usize],
            ))));
        }
    }
    let mut sim = Simulation::new(machines, cfg.scheduler.clone(), cfg.seed);
    sim.run()?;
    let net = sim.stats;
    let mut outputs = Vec::new();
    let mut histories = Vec::new();
    let mut rounds_used = 0;
    for m in sim.machines() {
        match m.node() {
            Some(node) => {
                outputs.push(Some(node.value()));
                histories.push(Some(node.history().to_vec()));
                rounds_used = rounds_used.max(node.rounds_completed());
            }
            None => {
                outputs.push(None);
                histories.push(None);
            }
        }
    }
    Ok(BaselineResult {
        honest,
        outputs,
        histories,
        rounds_used,
        net,
    })
}
