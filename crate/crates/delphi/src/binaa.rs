//! Binary approximate agreement: one instance per checkpoint.
//!
//! Nodes start from a binary opinion (1 near the checkpoint, 0 elsewhere)
//! and run a fixed number of echo rounds. Each round a node broadcasts its
//! current estimate as a first-stage echo, amplifies any value it has seen
//! from `t + 1` distinct senders (so a value backed by at least one honest
//! node spreads to everyone), and sends a single second-stage echo for the
//! first value it has seen from `n - t` senders. The round ends when either
//! two values reach `n - t` first-stage echoes (move to their midpoint) or
//! one value reaches `n - t` second-stage echoes (adopt it). Estimates
//! therefore live on a dyadic grid that refines by one bit per round, and
//! the spread of honest estimates at least halves each round; after `r_max`
//! rounds the estimate is the instance's output.
//!
//! The instance never trusts a sender twice: tallies are per-sender bitsets,
//! a second distinct first-stage value from one sender is accepted (it may
//! be an honest amplification) but a third is provable equivocation, and a
//! second distinct second-stage value is equivocation outright. Messages for
//! future rounds are buffered, messages for past rounds are dropped, and
//! values are rejected unless they lie in `[0, 1]` on the round's grid.

use std::collections::BTreeMap;

use crate::core::FixedValue;
use crate::encoding::EchoKind;

/// Messages this instance wants broadcast to every peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    /// Opens `round` with the node's current estimate.
    RoundStart { value: FixedValue, round: u32 },
    /// Repeats a value seen from `t + 1` senders.
    Amplify { value: FixedValue, round: u32 },
    /// Second-stage echo for a value seen from `n - t` senders.
    Echo2 { value: FixedValue, round: u32 },
}

impl Emission {
    pub fn value(&self) -> FixedValue {
        match self {
            Emission::RoundStart { value, .. }
            | Emission::Amplify { value, .. }
            | Emission::Echo2 { value, .. } => *value,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            Emission::RoundStart { round, .. }
            | Emission::Amplify { round, .. }
            | Emission::Echo2 { round, .. } => *round,
        }
    }
}

/// Drop and fault counters, exposed for run reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InstanceStats {
    /// Distinct-value floods beyond the per-sender allowance.
    pub equivocations: u64,
    /// Values off the round grid or outside `[0, 1]`.
    pub invalid: u64,
    /// Messages for already-completed rounds.
    pub stale: u64,
    /// Messages arriving after the instance finished.
    pub after_finish: u64,
}

/// Audit trail of one completed round, captured when logging is enabled.
/// The closing set holds the one or two values that reached a quorum; any
/// two honest nodes' sets for the same round must intersect, and every
/// element must have been some honest node's round value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub round: u32,
    /// Value this node held entering the round.
    pub start: FixedValue,
    /// Values that closed the round (length 1 or 2).
    pub set: Vec<FixedValue>,
}

#[derive(Debug, Clone)]
struct TallyRow {
    value: FixedValue,
    echo1: u64,
    echo2: u64,
}

/// Per-sender message allowances for the current round.
#[derive(Debug, Clone, Default)]
struct SenderCaps {
    echo1: [Option<FixedValue>; 2],
    echo2: Option<FixedValue>,
}

/// One binary approximate-agreement instance.
#[derive(Debug, Clone)]
pub struct BinAA {
    id: u16,
    n: u16,
    t: u16,
    r_max: u32,
    round: u32,
    value: FixedValue,
    finished: bool,
    rows: Vec<TallyRow>,
    caps: Vec<SenderCaps>,
    /// First-stage values this node has already broadcast this round.
    sent1: Vec<FixedValue>,
    sent2: Option<FixedValue>,
    /// Messages for rounds we have not reached yet.
    buffer: BTreeMap<u32, Vec<(u16, EchoKind, FixedValue)>>,
    stats: InstanceStats,
    log_rounds: bool,
    log: Vec<RoundRecord>,
}

impl BinAA {
    /// Starts an instance with a binary input. Returns the state and the
    /// round-1 opening emission.
    pub fn new(id: u16, n: u16, t: u16, r_max: u32, input: FixedValue) -> (Self, Vec<Emission>) {
        assert!(
            input == FixedValue::zero() || input == FixedValue::one(),
            "inputs are binary"
        );
        assert!(n as u32 >= 3 * t as u32 + 1 && n <= 64 && id < n);
        assert!(r_max >= 1);
        let mut inst = BinAA {
            id,
            n,
            t,
            r_max,
            round: 1,
            value: input,
            finished: false,
            rows: Vec::new(),
            caps: vec![SenderCaps::default(); n as usize],
            sent1: Vec::new(),
            sent2: None,
            buffer: BTreeMap::new(),
            stats: InstanceStats::default(),
            log_rounds: false,
            log: Vec::new(),
        };
        let mut out = Vec::new();
        inst.open_round(&mut out);
        (inst, out)
    }

    pub fn output(&self) -> Option<FixedValue> {
        self.finished.then_some(self.value)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn estimate(&self) -> FixedValue {
        self.value
    }

    pub fn stats(&self) -> InstanceStats {
        self.stats
    }

    /// Turns on the per-round audit trail (off by default; costs memory
    /// proportional to rounds completed).
    pub fn set_round_logging(&mut self, on: bool) {
        self.log_rounds = on;
    }

    pub fn round_log(&self) -> &[RoundRecord] {
        &self.log
    }

    /// Feeds one received message; returns everything to broadcast.
    pub fn ingest(
        &mut self,
        sender: u16,
        kind: EchoKind,
        value: FixedValue,
        round: u32,
    ) -> Vec<Emission> {
        let mut out = Vec::new();
        if sender >= self.n || sender == self.id {
            self.stats.invalid += 1;
            return out;
        }
        let mut queue = vec![(sender, kind, value, round)];
        while let Some((sender, kind, value, round)) = queue.pop() {
            if self.finished {
                self.stats.after_finish += 1;
                continue;
            }
            if round < self.round {
                self.stats.stale += 1;
                continue;
            }
            if round > self.round {
                if round <= self.r_max {
                    self.buffer.entry(round).or_default().push((sender, kind, value));
                } else {
                    self.stats.invalid += 1;
                }
                continue;
            }
            self.apply(sender, kind, value, &mut out);
            if let Some((next, set)) = self.round_end() {
                let completed = self.round;
                if self.log_rounds {
                    self.log.push(RoundRecord {
                        round: completed,
                        start: self.value,
                        set,
                    });
                }
                self.value = next;
                if completed == self.r_max {
                    self.finished = true;
                    self.buffer.clear();
                    continue;
                }
                self.round += 1;
                self.open_round(&mut out);
                if let Some(held) = self.buffer.remove(&self.round) {
                    // Drained messages behave exactly as if they had just
                    // arrived (LIFO extension of a LIFO queue keeps the
                    // original arrival order).
                    for (s, k, v) in held.into_iter().rev() {
                        queue.push((s, k, v, self.round));
                    }
                }
            }
        }
        out
    }

    /// Resets per-round state and broadcasts the opener. The node's own
    /// echo is counted immediately; peers receive it through the network.
    fn open_round(&mut self, out: &mut Vec<Emission>) {
        self.rows.clear();
        self.caps = vec![SenderCaps::default(); self.n as usize];
        self.sent1 = vec![self.value];
        self.sent2 = None;
        out.push(Emission::RoundStart {
            value: self.value,
            round: self.round,
        });
        let id = self.id;
        let value = self.value;
        self.row_mut(value).echo1 |= 1 << id;
    }

    fn row_mut(&mut self, value: FixedValue) -> &mut TallyRow {
        if let Some(i) = self.rows.iter().position(|r| r.value == value) {
            return &mut self.rows[i];
        }
        self.rows.push(TallyRow {
            value,
            echo1: 0,
            echo2: 0,
        });
        self.rows.last_mut().unwrap()
    }

    /// Tallies one current-round message and runs the emission fixpoint.
    fn apply(&mut self, sender: u16, kind: EchoKind, value: FixedValue, out: &mut Vec<Emission>) {
        // Round-r values live on the dyadic grid refined r-1 times.
        if value < FixedValue::zero()
            || value > FixedValue::one()
            || value.scale_exp() >= self.round
        {
            self.stats.invalid += 1;
            return;
        }
        let cap = &mut self.caps[sender as usize];
        match kind {
            EchoKind::Echo1 => {
                if cap.echo1.iter().flatten().any(|v| *v == value) {
                    return; // duplicate, idempotent
                }
                // Two distinct values are legitimate (round start plus an
                // amplification); a third proves equivocation.
                match cap.echo1.iter_mut().find(|s| s.is_none()) {
                    Some(slot) => *slot = Some(value),
                    None => {
                        self.stats.equivocations += 1;
                        return;
                    }
                }
                self.row_mut(value).echo1 |= 1 << sender;
            }
            EchoKind::Echo2 => {
                match cap.echo2 {
                    Some(v) if v == value => return, // duplicate
                    Some(_) => {
                        self.stats.equivocations += 1;
                        return;
                    }
                    None => cap.echo2 = Some(value),
                }
                self.row_mut(value).echo2 |= 1 << sender;
            }
        }
        self.emission_fixpoint(out);
    }

    /// Amplifies and second-stage-echoes until nothing new triggers. The
    /// node's own emissions are tallied immediately, which can cascade.
    fn emission_fixpoint(&mut self, out: &mut Vec<Emission>) {
        let big = self.n as u32 - self.t as u32;
        let small = self.t as u32 + 1;
        loop {
            let mut candidates: Vec<FixedValue> = self
                .rows
                .iter()
                .filter(|r| r.echo1.count_ones() >= small)
                .map(|r| r.value)
                .filter(|v| !self.sent1.contains(v))
                .collect();
            candidates.sort();
            let mut progressed = false;
            if self.sent1.len() < 2 {
                if let Some(v) = candidates.first() {
                    self.sent1.push(*v);
                    out.push(Emission::Amplify {
                        value: *v,
                        round: self.round,
                    });
                    let id = self.id;
                    self.row_mut(*v).echo1 |= 1 << id;
                    progressed = true;
                }
            }
            if self.sent2.is_none() {
                let mut ready: Vec<FixedValue> = self
                    .rows
                    .iter()
                    .filter(|r| r.echo1.count_ones() >= big)
                    .map(|r| r.value)
                    .collect();
                ready.sort();
                if let Some(v) = ready.first() {
                    self.sent2 = Some(*v);
                    out.push(Emission::Echo2 {
                        value: *v,
                        round: self.round,
                    });
                    let id = self.id;
                    self.row_mut(*v).echo2 |= 1 << id;
                    progressed = true;
                }
            }
            if !progressed {
                return;
            }
        }
    }

    /// Round-end test. A second-stage quorum adopts that value; otherwise
    /// two first-stage quorums move to the midpoint of the two smallest.
    /// Checks the two closing conditions; returns the next value and the
    /// set of values that justified it.
    fn round_end(&self) -> Option<(FixedValue, Vec<FixedValue>)> {
        let big = self.n as u32 - self.t as u32;
        let mut settled: Vec<FixedValue> = self
            .rows
            .iter()
            .filter(|r| r.echo2.count_ones() >= big)
            .map(|r| r.value)
            .collect();
        if !settled.is_empty() {
            settled.sort();
            return Some((settled[0], vec![settled[0]]));
        }
        let mut seen: Vec<FixedValue> = self
            .rows
            .iter()
            .filter(|r| r.echo1.count_ones() >= big)
            .map(|r| r.value)
            .collect();
        if seen.len() >= 2 {
            seen.sort();
            return Some((seen[0].avg(&seen[1]), vec![seen[0], seen[1]]));
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn fv(s: &str) -> FixedValue {
        FixedValue::parse_decimal(s).unwrap()
    }

    fn kind_of(e: &Emission) -> EchoKind {
        match e {
            Emission::RoundStart { .. } | Emission::Amplify { .. } => EchoKind::Echo1,
            Emission::Echo2 { .. } => EchoKind::Echo2,
        }
    }

    /// Loopback cluster: instant FIFO delivery of every emission to every
    /// other node, in node order. Returns outputs and per-round spans.
    fn run_cluster(inputs: &[u64], r_max: u32) -> (Vec<FixedValue>, Vec<FixedValue>) {
        let n = inputs.len() as u16;
        let t = (n - 1) / 3;
        let mut nodes = Vec::new();
        let mut wire: VecDeque<(u16, Emission)> = VecDeque::new();
        for (i, b) in inputs.iter().enumerate() {
            let (inst, out) = BinAA::new(i as u16, n, t, r_max, FixedValue::from_int(*b as i64));
            for e in out {
                wire.push_back((i as u16, e));
            }
            nodes.push(inst);
        }
        // span of honest estimates after each completed round
        let mut spans: Vec<FixedValue> = Vec::new();
        let mut seen_round = 1u32;
        while let Some((from, e)) = wire.pop_front() {
            for to in 0..n {
                if to == from {
                    continue;
                }
                let outs = nodes[to as usize].ingest(from, kind_of(&e), e.value(), e.round());
                for o in outs {
                    wire.push_back((to, o));
                }
            }
            let min_round = nodes
                .iter()
                .map(|x| if x.finished() { u32::MAX } else { x.round() })
                .min()
                .unwrap();
            if min_round > seen_round {
                // every node has completed `seen_round`
                let vals: Vec<FixedValue> = nodes.iter().map(|x| x.estimate()).collect();
                let span = vals.iter().max().unwrap().sub(vals.iter().min().unwrap());
                spans.push(span);
                seen_round = min_round;
            }
        }
        let outs = nodes
            .iter()
            .map(|x| x.output().expect("all instances finish"))
            .collect();
        (outs, spans)
    }

    #[test]
    fn unanimous_inputs_stay_put() {
        let (outs, _) = run_cluster(&[1, 1, 1, 1], 4);
        assert!(outs.iter().all(|v| *v == FixedValue::one()));
        let (outs, _) = run_cluster(&[0, 0, 0, 0, 0, 0, 0], 5);
        assert!(outs.iter().all(|v| *v == FixedValue::zero()));
    }

    #[test]
    fn split_inputs_converge_and_halve() {
        let r_max = 6;
        let (outs, spans) = run_cluster(&[0, 0, 1, 1], r_max);
        let max = outs.iter().max().unwrap();
        let min = outs.iter().min().unwrap();
        assert!(max.sub(min) <= FixedValue::pow2_neg(r_max));
        for v in &outs {
            assert!(*v >= FixedValue::zero() && *v <= FixedValue::one());
            assert!(v.scale_exp() <= r_max);
        }
        // spread after round r is at most 2^-r
        for (i, span) in spans.iter().enumerate() {
            assert!(
                *span <= FixedValue::pow2_neg(i as u32 + 1),
                "span {span} after round {}",
                i + 1
            );
        }
    }

    #[test]
    fn validity_stays_in_input_hull() {
        for inputs in [[1u64, 0, 0, 0], [1, 1, 1, 0]] {
            let (outs, _) = run_cluster(&inputs, 5);
            for v in outs {
                assert!(v >= FixedValue::zero() && v <= FixedValue::one());
            }
        }
    }

    #[test]
    fn amplification_on_small_quorum() {
        // self has input 0; two distinct senders push value 1 (t + 1 = 2)
        let (mut inst, _) = BinAA::new(0, 4, 1, 3, FixedValue::zero());
        let out = inst.ingest(1, EchoKind::Echo1, FixedValue::one(), 1);
        assert!(out.is_empty());
        let out = inst.ingest(2, EchoKind::Echo1, FixedValue::one(), 1);
        assert!(out.contains(&Emission::Amplify {
            value: FixedValue::one(),
            round: 1
        }));
    }

    #[test]
    fn two_quorums_move_to_midpoint() {
        // senders 1 and 2 legitimately echo both values; rows 0 and 1 both
        // reach n - t = 3 including this node's own echoes
        let (mut inst, _) = BinAA::new(0, 4, 1, 3, FixedValue::zero());
        inst.ingest(1, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(2, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(1, EchoKind::Echo1, FixedValue::one(), 1);
        let out = inst.ingest(2, EchoKind::Echo1, FixedValue::one(), 1);
        // amplification of 1 gave the second row its third echo
        assert!(out
            .iter()
            .any(|e| matches!(e, Emission::RoundStart { round: 2, .. })));
        assert_eq!(inst.round(), 2);
        assert_eq!(inst.estimate(), fv("0.5"));
    }

    #[test]
    fn second_stage_quorum_adopts_value() {
        let (mut inst, _) = BinAA::new(0, 4, 1, 3, FixedValue::one());
        inst.ingest(1, EchoKind::Echo2, FixedValue::one(), 1);
        let out = inst.ingest(2, EchoKind::Echo2, FixedValue::one(), 1);
        // own second-stage echo fires only at a first-stage quorum, so feed
        // first-stage echoes too
        assert!(inst.round() == 1 || !out.is_empty());
        inst.ingest(1, EchoKind::Echo1, FixedValue::one(), 1);
        let _ = inst.ingest(2, EchoKind::Echo1, FixedValue::one(), 1);
        // n - t echo2 from {1, 2, self}: round ends by adoption
        assert_eq!(inst.round(), 2);
        assert_eq!(inst.estimate(), FixedValue::one());
    }

    #[test]
    fn third_distinct_value_is_equivocation() {
        let (mut inst, _) = BinAA::new(0, 7, 2, 3, FixedValue::zero());
        inst.ingest(1, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(1, EchoKind::Echo1, FixedValue::one(), 1);
        assert_eq!(inst.stats().equivocations, 0);
        inst.ingest(1, EchoKind::Echo1, fv("0.5"), 2); // future round, buffered
        inst.ingest(1, EchoKind::Echo1, FixedValue::one(), 1); // dup, fine
        let before = inst.rows.len();
        inst.ingest(1, EchoKind::Echo1, fv("1"), 1);
        assert_eq!(inst.rows.len(), before);
        // a third distinct round-1 value: only possible by lying
        // (values 0 and 1 already used; any other integer is off-grid, so
        // use an equivocating echo2 pair as the clean case)
        inst.ingest(2, EchoKind::Echo2, FixedValue::zero(), 1);
        inst.ingest(2, EchoKind::Echo2, FixedValue::one(), 1);
        assert_eq!(inst.stats().equivocations, 1);
    }

    #[test]
    fn third_distinct_echo1_counts_as_equivocation() {
        // round 2 grid admits 0, 1/2, 1: three distinct values from one
        // sender trips the allowance
        let (mut inst, _) = BinAA::new(0, 4, 1, 3, FixedValue::zero());
        // finish round 1 by unanimous zeros
        inst.ingest(1, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(2, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(1, EchoKind::Echo2, FixedValue::zero(), 1);
        inst.ingest(2, EchoKind::Echo2, FixedValue::zero(), 1);
        assert_eq!(inst.round(), 2);
        inst.ingest(3, EchoKind::Echo1, FixedValue::zero(), 2);
        inst.ingest(3, EchoKind::Echo1, FixedValue::one(), 2);
        assert_eq!(inst.stats().equivocations, 0);
        inst.ingest(3, EchoKind::Echo1, fv("0.5"), 2);
        assert_eq!(inst.stats().equivocations, 1);
    }

    #[test]
    fn off_grid_and_out_of_range_values_rejected() {
        let (mut inst, _) = BinAA::new(0, 4, 1, 3, FixedValue::zero());
        inst.ingest(1, EchoKind::Echo1, fv("0.5"), 1); // depth 1 in round 1
        inst.ingest(2, EchoKind::Echo1, fv("2"), 1); // above 1
        inst.ingest(3, EchoKind::Echo1, fv("-1"), 1); // below 0
        assert_eq!(inst.stats().invalid, 3);
        assert_eq!(inst.rows.len(), 1); // own echo only
    }

    #[test]
    fn stale_messages_dropped_future_buffered() {
        let (mut inst, _) = BinAA::new(0, 4, 1, 3, FixedValue::zero());
        // complete round 1
        inst.ingest(1, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(2, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(1, EchoKind::Echo2, FixedValue::zero(), 1);
        inst.ingest(2, EchoKind::Echo2, FixedValue::zero(), 1);
        assert_eq!(inst.round(), 2);
        inst.ingest(3, EchoKind::Echo1, FixedValue::zero(), 1);
        assert_eq!(inst.stats().stale, 1);
        // far-future beyond r_max is invalid, not buffered
        inst.ingest(3, EchoKind::Echo1, FixedValue::zero(), 9);
        assert!(inst.stats().invalid >= 1);
    }

    #[test]
    fn buffered_round_messages_replay_on_advance() {
        let (mut inst, _) = BinAA::new(0, 4, 1, 3, FixedValue::zero());
        // round-2 echoes arrive early
        inst.ingest(1, EchoKind::Echo1, FixedValue::zero(), 2);
        inst.ingest(2, EchoKind::Echo1, FixedValue::zero(), 2);
        assert_eq!(inst.round(), 1);
        // completing round 1 drains them; rows then hold 3 echoes at once
        inst.ingest(1, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(2, EchoKind::Echo1, FixedValue::zero(), 1);
        inst.ingest(1, EchoKind::Echo2, FixedValue::zero(), 1);
        let out = inst.ingest(2, EchoKind::Echo2, FixedValue::zero(), 1);
        assert_eq!(inst.round(), 2);
        // drained echoes plus own opener reach n - t: echo2 for round 2 fires
        assert!(out
            .iter()
            .any(|e| matches!(e, Emission::Echo2 { round: 2, .. })));
    }

    #[test]
    fn finishes_after_r_max_rounds_with_bounded_depth() {
        let r_max = 3;
        let (outs, _) = run_cluster(&[0, 1, 0, 1, 1, 0, 1], r_max);
        for v in outs {
            assert!(v.scale_exp() <= r_max);
        }
    }

    #[test]
    fn byzantine_flood_cannot_stall_honest_nodes() {
        // three honest nodes (n = 4, t = 1) run while node 3 floods
        // equivocating values; honest cluster still terminates
        let n = 4u16;
        let t = 1u16;
        let r_max = 4;
        let mut nodes: Vec<BinAA> = Vec::new();
        let mut wire: VecDeque<(u16, Emission)> = VecDeque::new();
        for (i, b) in [0u64, 1, 1].iter().enumerate() {
            let (inst, out) = BinAA::new(i as u16, n, t, r_max, FixedValue::from_int(*b as i64));
            for e in out {
                wire.push_back((i as u16, e));
            }
            nodes.push(inst);
        }
        // byzantine node 3: per round, sprays 0 and 1 and an off-grid value
        let mut sprayed = 0u32;
        while let Some((from, e)) = wire.pop_front() {
            for to in 0..3u16 {
                if to == from {
                    continue;
                }
                for o in nodes[to as usize].ingest(from, kind_of(&e), e.value(), e.round()) {
                    wire.push_back((to, o));
                }
            }
            if sprayed < 8 {
                sprayed += 1;
                let r = nodes[0].round().min(nodes[1].round()).min(nodes[2].round());
                for to in 0..3u16 {
                    for v in [FixedValue::zero(), FixedValue::one()] {
                        for o in nodes[to as usize].ingest(3, EchoKind::Echo1, v, r) {
                            wire.push_back((to, o));
                        }
                    }
                }
            }
        }
        for x in &nodes {
            assert!(x.finished(), "honest node stalled at round {}", x.round());
        }
        let vals: Vec<FixedValue> = nodes.iter().map(|x| x.output().unwrap()).collect();
        let span = vals.iter().max().unwrap().sub(vals.iter().min().unwrap());
        assert!(span <= FixedValue::pow2_neg(r_max));
    }
}
