//! The multi-grid agreement node.
//!
//! A node projects its input onto every level of the checkpoint ladder:
//! at each level it feeds 1 into the binary instances of the two
//! checkpoints bracketing its input and 0 into every other instance of
//! that level. When all instances finish, each level aggregates into a
//! weighted position `V` (instance outputs weight the checkpoint grid
//! values) and a confidence `w` (the level's largest instance output).
//! Levels where honest inputs share a checkpoint converge to `w = 1`
//! exactly; noisier levels keep fractional confidence.
//!
//! Cross-level combination then weights level 0 by `w_0^2` and level `l`
//! by `w_l * |w_l - w_{l-1}|`, which concentrates weight on the finest
//! level whose confidence is already saturated, and averages the level
//! positions. The result is rounded to the `epsilon` grid and attested;
//! `t + 1` matching attestations certify the value.

use num::{Signed, Zero};

use crate::binaa::{BinAA, Emission, InstanceStats};
use crate::core::{
    checkpoints_for_input, derive_params, level_k_range, CheckpointId, CoreError, DerivedParams,
    FixedValue, ProtocolConfig, Rational,
};
use crate::encoding::{
    encode_batch, DeltaDecoder, DeltaEncoder, EchoKind, EncodeMode, OutboundMsg,
};
use crate::finalize::{attest_tag, round_to_grid, AttestPool, Certificate, FinalizeError};

/// Checkpoint layout of a validated configuration: per-level index ranges
/// and a dense instance numbering.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub cfg: ProtocolConfig,
    pub params: DerivedParams,
    k_ranges: Vec<(i64, i64)>,
    offsets: Vec<usize>,
    total: usize,
}

impl Geometry {
    pub fn new(cfg: ProtocolConfig) -> Result<Self, CoreError> {
        let params = derive_params(&cfg)?;
        let mut k_ranges = Vec::new();
        let mut offsets = Vec::new();
        let mut total = 0usize;
        for level in 0..=params.l_max {
            let (k_min, k_max) = level_k_range(&cfg, level);
            offsets.push(total);
            total += (k_max - k_min + 1) as usize;
            k_ranges.push((k_min, k_max));
        }
        Ok(Geometry {
            cfg,
            params,
            k_ranges,
            offsets,
            total,
        })
    }

    /// Number of agreement instances across all levels.
    pub fn instance_count(&self) -> usize {
        self.total
    }

    pub fn k_range(&self, level: u32) -> (i64, i64) {
        self.k_ranges[level as usize]
    }

    pub fn index_of(&self, c: CheckpointId) -> usize {
        let (k_min, k_max) = self.k_ranges[c.level as usize];
        debug_assert!(c.k >= k_min && c.k <= k_max);
        self.offsets[c.level as usize] + (c.k - k_min) as usize
    }

    pub fn checkpoints(&self) -> impl Iterator<Item = CheckpointId> + '_ {
        (0..=self.params.l_max).flat_map(move |level| {
            let (k_min, k_max) = self.k_ranges[level as usize];
            (k_min..=k_max).map(move |k| CheckpointId { level, k })
        })
    }
}

/// One level's aggregate: position, confidence, and cross-level weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAggregate {
    pub level: u32,
    /// Weighted position `V` of the level.
    pub value: Rational,
    /// Confidence `w`: the level's largest instance output.
    pub weight: Rational,
    /// Cross-level weight `w'`.
    pub cross_weight: Rational,
    /// True when every instance output 0 and the node fell back to its own
    /// input at minimum confidence.
    pub fallback: bool,
}

/// Final result of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutput {
    /// Exact pre-rounding output.
    pub value: Rational,
    /// The output rounded to the `epsilon` grid.
    pub grid_value: FixedValue,
    pub levels: Vec<LevelAggregate>,
}

/// Counters accumulated across all instances plus the codec layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub equivocations: u64,
    pub invalid_values: u64,
    pub stale_msgs: u64,
    pub malformed_batches: u64,
    pub quarantined_streams: u64,
    pub dropped_deltas: u64,
    pub logical_sent: u64,
    pub rejected_attests: u64,
}

/// Aggregates one level. `outputs` pairs checkpoint indices with instance
/// outputs; returns `None` when every output is zero (the caller falls back
/// to its own input).
pub fn aggregate_level(
    outputs: &[(i64, FixedValue)],
    level: u32,
    cfg: &ProtocolConfig,
) -> Option<(Rational, Rational)> {
    let mut num = Rational::zero();
    let mut den = Rational::zero();
    let mut w = Rational::zero();
    for (k, omega) in outputs {
        if omega.is_zero() {
            continue;
        }
        let mu = CheckpointId { level, k: *k }.value(cfg).to_rational();
        let om = omega.to_rational();
        num += &mu * &om;
        den += &om;
        if om > w {
            w = om;
        }
    }
    if den.is_zero() {
        return None;
    }
    Some((num / den, w))
}

/// Cross-level combination: weights `w'_0 = w_0^2`,
/// `w'_l = w_l * |w_l - w_{l-1}|`, output the `w'`-weighted mean of the
/// level positions. Requires `w_0 > 0` (guaranteed by the fallback).
pub fn cross_level(values: &[Rational], weights: &[Rational]) -> (Rational, Vec<Rational>) {
    assert_eq!(values.len(), weights.len());
    assert!(!values.is_empty());
    let mut cross = Vec::with_capacity(weights.len());
    for (l, w) in weights.iter().enumerate() {
        if l == 0 {
            cross.push(w * w);
        } else {
            cross.push(w * (w - &weights[l - 1]).abs());
        }
    }
    let total: Rational = cross.iter().sum();
    assert!(
        total > Rational::zero(),
        "level 0 always carries weight; was the fallback skipped?"
    );
    let mut acc = Rational::zero();
    for (v, wp) in values.iter().zip(&cross) {
        acc += v * wp;
    }
    (acc / total, cross)
}

/// One protocol node. Drives every checkpoint instance, batches outbound
/// traffic, aggregates when all instances finish, and tracks attestations.
pub struct DelphiNode {
    id: u16,
    geo: Geometry,
    input: FixedValue,
    run_context: u64,
    instances: Vec<BinAA>,
    finished: usize,
    outbox: Vec<OutboundMsg>,
    attest_outbox: Vec<(FixedValue, [u8; 32])>,
    encoder: DeltaEncoder,
    decoder: DeltaDecoder,
    pool: AttestPool,
    output: Option<NodeOutput>,
    certificate: Option<Certificate>,
    audit: Option<FinalizeError>,
    stats: NodeStats,
}

impl DelphiNode {
    /// Builds the node and stages its round-1 traffic; call
    /// [`DelphiNode::flush`] to obtain the first batch.
    pub fn new(
        id: u16,
        geo: &Geometry,
        input: FixedValue,
        mode: EncodeMode,
        run_context: u64,
    ) -> Result<Self, CoreError> {
        let cfg = &geo.cfg;
        cfg.validate()?;
        let mut node = DelphiNode {
            id,
            geo: geo.clone(),
            input,
            run_context,
            instances: Vec::with_capacity(geo.instance_count()),
            finished: 0,
            outbox: Vec::new(),
            attest_outbox: Vec::new(),
            encoder: DeltaEncoder::new(mode, cfg.clone()),
            decoder: DeltaDecoder::new(cfg.clone(), geo.params.l_max, geo.params.r_max),
            pool: AttestPool::new(cfg.t, cfg.epsilon, run_context),
            output: None,
            certificate: None,
            audit: None,
            stats: NodeStats::default(),
        };
        for level in 0..=geo.params.l_max {
            let seeded = checkpoints_for_input(&input, level, cfg)?;
            let (k_min, k_max) = geo.k_range(level);
            for k in k_min..=k_max {
                let instance = CheckpointId { level, k };
                let bit = if seeded.contains(&instance) {
                    FixedValue::one()
                } else {
                    FixedValue::zero()
                };
                let (inst, emissions) =
                    BinAA::new(id, cfg.n, cfg.t, geo.params.r_max, bit);
                for e in emissions {
                    node.stage(instance, e);
                }
                node.instances.push(inst);
            }
        }
        Ok(node)
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn input(&self) -> FixedValue {
        self.input
    }

    pub fn output(&self) -> Option<&NodeOutput> {
        self.output.as_ref()
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        self.certificate.as_ref()
    }

    pub fn audit_error(&self) -> Option<&FinalizeError> {
        self.audit.as_ref()
    }

    /// Enables per-round audit records on every instance (memory cost
    /// proportional to instances x rounds; off by default).
    pub fn set_round_logging(&mut self, on: bool) {
        for inst in &mut self.instances {
            inst.set_round_logging(on);
        }
    }

    /// Audit trail of the instance at dense index `idx`.
    pub fn instance_round_log(&self, idx: usize) -> &[crate::binaa::RoundRecord] {
        self.instances[idx].round_log()
    }

    pub fn rounds_used(&self) -> u32 {
        if self.finished == self.instances.len() {
            self.geo.params.r_max
        } else {
            self.instances.iter().map(|i| i.round()).max().unwrap_or(0)
        }
    }

    pub fn stats(&self) -> NodeStats {
        let mut s = self.stats;
        for inst in &self.instances {
            let InstanceStats {
                equivocations,
                invalid,
                stale,
                after_finish: _,
            } = inst.stats();
            s.equivocations += equivocations;
            s.invalid_values += invalid;
            s.stale_msgs += stale;
        }
        s.rejected_attests = self.pool.rejected;
        s
    }

    fn stage(&mut self, instance: CheckpointId, e: Emission) {
        let (kind, round_start) = match e {
            Emission::RoundStart { .. } => (EchoKind::Echo1, true),
            Emission::Amplify { .. } => (EchoKind::Echo1, false),
            Emission::Echo2 { .. } => (EchoKind::Echo2, false),
        };
        self.outbox.push(OutboundMsg {
            instance,
            kind,
            value: e.value(),
            round: e.round(),
            round_start,
        });
    }

    /// Processes one received batch. Malformed batches are counted and
    /// dropped whole; everything else is routed to the owning instances.
    pub fn handle_batch(&mut self, src: u16, bytes: &[u8]) {
        let decoded = match self.decoder.decode(bytes) {
            Ok(d) => d,
            Err(_) => {
                self.stats.malformed_batches += 1;
                return;
            }
        };
        if decoded.sender != src {
            // links are authenticated: a lying sender field is malformed
            self.stats.malformed_batches += 1;
            return;
        }
        self.stats.dropped_deltas += decoded.dropped_deltas as u64;
        self.stats.quarantined_streams += decoded.quarantined as u64;
        for m in &decoded.msgs {
            let idx = self.geo.index_of(m.instance);
            let was_done = self.instances[idx].finished();
            let emissions = self.instances[idx].ingest(src, m.kind, m.value, m.round);
            for e in emissions {
                self.stage(m.instance, e);
            }
            if !was_done && self.instances[idx].finished() {
                self.finished += 1;
            }
        }
        for (value, tag) in &decoded.attests {
            self.ingest_attest(src, *value, *tag);
        }
        if self.output.is_none() && self.finished == self.instances.len() {
            self.finalize_output();
        }
    }

    fn ingest_attest(&mut self, src: u16, value: FixedValue, tag: [u8; 32]) {
        match self.pool.insert(src, value, tag) {
            Ok(Some(cert)) => {
                if self.certificate.is_none() {
                    self.certificate = Some(cert);
                }
            }
            Ok(None) => {}
            Err(e) => {
                if self.audit.is_none() {
                    self.audit = Some(e);
                }
            }
        }
    }

    /// All instances are done: aggregate levels, combine, round, attest.
    fn finalize_output(&mut self) {
        let cfg = self.geo.cfg.clone();
        let mut values = Vec::new();
        let mut weights = Vec::new();
        let mut fallbacks = Vec::new();
        for level in 0..=self.geo.params.l_max {
            let (k_min, k_max) = self.geo.k_range(level);
            let outputs: Vec<(i64, FixedValue)> = (k_min..=k_max)
                .map(|k| {
                    let idx = self.geo.index_of(CheckpointId { level, k });
                    (k, self.instances[idx].output().expect("instance finished"))
                })
                .collect();
            match aggregate_level(&outputs, level, &cfg) {
                Some((v, w)) => {
                    values.push(v);
                    weights.push(w);
                    fallbacks.push(false);
                }
                None => {
                    values.push(self.input.to_rational());
                    weights.push(self.geo.params.eps_prime.clone());
                    fallbacks.push(true);
                }
            }
        }
        let (o, cross) = cross_level(&values, &weights);
        let grid_value = round_to_grid(&o, &cfg.epsilon);
        let tag = attest_tag(self.id, &grid_value, self.run_context);
        self.attest_outbox.push((grid_value, tag));
        self.ingest_attest(self.id, grid_value, tag);
        let levels = (0..values.len())
            .map(|l| LevelAggregate {
                level: l as u32,
                value: values[l].clone(),
                weight: weights[l].clone(),
                cross_weight: cross[l].clone(),
                fallback: fallbacks[l],
            })
            .collect();
        self.output = Some(NodeOutput {
            value: o,
            grid_value,
            levels,
        });
    }

    /// Drains staged traffic into one encoded batch for broadcast. Returns
    /// the bytes and the number of logical messages inside.
    pub fn flush(&mut self) -> Option<(Vec<u8>, u64)> {
        if self.outbox.is_empty() && self.attest_outbox.is_empty() {
            return None;
        }
        let logical = (self.outbox.len() + self.attest_outbox.len()) as u64;
        let batch = self
            .encoder
            .pack(self.id, &self.outbox, &self.attest_outbox)
            .expect("own traffic fits the wire");
        self.outbox.clear();
        self.attest_outbox.clear();
        let bytes = encode_batch(&batch).expect("own traffic fits the wire");
        self.stats.logical_sent += logical;
        Some((bytes, logical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::bigint::BigInt;
    use num::One;
    use std::collections::VecDeque;

    fn fv(s: &str) -> FixedValue {
        FixedValue::parse_decimal(s).unwrap()
    }

    fn rat(n: i64, d: i64) -> Rational {
        Rational::new(BigInt::from(n), BigInt::from(d))
    }

    fn small_cfg() -> ProtocolConfig {
        ProtocolConfig {
            n: 4,
            t: 1,
            s_bound: FixedValue::from_int(0),
            e_bound: FixedValue::from_int(32),
            rho0: FixedValue::from_int(2),
            delta_max: FixedValue::from_int(16),
            epsilon: FixedValue::from_int(2),
        }
    }

    /// Instant-delivery loopback: every flush is broadcast before the next
    /// batch is handled.
    fn pump(nodes: &mut [DelphiNode]) {
        let n = nodes.len();
        let mut queue: VecDeque<(usize, Vec<u8>)> = VecDeque::new();
        for i in 0..n {
            if let Some((bytes, _)) = nodes[i].flush() {
                queue.push_back((i, bytes));
            }
        }
        let mut steps = 0u64;
        while let Some((from, bytes)) = queue.pop_front() {
            steps += 1;
            assert!(steps < 2_000_000, "loopback pump did not quiesce");
            for to in 0..n {
                if to == from {
                    continue;
                }
                nodes[to].handle_batch(from as u16, &bytes);
                if let Some((b, _)) = nodes[to].flush() {
                    queue.push_back((to, b));
                }
            }
        }
    }

    fn build(cfg: &ProtocolConfig, inputs: &[&str], mode: EncodeMode) -> Vec<DelphiNode> {
        let geo = Geometry::new(cfg.clone()).unwrap();
        inputs
            .iter()
            .enumerate()
            .map(|(i, s)| DelphiNode::new(i as u16, &geo, fv(s), mode, 42).unwrap())
            .collect()
    }

    #[test]
    fn level_aggregation_matches_hand_computation() {
        let cfg = small_cfg();
        // checkpoints 5 and 6 at level 0 sit at grid values 10 and 12
        let outputs = vec![(5i64, fv("0.25")), (6, fv("1"))];
        let (v, w) = aggregate_level(&outputs, 0, &cfg).unwrap();
        assert_eq!(v, rat(58, 5)); // (10/4 + 12) / (5/4)
        assert_eq!(w, rat(1, 1));
        // all-zero level has no aggregate
        assert!(aggregate_level(&[(5, fv("0")), (6, fv("0"))], 0, &cfg).is_none());
    }

    #[test]
    fn cross_level_matches_hand_computation() {
        let values = vec![rat(10, 1), rat(11, 1), rat(12, 1)];
        let weights = vec![rat(0, 1), rat(1, 2), rat(1, 1)];
        // w' = [0, 1/4, 1/2]; o = (11/4 + 12/2) / (3/4) = 35/3
        let (o, cross) = cross_level(&values, &weights);
        assert_eq!(cross, vec![rat(0, 1), rat(1, 4), rat(1, 2)]);
        assert_eq!(o, rat(35, 3));
    }

    #[test]
    fn cross_level_saturated_ladder_keeps_finest_level() {
        // all confidences 1: only level 0 carries weight
        let values = vec![rat(13, 1), rat(14, 1), rat(15, 1), rat(20, 1)];
        let weights = vec![Rational::one(); 4];
        let (o, cross) = cross_level(&values, &weights);
        assert_eq!(o, rat(13, 1));
        assert_eq!(cross[0], Rational::one());
        assert!(cross[1..].iter().all(|c| c.is_zero()));
    }

    #[test]
    fn geometry_indexes_every_checkpoint() {
        let geo = Geometry::new(small_cfg()).unwrap();
        // levels 0..=3 with separators 2, 4, 8, 16 over [0, 32]
        assert_eq!(geo.params.l_max, 3);
        assert_eq!(geo.instance_count(), 17 + 9 + 5 + 3);
        let mut seen = vec![false; geo.instance_count()];
        for c in geo.checkpoints() {
            let idx = geo.index_of(c);
            assert!(!seen[idx]);
            seen[idx] = true;
        }
        assert!(seen.iter().all(|x| *x));
    }

    #[test]
    fn unanimous_inputs_converge_exactly() {
        let cfg = small_cfg();
        let mut nodes = build(&cfg, &["12", "12", "12", "12"], EncodeMode::Optimized);
        pump(&mut nodes);
        for node in &nodes {
            let out = node.output().expect("node finished");
            // both bracketing checkpoints (12 and 14) carry weight 1, so
            // every level settles at 13 and level 0 takes all the weight
            assert_eq!(out.value, rat(13, 1));
            assert_eq!(out.grid_value, fv("14")); // half rounds up
            assert!(out.levels.iter().all(|l| !l.fallback));
        }
    }

    #[test]
    fn clustered_inputs_agree_within_epsilon() {
        let cfg = small_cfg();
        let inputs = ["10", "11", "11.5", "12"];
        for mode in [EncodeMode::Plain, EncodeMode::Optimized] {
            let mut nodes = build(&cfg, &inputs, mode);
            pump(&mut nodes);
            let outs: Vec<Rational> = nodes
                .iter()
                .map(|x| x.output().expect("finished").value.clone())
                .collect();
            let eps = cfg.epsilon.to_rational();
            for i in 0..outs.len() {
                for j in 0..outs.len() {
                    assert!(
                        (&outs[i] - &outs[j]).abs() < eps,
                        "outputs {} and {} too far apart",
                        outs[i],
                        outs[j]
                    );
                }
            }
            // validity: inputs span [10, 12], spread 2 = rho0
            let lo = rat(8, 1);
            let hi = rat(14, 1);
            for o in &outs {
                assert!(*o >= lo && *o <= hi, "output {o} outside validity band");
            }
            // half the total confidence survives cross-level combination
            for node in &nodes {
                let total: Rational = node
                    .output()
                    .unwrap()
                    .levels
                    .iter()
                    .map(|l| l.cross_weight.clone())
                    .sum();
                assert!(total >= rat(1, 2), "total cross weight {total} below 1/2");
            }
        }
    }

    #[test]
    fn per_level_weights_close_across_nodes() {
        let cfg = small_cfg();
        let mut nodes = build(&cfg, &["10", "11", "11.5", "12"], EncodeMode::Optimized);
        pump(&mut nodes);
        let geo = Geometry::new(cfg).unwrap();
        let bound = &geo.params.eps_prime * rat(5, 1);
        for l in 0..=geo.params.l_max as usize {
            for a in 0..nodes.len() {
                for b in 0..nodes.len() {
                    let wa = &nodes[a].output().unwrap().levels[l].cross_weight;
                    let wb = &nodes[b].output().unwrap().levels[l].cross_weight;
                    assert!(
                        (wa - wb).abs() <= bound,
                        "level {l} weights {wa} vs {wb} differ beyond 5*eps'"
                    );
                }
            }
        }
    }

    #[test]
    fn certificates_form_from_attestations() {
        let cfg = small_cfg();
        let mut nodes = build(&cfg, &["12", "12", "12", "12"], EncodeMode::Optimized);
        pump(&mut nodes);
        for node in &nodes {
            let cert = node.certificate().expect("certificate formed");
            assert_eq!(cert.value, fv("14"));
            assert!(cert.attestors.len() as u32 == cfg.t as u32 + 1);
            assert!(node.audit_error().is_none());
        }
    }

    #[test]
    fn silent_node_does_not_block_honest_majority() {
        let cfg = small_cfg();
        let mut nodes = build(&cfg, &["10", "10", "12", "12"], EncodeMode::Optimized);
        // node 3 is mute: discard its staged traffic and never flush it
        let n = nodes.len();
        let mut queue: VecDeque<(usize, Vec<u8>)> = VecDeque::new();
        for i in 0..n - 1 {
            if let Some((bytes, _)) = nodes[i].flush() {
                queue.push_back((i, bytes));
            }
        }
        while let Some((from, bytes)) = queue.pop_front() {
            for to in 0..n - 1 {
                if to == from {
                    continue;
                }
                nodes[to].handle_batch(from as u16, &bytes);
                if let Some((b, _)) = nodes[to].flush() {
                    queue.push_back((to, b));
                }
            }
        }
        let eps = cfg.epsilon.to_rational();
        let outs: Vec<Rational> = nodes[..3]
            .iter()
            .map(|x| x.output().expect("honest node finished").value.clone())
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                assert!((&outs[i] - &outs[j]).abs() < eps);
            }
        }
        // certificates still form: t + 1 = 2 honest attestors suffice
        assert!(nodes[..3].iter().all(|x| x.certificate().is_some()));
    }

    #[test]
    fn plain_and_optimized_modes_agree_exactly() {
        let cfg = small_cfg();
        let inputs = ["10", "11", "11.5", "12"];
        let mut plain = build(&cfg, &inputs, EncodeMode::Plain);
        let mut opt = build(&cfg, &inputs, EncodeMode::Optimized);
        pump(&mut plain);
        pump(&mut opt);
        for (a, b) in plain.iter().zip(&opt) {
            assert_eq!(a.output().unwrap().value, b.output().unwrap().value);
            assert_eq!(a.output().unwrap().grid_value, b.output().unwrap().grid_value);
        }
    }

    #[test]
    fn lying_sender_field_is_malformed() {
        let cfg = small_cfg();
        let geo = Geometry::new(cfg).unwrap();
        let mut a = DelphiNode::new(0, &geo, fv("12"), EncodeMode::Plain, 1).unwrap();
        let mut b = DelphiNode::new(1, &geo, fv("12"), EncodeMode::Plain, 1).unwrap();
        let (bytes, _) = a.flush().unwrap();
        // delivered as if from node 2
        b.handle_batch(2, &bytes);
        assert_eq!(b.stats().malformed_batches, 1);
    }
}
