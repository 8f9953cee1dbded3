//! Per-run reports: an exact JSON document plus one flat CSV row per run,
//! and cross-run aggregation for experiment summaries.
//!
//! JSON carries exact values (dyadic decimals for grid quantities, `p/q`
//! strings for general rationals). CSV cells hold 12-significant-digit
//! approximations so rows stay flat and plottable; both renderings are
//! deterministic, so byte-identical reports certify byte-identical runs.

use std::collections::BTreeMap;

use num::Zero;
use serde::Serialize;

use crate::baseline::{BaselineConfig, BaselineResult};
use crate::core::{decimal12, ratio_string, Rational};
use crate::simnet::{RunResult, SimConfig};

/// Column order is part of the public interface; downstream tooling indexes
/// into it by position.
pub const CSV_HEADER: &str = "n,t,rho0,delta_max,epsilon,seed,scheduler,behavior,\
rounds_used,messages_sent,bytes_sent,agreement_distance,validity_relaxation,equivocations";

/// One honest node's output in both exact forms.
#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    /// Pre-rounding output as an exact `p/q` string.
    pub exact: String,
    /// The same output rounded to the epsilon grid, as an exact decimal.
    pub rounded: String,
}

/// A checkpoint certificate as one node saw it form.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateEntry {
    /// Certified grid value, exact decimal.
    pub value: String,
    /// Nodes whose attestations formed the quorum.
    pub attestors: Vec<u16>,
}

/// Everything one run produced, ready for serialization.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    /// `delphi` or `witness`.
    pub protocol: String,
    pub n: u16,
    pub t: u16,
    /// Exact decimal strings; these round-trip through config files.
    pub rho0: String,
    pub delta_max: String,
    pub epsilon: String,
    pub seed: u64,
    pub scheduler: String,
    pub behavior: String,
    pub rounds_used: u32,
    pub messages_sent: u64,
    pub bytes_sent: u64,
    /// Largest pairwise distance between honest outputs, exact `p/q`.
    pub agreement_distance: String,
    /// 12-digit reading of the same value for humans and plots.
    pub agreement_distance_approx: String,
    /// Worst excursion of any honest output outside the honest input hull,
    /// exact `p/q`; `0/1` when all outputs stayed inside.
    pub validity_relaxation: String,
    pub validity_relaxation_approx: String,
    /// Per-sender cap violations observed by honest nodes, summed.
    pub equivocations: u64,
    /// Honest node id -> output.
    pub outputs: BTreeMap<u16, OutputEntry>,
    /// Honest node id -> level -> final (cross-damped) weight, exact `p/q`.
    pub per_level_weights: BTreeMap<u16, BTreeMap<u32, String>>,
    /// Honest node id -> first certificate that node assembled.
    pub certificates: BTreeMap<u16, CertificateEntry>,
    /// Exact metrics retained for aggregation; never serialized.
    #[serde(skip)]
    exact: ExactMetrics,
}

#[derive(Debug, Clone)]
struct ExactMetrics {
    agreement: Rational,
    relaxation: Rational,
}

impl RunReport {
    /// Builds a report from a completed multi-grid run. `behavior` is the
    /// run-level adversary label for the CSV row.
    pub fn from_run(cfg: &SimConfig, behavior: &str, result: &RunResult) -> Self {
        let mut outputs = BTreeMap::new();
        let mut per_level_weights = BTreeMap::new();
        for id in &result.honest {
            if let Some(out) = &result.outputs[*id as usize] {
                outputs.insert(
                    *id,
                    OutputEntry {
                        exact: ratio_string(&out.value),
                        rounded: out.grid_value.to_decimal_string(),
                    },
                );
                per_level_weights.insert(
                    *id,
                    out.levels
                        .iter()
                        .map(|l| (l.level, ratio_string(&l.cross_weight)))
                        .collect(),
                );
            }
        }
        let mut certificates = BTreeMap::new();
        for (id, cert) in result.certificates.iter().enumerate() {
            if let Some(c) = cert {
                certificates.insert(
                    id as u16,
                    CertificateEntry {
                        value: c.value.to_decimal_string(),
                        attestors: c.attestors.clone(),
                    },
                );
            }
        }
        let agreement = result.agreement_distance().unwrap_or_else(Rational::zero);
        let relaxation = result
            .validity_relaxation(&cfg.inputs)
            .unwrap_or_else(Rational::zero);
        RunReport {
            protocol: "delphi".into(),
            n: cfg.protocol.n,
            t: cfg.protocol.t,
            rho0: cfg.protocol.rho0.to_decimal_string(),
            delta_max: cfg.protocol.delta_max.to_decimal_string(),
            epsilon: cfg.protocol.epsilon.to_decimal_string(),
            seed: cfg.seed,
            scheduler: cfg.scheduler.name().into(),
            behavior: behavior.into(),
            rounds_used: result.rounds_used,
            messages_sent: result.net.messages_sent,
            bytes_sent: result.net.bytes_sent,
            agreement_distance: ratio_string(&agreement),
            agreement_distance_approx: decimal12(&agreement),
            validity_relaxation: ratio_string(&relaxation),
            validity_relaxation_approx: decimal12(&relaxation),
            equivocations: result.total_equivocations(),
            outputs,
            per_level_weights,
            certificates,
            exact: ExactMetrics {
                agreement,
                relaxation,
            },
        }
    }

    /// Builds a report from a witness-baseline run. Shares the schema so
    /// both protocols produce comparable rows; fields the baseline does not
    /// have (level weights, certificates) stay empty.
    pub fn from_baseline(cfg: &BaselineConfig, behavior: &str, result: &BaselineResult) -> Self {
        let mut outputs = BTreeMap::new();
        for id in &result.honest {
            if let Some(v) = &result.outputs[*id as usize] {
                outputs.insert(
                    *id,
                    OutputEntry {
                        exact: ratio_string(&v.to_rational()),
                        rounded: v.to_decimal_string(),
                    },
                );
            }
        }
        let agreement = result.agreement_distance().unwrap_or_else(Rational::zero);
        let relaxation = baseline_relaxation(cfg, result);
        RunReport {
            protocol: "witness".into(),
            n: cfg.protocol.n,
            t: cfg.protocol.t,
            rho0: cfg.protocol.rho0.to_decimal_string(),
            delta_max: cfg.protocol.delta_max.to_decimal_string(),
            epsilon: cfg.protocol.epsilon.to_decimal_string(),
            seed: cfg.seed,
            scheduler: cfg.scheduler.name().into(),
            behavior: behavior.into(),
            rounds_used: result.rounds_used as u32,
            messages_sent: result.net.messages_sent,
            bytes_sent: result.net.bytes_sent,
            agreement_distance: ratio_string(&agreement),
            agreement_distance_approx: decimal12(&agreement),
            validity_relaxation: ratio_string(&relaxation),
            validity_relaxation_approx: decimal12(&relaxation),
            equivocations: 0,
            outputs,
            per_level_weights: BTreeMap::new(),
            certificates: BTreeMap::new(),
            exact: ExactMetrics {
                agreement,
                relaxation,
            },
        }
    }

    /// Pretty JSON document, trailing newline included.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One CSV row in [`CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.t,
            self.rho0,
            self.delta_max,
            self.epsilon,
            self.seed,
            self.scheduler,
            self.behavior,
            self.rounds_used,
            self.messages_sent,
            self.bytes_sent,
            decimal12(&self.exact.agreement),
            decimal12(&self.exact.relaxation),
            self.equivocations
        )
    }

    /// Exact agreement distance (aggregation and assertions).
    pub fn agreement(&self) -> &Rational {
        &self.exact.agreement
    }

    /// Exact validity relaxation (aggregation and assertions).
    pub fn relaxation(&self) -> &Rational {
        &self.exact.relaxation
    }
}

/// Worst excursion of baseline outputs outside the honest input hull.
fn baseline_relaxation(cfg: &BaselineConfig, result: &BaselineResult) -> Rational {
    let hull: Vec<Rational> = result
        .honest
        .iter()
        .map(|i| cfg.inputs[*i as usize].to_rational())
        .collect();
    let (Some(lo), Some(hi)) = (hull.iter().min(), hull.iter().max()) else {
        return Rational::zero();
    };
    let mut worst = Rational::zero();
    for id in &result.honest {
        if let Some(v) = &result.outputs[*id as usize] {
            let v = v.to_rational();
            if v < *lo {
                worst = worst.max(lo - &v);
            }
            if v > *hi {
                worst = worst.max(&v - hi);
            }
        }
    }
    worst
}

/// Aggregate over an experiment's reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub runs: u64,
    pub mean_agreement_distance: String,
    pub max_agreement_distance: String,
    pub mean_validity_relaxation: String,
    pub max_validity_relaxation: String,
    pub mean_bytes_sent: String,
    pub max_bytes_sent: u64,
}

/// Streaming accumulator for [`RunSummary`]; exact until the final render.
#[derive(Debug, Clone)]
pub struct SummaryAccum {
    runs: u64,
    sum_agreement: Rational,
    max_agreement: Rational,
    sum_relaxation: Rational,
    max_relaxation: Rational,
    sum_bytes: u64,
    max_bytes: u64,
}

impl Default for SummaryAccum {
    fn default() -> Self {
        SummaryAccum {
            runs: 0,
            sum_agreement: Rational::zero(),
            max_agreement: Rational::zero(),
            sum_relaxation: Rational::zero(),
            max_relaxation: Rational::zero(),
            sum_bytes: 0,
            max_bytes: 0,
        }
    }
}

impl SummaryAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, report: &RunReport) {
        self.runs += 1;
        self.sum_agreement += &report.exact.agreement;
        self.max_agreement = self.max_agreement.clone().max(report.exact.agreement.clone());
        self.sum_relaxation += &report.exact.relaxation;
        self.max_relaxation = self
            .max_relaxation
            .clone()
            .max(report.exact.relaxation.clone());
        self.sum_bytes += report.bytes_sent;
        self.max_bytes = self.max_bytes.max(report.bytes_sent);
    }

    /// `None` until at least one report was added.
    pub fn finish(&self) -> Option<RunSummary> {
        if self.runs == 0 {
            return None;
        }
        let n = Rational::from_integer(self.runs.into());
        Some(RunSummary {
            runs: self.runs,
            mean_agreement_distance: decimal12(&(&self.sum_agreement / &n)),
            max_agreement_distance: ratio_string(&self.max_agreement),
            mean_validity_relaxation: decimal12(&(&self.sum_relaxation / &n)),
            max_validity_relaxation: ratio_string(&self.max_relaxation),
            mean_bytes_sent: decimal12(&(Rational::from_integer(self.sum_bytes.into()) / &n)),
            max_bytes_sent: self.max_bytes,
        })
    }
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{FixedValue, ProtocolConfig};
    use crate::encoding::EncodeMode;
    use crate::simnet::{run_protocol, BehaviorPreset, SchedulerKind};

    fn fv(s: &str) -> FixedValue {
        FixedValue::parse_decimal(s).unwrap()
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

    fn sample_sim(seed: u64) -> SimConfig {
        let cfg = small_cfg();
        SimConfig::new(
            cfg.clone(),
            ["10", "11", "11.5", "12"].iter().map(|s| fv(s)).collect(),
            BehaviorPreset::Silent.expand(cfg.n, cfg.t),
            SchedulerKind::UniformRandom { max_delay: 12 },
            EncodeMode::Optimized,
            seed,
        )
    }

    fn sample_report(seed: u64) -> RunReport {
        let sim = sample_sim(seed);
        let result = run_protocol(&sim).unwrap();
        RunReport::from_run(&sim, "silent", &result)
    }

    #[test]
    fn csv_row_matches_pinned_header() {
        let report = sample_report(3);
        let header_cols: Vec<&str> = CSV_HEADER.split(',').collect();
        let row = report.csv_row();
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(header_cols.len(), 14);
        assert_eq!(cells.len(), header_cols.len());
        assert_eq!(header_cols[0], "n");
        assert_eq!(header_cols[13], "equivocations");
        assert_eq!(cells[0], "4");
        assert_eq!(cells[1], "1");
        assert_eq!(cells[2], "2");
        assert_eq!(cells[5], "3");
        assert_eq!(cells[6], "uniform_random");
        assert_eq!(cells[7], "silent");
    }

    #[test]
    fn json_document_carries_exact_outputs() {
        let report = sample_report(5);
        let doc: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(doc["protocol"], "delphi");
        assert_eq!(doc["n"], 4);
        let outputs = doc["outputs"].as_object().unwrap();
        assert_eq!(outputs.len(), 3, "one report entry per honest node");
        for (_, entry) in outputs {
            let exact = entry["exact"].as_str().unwrap();
            assert!(exact.contains('/') || exact.parse::<i64>().is_ok());
            entry["rounded"]
                .as_str()
                .unwrap()
                .parse::<f64>()
                .expect("grid outputs are plain decimals");
        }
        let weights = doc["per_level_weights"].as_object().unwrap();
        assert_eq!(weights.len(), 3);
        assert!(doc["certificates"].as_object().is_some());
    }

    #[test]
    fn same_run_same_bytes() {
        let a = sample_report(9);
        let b = sample_report(9);
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.csv_row(), b.csv_row());
        let c = sample_report(10);
        assert_ne!(a.to_json(), c.to_json(), "seed changes the document");
    }

    #[test]
    fn baseline_report_shares_the_row_schema() {
        let cfg = small_cfg();
        let bl = BaselineConfig {
            protocol: cfg.clone(),
            inputs: ["10", "11", "11.5", "12"].iter().map(|s| fv(s)).collect(),
            silent: 1,
            scheduler: SchedulerKind::UniformRandom { max_delay: 12 },
            seed: 4,
        };
        let result = crate::baseline::run_baseline(&bl).unwrap();
        let report = RunReport::from_baseline(&bl, "silent", &result);
        assert_eq!(report.protocol, "witness");
        assert_eq!(report.csv_row().split(',').count(), 14);
        let doc: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(doc["protocol"], "witness");
        assert!(doc["per_level_weights"].as_object().unwrap().is_empty());
        // Witness runs satisfy strict hull validity.
        assert!(report.relaxation().is_zero());
    }

    #[test]
    fn summary_aggregates_exactly() {
        let a = sample_report(1);
        let b = sample_report(2);
        let mut accum = SummaryAccum::new();
        assert!(accum.finish().is_none());
        accum.add(&a);
        accum.add(&b);
        let summary = accum.finish().unwrap();
        assert_eq!(summary.runs, 2);
        assert_eq!(summary.max_bytes_sent, a.bytes_sent.max(b.bytes_sent));
        let expected_mean = (a.agreement() + b.agreement()) / Rational::from_integer(2.into());
        assert_eq!(summary.mean_agreement_distance, decimal12(&expected_mean));
        let expected_max = a.agreement().clone().max(b.agreement().clone());
        assert_eq!(summary.max_agreement_distance, ratio_string(&expected_max));
    }
}
