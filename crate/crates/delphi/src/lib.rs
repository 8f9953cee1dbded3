//! Asynchronous, signature-free approximate agreement on checkpoint grids,
//! with a deterministic simulation harness.
//!
//! Distributed oracle nodes start from numeric readings that may disagree by
//! a bounded amount, and must converge to outputs within a target distance
//! `epsilon` of each other despite up to `t < n/3` Byzantine peers, without
//! signatures, on a fully asynchronous network. The approach here projects
//! each reading onto a ladder of checkpoint grids (separator doubling per
//! level), runs a binary approximate-agreement instance per checkpoint, and
//! recombines the per-level aggregates with weights that favor the finest
//! level on which the honest inputs look clustered.
//!
//! # Crate layout
//!
//! - [`core`]: exact dyadic fixed-point numbers, configuration, derived
//!   parameters, and checkpoint geometry.
//! - [`binaa`]: the binary approximate-agreement instance (echo
//!   amplification, quorum rounds, midpoint updates).
//! - [`delphi`]: the multi-grid protocol node that drives one instance per
//!   checkpoint and aggregates the results.
//! - [`encoding`]: wire format, including the delta encoding that replaces
//!   repeated values with 1-byte movement symbols, and run-length batching.
//! - [`finalize`]: grid rounding, attestation tags, and output certificates.
//! - [`simnet`]: deterministic discrete-event network simulator with
//!   adversarial schedulers and Byzantine behavior presets.
//! - [`baseline`]: a witness-based approximate-agreement protocol built on
//!   reliable broadcast, used as a cost and robustness comparison point.
//! - [`params`]: parameter planning from latency tail models, and message
//!   complexity estimates.
//! - [`report`]: run reports (JSON and CSV) shared by the library examples
//!   and the `delphi` binary.
//!
//! # Running examples
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --example single_run
//! cargo run --example byzantine_matrix
//! cargo run --example encoding_comparison
//! cargo run --example baseline_comparison
//! cargo run --example parameter_planning
//! cargo run --example certificates
//! ```
//!
//! The thin `delphi` binary wraps the same entry points behind `run`,
//! `sweep`, `check`, and `params` subcommands for scripted use.

// Quorum thresholds are spelled `t + 1` / `3t + 1` throughout; node ids
// double as vector indices in the simulator and its tests.
#![allow(clippy::int_plus_one)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::type_complexity)]

pub mod baseline;
pub mod binaa;
pub mod cli;
pub mod core;
pub mod delphi;
pub mod encoding;
pub mod finalize;
pub mod params;
pub mod report;
pub mod simnet;

pub use crate::core::{
    derive_params, CheckpointId, CoreError, DerivedParams, FixedValue, ProtocolConfig, Rational,
};
pub use crate::delphi::{DelphiNode, NodeOutput};
pub use crate::report::{RunReport, RunSummary, SummaryAccum, CSV_HEADER};
pub use crate::simnet::{
    run_protocol, BehaviorKind, BehaviorPreset, RunResult, SchedulerKind, SimConfig, Simulation,
};
