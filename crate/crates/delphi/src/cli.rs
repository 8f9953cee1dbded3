//! Operator surface: experiment configs, the `run`/`sweep`/`check`/`params`
//! subcommands, and report emission.
//!
//! Config files are TOML with four sections. All grid quantities are exact
//! decimal strings so they survive the trip through the file unchanged:
//!
//! ```toml
//! [protocol]
//! n = 4
//! t = 1
//! s = "0"
//! e = "32"
//! rho0 = "2"
//! delta_max = "16"
//! epsilon = "2"
//!
//! [adversary]
//! behavior = "silent"            # honest|silent|equivocator|extreme|random_noise
//! count = 1                      # faulty nodes, default t (0 for honest)
//! scheduler = "uniform_random"   # uniform_random|targeted_delay|skew
//! max_delay = 20
//!
//! [inputs]
//! values = ["10", "11", "11.5", "12"]
//!
//! [experiment]
//! repetitions = 3
//! seed = 42
//! protocol = "delphi"            # delphi|witness
//! encoding = "optimized"         # plain|optimized
//! ```
//!
//! Every run's randomness (scheduler delays, samplers, noise machines)
//! derives from the experiment seed; repetition `i` uses `seed + i`.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Pareto};
use serde::Deserialize;
use thiserror::Error;

use crate::baseline::{run_baseline, BaselineConfig};
use crate::core::{FixedValue, ProtocolConfig, Rational};
use crate::encoding::EncodeMode;
use crate::params::{self, NoiseModel};
use crate::report::{RunReport, SummaryAccum, CSV_HEADER};
use crate::simnet::{run_protocol, BehaviorPreset, RunResult, SchedulerKind, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Sim(#[from] SimError),
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "delphi",
    version,
    about = "Approximate agreement experiments on checkpoint grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute an experiment and write per-run reports plus a summary.
    Run(RunArgs),
    /// Re-run an experiment while varying one field; emits a CSV matrix.
    Sweep(SweepArgs),
    /// Run the invariant suite over the experiment's runs; exit 0 iff all hold.
    Check(RunArgs),
    /// Plan a spread bound from a latency/noise tail model.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[experiment] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `[experiment] protocol` (delphi or witness).
    #[arg(long)]
    protocol: Option<String>,
    /// Which report files to write.
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Field to vary across runs.
    #[arg(long, value_enum)]
    vary: VaryField,
    /// Comma-separated values for the varied field.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
    fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VaryField {
    /// Node count; `t` follows as `floor((n-1)/3)`.
    N,
    /// Honest input spread; inputs are synthesized at the exact spread.
    Spread,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Tail family of the fitted spread model.
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long, default_value_t = 0.0)]
    location: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Tail exponent (frechet only).
    #[arg(long)]
    alpha: Option<f64>,
    /// Security levels in bits: the bound fails with probability 2^-lambda.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<u32>,
    /// Raw tail probabilities, an alternative to --lambda.
    #[arg(long, value_delimiter = ',')]
    tail: Vec<f64>,
    /// Finest separator; adds a column with the grid-legal spread bound.
    #[arg(long)]
    rho0: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Gumbel,
    Frechet,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSpec {
    protocol: ProtocolSection,
    #[serde(default)]
    adversary: AdversarySection,
    inputs: InputsSection,
    #[serde(default)]
    experiment: ExperimentSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolSection {
    n: u16,
    t: u16,
    s: String,
    e: String,
    rho0: String,
    delta_max: String,
    epsilon: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AdversarySection {
    behavior: Option<String>,
    count: Option<u16>,
    scheduler: Option<String>,
    max_delay: Option<u64>,
    factor: Option<u64>,
    target: Option<u16>,
    lag: Option<u64>,
    partition_size: Option<u16>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputsSection {
    values: Option<Vec<String>>,
    sampler: Option<SamplerSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplerSection {
    family: String,
    /// Normal / lognormal location (lognormal: mu of the underlying normal).
    mean: Option<f64>,
    /// Normal / lognormal width (lognormal: sigma of the underlying normal).
    std_dev: Option<f64>,
    /// Gamma / pareto shape.
    shape: Option<f64>,
    /// Gamma / pareto scale.
    scale: Option<f64>,
    /// Samples round to multiples of 2^-quantize_exp; default 10.
    quantize_exp: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentSection {
    repetitions: Option<u32>,
    seed: Option<u64>,
    protocol: Option<String>,
    encoding: Option<String>,
    r_max_override: Option<u32>,
}

/// A fully resolved experiment, ready to execute.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ProtocolConfig,
    pub preset: BehaviorPreset,
    pub faulty: u16,
    pub scheduler: SchedulerKind,
    pub source: InputSource,
    pub repetitions: u32,
    pub seed: u64,
    pub kind: ProtocolKind,
    pub mode: EncodeMode,
    pub r_max_override: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    Delphi,
    Witness,
}

#[derive(Debug, Clone)]
pub enum InputSource {
    Explicit(Vec<FixedValue>),
    Sampler(SamplerSpec),
}

#[derive(Debug, Clone)]
pub struct SamplerSpec {
    family: SamplerFamily,
    quantize_exp: u32,
}

#[derive(Debug, Clone)]
enum SamplerFamily {
    Normal(Normal<f64>),
    Gamma(Gamma<f64>),
    LogNormal(LogNormal<f64>),
    Pareto(Pareto<f64>),
}

fn parse_fixed(field: &str, s: &str) -> Result<FixedValue, CliError> {
    FixedValue::parse_decimal(s).map_err(|e| CliError::Config(format!("{field}: {e}")))
}

impl Experiment {
    /// Loads and validates a config file, applying command-line overrides.
    pub fn load(
        path: &std::path::Path,
        seed_override: Option<u64>,
        protocol_override: Option<&str>,
    ) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let spec: FileSpec =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("parse: {e}")))?;

        let p = &spec.protocol;
        let rho0 = parse_fixed("rho0", &p.rho0)?;
        let mut delta_max = parse_fixed("delta_max", &p.delta_max)?;
        if delta_max < rho0 {
            return cfg_err("delta_max must be at least rho0");
        }
        let grid_delta = next_grid_bound(&rho0, &delta_max);
        if grid_delta != delta_max {
            println!(
                "note: delta_max {} rounded up to the grid-legal {}",
                delta_max, grid_delta
            );
            delta_max = grid_delta;
        }
        let cfg = ProtocolConfig {
            n: p.n,
            t: p.t,
            s_bound: parse_fixed("s", &p.s)?,
            e_bound: parse_fixed("e", &p.e)?,
            rho0,
            delta_max,
            epsilon: parse_fixed("epsilon", &p.epsilon)?,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let a = &spec.adversary;
        let preset = match a.behavior.as_deref().unwrap_or("honest") {
            "honest" => BehaviorPreset::Honest,
            "silent" => BehaviorPreset::Silent,
            "equivocator" => BehaviorPreset::Equivocator,
            "extreme" => BehaviorPreset::Extreme,
            "random_noise" => BehaviorPreset::RandomNoise,
            other => return cfg_err(format!("unknown behavior `{other}`")),
        };
        let faulty = match preset {
            BehaviorPreset::Honest => 0,
            _ => a.count.unwrap_or(cfg.t),
        };
        if faulty > cfg.t {
            return cfg_err(format!(
                "adversary count {faulty} exceeds the fault budget t={}",
                cfg.t
            ));
        }
        let max_delay = a.max_delay.unwrap_or(20).max(1);
        let scheduler = match a.scheduler.as_deref().unwrap_or("uniform_random") {
            "uniform_random" => SchedulerKind::UniformRandom { max_delay },
            "targeted_delay" => {
                let target = a.target.unwrap_or(0);
                if target >= cfg.n {
                    return cfg_err(format!("target {target} out of range"));
                }
                SchedulerKind::targeted_into(target, cfg.n, a.factor.unwrap_or(8), max_delay)
            }
            "skew" => {
                let k = a.partition_size.unwrap_or(cfg.n / 2).min(cfg.n);
                SchedulerKind::skew_split(k, a.lag.unwrap_or(max_delay * 8), max_delay)
            }
            other => return cfg_err(format!("unknown scheduler `{other}`")),
        };

        let source = match (&spec.inputs.values, &spec.inputs.sampler) {
            (Some(_), Some(_)) => {
                return cfg_err("[inputs] takes either `values` or `sampler`, not both")
            }
            (None, None) => return cfg_err("[inputs] needs `values` or a `sampler`"),
            (Some(values), None) => {
                if values.len() != cfg.n as usize {
                    return cfg_err(format!(
                        "got {} input values for n={}",
                        values.len(),
                        cfg.n
                    ));
                }
                let mut parsed = Vec::with_capacity(values.len());
                for (i, v) in values.iter().enumerate() {
                    let v = parse_fixed(&format!("inputs[{i}]"), v)?;
                    if v < cfg.s_bound || v > cfg.e_bound {
                        return cfg_err(format!(
                            "input {v} outside [{}, {}]",
                            cfg.s_bound, cfg.e_bound
                        ));
                    }
                    parsed.push(v);
                }
                InputSource::Explicit(parsed)
            }
            (None, Some(s)) => InputSource::Sampler(SamplerSpec::build(s)?),
        };

        let e = &spec.experiment;
        let repetitions = e.repetitions.unwrap_or(1);
        if repetitions == 0 {
            return cfg_err("repetitions must be at least 1");
        }
        let kind = match protocol_override.or(e.protocol.as_deref()).unwrap_or("delphi") {
            "delphi" => ProtocolKind::Delphi,
            "witness" => ProtocolKind::Witness,
            other => return cfg_err(format!("unknown protocol `{other}`")),
        };
        if kind == ProtocolKind::Witness
            && !matches!(preset, BehaviorPreset::Honest | BehaviorPreset::Silent)
        {
            return cfg_err("the witness baseline models honest and silent adversaries only");
        }
        let mode = match e.encoding.as_deref().unwrap_or("optimized") {
            "plain" => EncodeMode::Plain,
            "optimized" => EncodeMode::Optimized,
            other => return cfg_err(format!("unknown encoding `{other}`")),
        };
        Ok(Experiment {
            cfg,
            preset,
            faulty,
            scheduler,
            source,
            repetitions,
            seed: seed_override.or(e.seed).unwrap_or(0),
            kind,
            mode,
            r_max_override: e.r_max_override,
        })
    }

    /// Inputs for one repetition plus how many samples hit the range clamp.
    pub fn inputs_for(&self, seed: u64) -> (Vec<FixedValue>, u32) {
        match &self.source {
            InputSource::Explicit(v) => (v.clone(), 0),
            InputSource::Sampler(s) => s.draw(
                self.cfg.n,
                &self.cfg.s_bound,
                &self.cfg.e_bound,
                seed,
            ),
        }
    }

    /// Runs one repetition and reports it.
    pub fn execute(&self, seed: u64) -> Result<(RunReport, u32), CliError> {
        let (report, clipped, _) = self.execute_logged(seed, false)?;
        Ok((report, clipped))
    }

    /// As [`execute`](Self::execute), optionally retaining the raw run for
    /// invariant checking.
    fn execute_logged(
        &self,
        seed: u64,
        round_log: bool,
    ) -> Result<(RunReport, u32, Option<CheckedRun>), CliError> {
        let (inputs, clipped) = self.inputs_for(seed);
        match self.kind {
            ProtocolKind::Delphi => {
                let mut sim = SimConfig::new(
                    self.cfg.clone(),
                    inputs,
                    self.preset.expand(self.cfg.n, self.faulty),
                    self.scheduler.clone(),
                    self.mode,
                    seed,
                );
                sim.r_max_override = self.r_max_override;
                sim.round_log = round_log;
                let result = run_protocol(&sim)?;
                let report = RunReport::from_run(&sim, self.preset.name(), &result);
                let raw = round_log.then(|| CheckedRun {
                    inputs: sim.inputs.clone(),
                    result,
                });
                Ok((report, clipped, raw))
            }
            ProtocolKind::Witness => {
                let bl = BaselineConfig {
                    protocol: self.cfg.clone(),
                    inputs,
                    silent: self.faulty,
                    scheduler: self.scheduler.clone(),
                    seed,
                };
                let result = run_baseline(&bl)?;
                let report = RunReport::from_baseline(&bl, self.preset.name(), &result);
                Ok((report, clipped, None))
            }
        }
    }
}

/// Raw material cmd_check inspects beyond the report.
struct CheckedRun {
    inputs: Vec<FixedValue>,
    result: RunResult,
}

impl SamplerSpec {
    fn build(s: &SamplerSection) -> Result<Self, CliError> {
        let need = |x: Option<f64>, what: &str| {
            x.ok_or_else(|| CliError::Config(format!("sampler needs `{what}`")))
        };
        let family = match s.family.as_str() {
            "normal" => SamplerFamily::Normal(
                Normal::new(need(s.mean, "mean")?, need(s.std_dev, "std_dev")?)
                    .map_err(|e| CliError::Config(format!("normal: {e}")))?,
            ),
            "gamma" => SamplerFamily::Gamma(
                Gamma::new(need(s.shape, "shape")?, need(s.scale, "scale")?)
                    .map_err(|e| CliError::Config(format!("gamma: {e}")))?,
            ),
            "lognormal" => SamplerFamily::LogNormal(
                LogNormal::new(need(s.mean, "mean")?, need(s.std_dev, "std_dev")?)
                    .map_err(|e| CliError::Config(format!("lognormal: {e}")))?,
            ),
            "pareto" => SamplerFamily::Pareto(
                Pareto::new(need(s.scale, "scale")?, need(s.shape, "shape")?)
                    .map_err(|e| CliError::Config(format!("pareto: {e}")))?,
            ),
            other => return cfg_err(format!("unknown sampler `{other}`")),
        };
        let quantize_exp = s.quantize_exp.unwrap_or(10);
        if quantize_exp > 40 {
            return cfg_err("quantize_exp must be at most 40");
        }
        Ok(SamplerSpec {
            family,
            quantize_exp,
        })
    }

    /// Draws `n` values on the 2^-quantize_exp grid, clamped to `[lo, hi]`.
    /// The stream is keyed off the run seed but distinct from the scheduler
    /// and noise streams.
    fn draw(&self, n: u16, lo: &FixedValue, hi: &FixedValue, seed: u64) -> (Vec<FixedValue>, u32) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x494e_5055_5453);
        let mut clipped = 0;
        let out = (0..n)
            .map(|_| {
                let x: f64 = match &self.family {
                    SamplerFamily::Normal(d) => d.sample(&mut rng),
                    SamplerFamily::Gamma(d) => d.sample(&mut rng),
                    SamplerFamily::LogNormal(d) => d.sample(&mut rng),
                    SamplerFamily::Pareto(d) => d.sample(&mut rng),
                };
                // Saturating casts turn the occasional infinity into a clamp.
                let numer = (x * (1u64 << self.quantize_exp) as f64).round() as i128;
                let v = FixedValue::new(numer, self.quantize_exp);
                if v < *lo {
                    clipped += 1;
                    *lo
                } else if v > *hi {
                    clipped += 1;
                    *hi
                } else {
                    v
                }
            })
            .collect();
        (out, clipped)
    }
}

/// Smallest `rho0 * 2^k >= spread` with `k >= 0`: the provable validity
/// slack for arbitrary honest inputs, and the grid-legal ceiling of a spread.
fn next_grid_bound(rho0: &FixedValue, spread: &FixedValue) -> FixedValue {
    let mut b = *rho0;
    while b < *spread {
        b = b.mul_pow2(1);
    }
    b
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: &RunArgs) -> Result<i32, CliError> {
    let exp = Experiment::load(&args.config, args.seed, args.protocol.as_deref())?;
    fs::create_dir_all(&args.out)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut accum = SummaryAccum::new();
    let mut clipped_total = 0u64;
    for rep in 0..exp.repetitions {
        let seed = exp.seed + rep as u64;
        let (report, clipped) = exp.execute(seed)?;
        clipped_total += clipped as u64;
        if args.format.json() {
            fs::write(args.out.join(format!("run_{seed}.json")), report.to_json())?;
        }
        csv.push_str(&report.csv_row());
        csv.push('\n');
        accum.add(&report);
    }
    if args.format.csv() {
        fs::write(args.out.join("runs.csv"), &csv)?;
    }
    let summary = accum.finish().expect("at least one repetition ran");
    let mut doc = serde_json::to_value(&summary).expect("summary serializes");
    doc["clipped_inputs"] = clipped_total.into();
    let mut text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    text.push('\n');
    fs::write(args.out.join("summary.json"), text)?;
    println!(
        "{} run(s): mean agreement {}, max bytes {}, {} clipped input(s); reports in {}",
        summary.runs,
        summary.mean_agreement_distance,
        summary.max_bytes_sent,
        clipped_total,
        args.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(args: &SweepArgs) -> Result<i32, CliError> {
    if args.values.is_empty() {
        return cfg_err("sweep needs at least one value in --values");
    }
    let base = Experiment::load(&args.base.config, args.base.seed, args.base.protocol.as_deref())?;
    fs::create_dir_all(&args.base.out)?;
    let mut csv = format!("vary,value,{CSV_HEADER}\n");
    for (vi, raw) in args.values.iter().enumerate() {
        let (label, exp) = match args.vary {
            VaryField::N => {
                let n: u16 = raw
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad n value `{raw}`")))?;
                (format!("n,{n}"), vary_n(&base, n)?)
            }
            VaryField::Spread => {
                let spread = parse_fixed("spread", raw.trim())?;
                (
                    format!("spread,{}", spread.to_decimal_string()),
                    vary_spread(&base, &spread)?,
                )
            }
        };
        let mut accum = SummaryAccum::new();
        for rep in 0..exp.repetitions {
            // Repetition seeds restart per value so columns are comparable.
            let seed = exp.seed + rep as u64;
            let (report, _) = exp.execute(seed)?;
            let _ = writeln!(csv, "{label},{}", report.csv_row());
            accum.add(&report);
        }
        let summary = accum.finish().expect("at least one repetition ran");
        println!(
            "{} [{}/{}]: mean agreement {}, mean bytes {}",
            label.replace(',', "="),
            vi + 1,
            args.values.len(),
            summary.mean_agreement_distance,
            summary.mean_bytes_sent,
        );
    }
    let path = args.base.out.join("sweep.csv");
    fs::write(&path, &csv)?;
    println!("matrix in {}", path.display());
    Ok(0)
}

fn vary_n(base: &Experiment, n: u16) -> Result<Experiment, CliError> {
    if matches!(base.source, InputSource::Explicit(_)) {
        return cfg_err("an n sweep needs a sampler input source");
    }
    let mut exp = base.clone();
    exp.cfg.n = n;
    exp.cfg.t = (n.saturating_sub(1)) / 3;
    exp.faulty = exp.faulty.min(exp.cfg.t);
    // Schedulers embed node ids; rebuild for the new population.
    exp.scheduler = match &base.scheduler {
        SchedulerKind::UniformRandom { max_delay } => SchedulerKind::UniformRandom {
            max_delay: *max_delay,
        },
        SchedulerKind::TargetedDelay {
            max_delay, factor, ..
        } => SchedulerKind::targeted_into(0, n, *factor, *max_delay),
        SchedulerKind::Skew { max_delay, lag, .. } => {
            SchedulerKind::skew_split(n / 2, *lag, *max_delay)
        }
    };
    exp.cfg
        .validate()
        .map_err(|e| CliError::Config(format!("n={n}: {e}")))?;
    Ok(exp)
}

fn vary_spread(base: &Experiment, spread: &FixedValue) -> Result<Experiment, CliError> {
    let cfg = &base.cfg;
    if *spread > cfg.delta_max {
        return cfg_err(format!(
            "spread {spread} exceeds delta_max {}",
            cfg.delta_max
        ));
    }
    if *spread > cfg.e_bound.sub(&cfg.s_bound) {
        return cfg_err(format!("spread {spread} exceeds the input range"));
    }
    let center = cfg.s_bound.avg(&cfg.e_bound);
    let lo = center.sub(&spread.mul_pow2(-1));
    let hi = center.add(&spread.mul_pow2(-1));
    let mut exp = base.clone();
    // Alternating extremes pin the honest spread to exactly `spread`
    // regardless of which suffix of nodes the adversary controls.
    exp.source = InputSource::Explicit(
        (0..cfg.n)
            .map(|i| if i % 2 == 0 { lo } else { hi })
            .collect(),
    );
    Ok(exp)
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

struct PropertyLog {
    name: &'static str,
    failures: Vec<String>,
    runs: u32,
}

impl PropertyLog {
    fn new(name: &'static str) -> Self {
        PropertyLog {
            name,
            failures: Vec::new(),
            runs: 0,
        }
    }

    fn check(&mut self, seed: u64, ok: bool, detail: impl FnOnce() -> String) {
        self.runs += 1;
        if !ok {
            self.failures.push(format!("seed {seed}: {}", detail()));
        }
    }
}

fn cmd_check(args: &RunArgs) -> Result<i32, CliError> {
    let exp = Experiment::load(&args.config, args.seed, args.protocol.as_deref())?;
    let mut props = vec![
        PropertyLog::new("termination"),
        PropertyLog::new("epsilon_agreement"),
        PropertyLog::new("relaxed_validity"),
        PropertyLog::new("input_spread_within_delta"),
        PropertyLog::new("round_halving"),
        PropertyLog::new("weak_broadcast_intersection"),
        PropertyLog::new("weight_mass"),
        PropertyLog::new("certificate_quorum"),
        PropertyLog::new("grid_adjacency"),
        PropertyLog::new("replay_determinism"),
    ];
    for rep in 0..exp.repetitions {
        let seed = exp.seed + rep as u64;
        match exp.kind {
            ProtocolKind::Delphi => {
                let (report, _, raw) = exp.execute_logged(seed, true)?;
                let raw = raw.expect("delphi checks retain the run");
                check_delphi_run(&exp, seed, &report, &raw, &mut props);
                if rep == 0 {
                    let (replay, _, _) = exp.execute_logged(seed, true)?;
                    props[9].check(seed, replay.to_json() == report.to_json(), || {
                        "re-running the seed changed the report".into()
                    });
                }
            }
            ProtocolKind::Witness => {
                let (report, _) = exp.execute(seed)?;
                check_witness_run(&exp, seed, &report, &mut props);
                if rep == 0 {
                    let (replay, _) = exp.execute(seed)?;
                    props[9].check(seed, replay.to_json() == report.to_json(), || {
                        "re-running the seed changed the report".into()
                    });
                }
            }
        }
    }
    let mut failed = 0;
    for p in &props {
        if p.runs == 0 {
            continue;
        }
        if p.failures.is_empty() {
            println!("PASS {} ({} check(s))", p.name, p.runs);
        } else {
            failed += 1;
            for f in &p.failures {
                println!("FAIL {}: {}", p.name, f);
            }
        }
    }
    if failed == 0 {
        println!("all invariants hold");
        Ok(0)
    } else {
        println!("{failed} invariant(s) violated");
        Ok(1)
    }
}

fn check_delphi_run(
    exp: &Experiment,
    seed: u64,
    report: &RunReport,
    raw: &CheckedRun,
    props: &mut [PropertyLog],
) {
    let cfg = &exp.cfg;
    let result = &raw.result;
    let eps = cfg.epsilon.to_rational();

    props[0].check(seed, result.all_honest_finished(), || {
        "an honest node produced no output".into()
    });
    props[1].check(seed, *report.agreement() <= eps, || {
        format!("distance {} > epsilon {}", report.agreement(), cfg.epsilon)
    });

    let honest_inputs: Vec<FixedValue> = result
        .honest
        .iter()
        .map(|i| raw.inputs[*i as usize])
        .collect();
    let spread = match (honest_inputs.iter().max(), honest_inputs.iter().min()) {
        (Some(hi), Some(lo)) => hi.sub(lo),
        _ => FixedValue::zero(),
    };
    let bound = next_grid_bound(&cfg.rho0, &spread).to_rational();
    props[2].check(seed, *report.relaxation() <= bound, || {
        format!(
            "relaxation {} > provable bound {}",
            report.relaxation(),
            bound
        )
    });
    props[3].check(seed, spread <= cfg.delta_max, || {
        format!("honest spread {spread} > delta_max {}", cfg.delta_max)
    });

    check_round_logs(seed, result, props);

    // Aggregate confidence never collapses: final per-level weights of every
    // honest node sum to at least 1/2.
    let half = Rational::new(1.into(), 2.into());
    for id in &result.honest {
        if let Some(out) = &result.outputs[*id as usize] {
            let mass: Rational = out.levels.iter().map(|l| l.cross_weight.clone()).sum();
            props[6].check(seed, mass >= half, || {
                format!("node {id}: weight mass {mass} < 1/2")
            });
        }
    }

    // Certificates carry a full quorum of distinct attestors over a grid value.
    for (id, cert) in result.certificates.iter().enumerate() {
        let Some(cert) = cert else { continue };
        let mut ids = cert.attestors.clone();
        ids.sort_unstable();
        ids.dedup();
        let on_grid = cfg
            .epsilon
            .mul(&FixedValue::from_int(cert.value.div_floor(&cfg.epsilon)))
            == cert.value;
        props[7].check(
            seed,
            ids.len() == cert.attestors.len() && ids.len() > cfg.t as usize && on_grid,
            || format!("node {id}: malformed certificate for {}", cert.value),
        );
    }

    // Honest rounded outputs occupy at most two adjacent epsilon-multiples.
    let mut rounded: Vec<FixedValue> = result
        .honest
        .iter()
        .filter_map(|i| result.outputs[*i as usize].as_ref().map(|o| o.grid_value))
        .collect();
    rounded.sort_unstable();
    rounded.dedup();
    let adjacent = match (rounded.first(), rounded.last()) {
        (Some(lo), Some(hi)) => rounded.len() <= 2 && hi.sub(lo) <= cfg.epsilon,
        _ => true,
    };
    props[8].check(seed, adjacent, || {
        format!("rounded outputs {rounded:?} span more than one epsilon step")
    });
}

fn check_witness_run(exp: &Experiment, seed: u64, report: &RunReport, props: &mut [PropertyLog]) {
    use num::Zero;
    let eps = exp.cfg.epsilon.to_rational();
    props[0].check(seed, !report.outputs.is_empty(), || {
        "no honest outputs".into()
    });
    props[1].check(seed, *report.agreement() <= eps, || {
        format!(
            "distance {} > epsilon {}",
            report.agreement(),
            exp.cfg.epsilon
        )
    });
    // The witness protocol promises strict convex validity.
    props[2].check(seed, report.relaxation().is_zero(), || {
        format!("relaxation {} != 0", report.relaxation())
    });
}

/// Per-instance audit checks: the value range halves every round, and each
/// round's closing sets intersect pairwise and trace to honest round-values.
fn check_round_logs(seed: u64, result: &RunResult, props: &mut [PropertyLog]) {
    let logs: Vec<(u16, &Vec<Vec<crate::binaa::RoundRecord>>)> = result
        .honest
        .iter()
        .filter_map(|i| result.round_logs[*i as usize].as_ref().map(|l| (*i, l)))
        .collect();
    let Some((_, first)) = logs.first() else {
        return;
    };
    let instances = first.len();
    for inst in 0..instances {
        let max_round = logs
            .iter()
            .flat_map(|(_, l)| l[inst].iter().map(|r| r.round))
            .max()
            .unwrap_or(0);
        for round in 1..=max_round {
            let recs: Vec<(u16, &crate::binaa::RoundRecord)> = logs
                .iter()
                .filter_map(|(id, l)| {
                    l[inst]
                        .iter()
                        .find(|r| r.round == round)
                        .map(|r| (*id, r))
                })
                .collect();
            // Entering round r the honest values sit within 2^-(r-1).
            let starts: Vec<FixedValue> = recs.iter().map(|(_, r)| r.start).collect();
            if let (Some(lo), Some(hi)) = (starts.iter().min(), starts.iter().max()) {
                let limit = FixedValue::pow2_neg(round - 1);
                props[4].check(seed, hi.sub(lo) <= limit, || {
                    format!(
                        "instance {inst} round {round}: range {} > {}",
                        hi.sub(lo),
                        limit
                    )
                });
            }
            for (i, (id_a, a)) in recs.iter().enumerate() {
                for (id_b, b) in recs.iter().skip(i + 1) {
                    let meet = a.set.iter().any(|v| b.set.contains(v));
                    props[5].check(seed, meet, || {
                        format!(
                            "instance {inst} round {round}: nodes {id_a}/{id_b} closed on disjoint sets {:?} vs {:?}",
                            a.set, b.set
                        )
                    });
                }
                let traced = a
                    .set
                    .iter()
                    .all(|v| recs.iter().any(|(_, r)| r.start == *v));
                props[5].check(seed, traced, || {
                    format!(
                        "instance {inst} round {round}: node {id_a} closed on {:?} not all honest-held",
                        a.set
                    )
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

fn cmd_params(args: &ParamsArgs) -> Result<i32, CliError> {
    let model = match args.family {
        Family::Gumbel => NoiseModel::GumbelRange {
            location: args.location,
            scale: args.scale,
        },
        Family::Frechet => NoiseModel::FrechetRange {
            location: args.location,
            scale: args.scale,
            alpha: args
                .alpha
                .ok_or_else(|| CliError::Config("frechet needs --alpha".into()))?,
        },
    };
    if args.lambda.is_empty() && args.tail.is_empty() {
        return cfg_err("give at least one --lambda or --tail");
    }
    let rho0 = match &args.rho0 {
        Some(s) => Some(parse_fixed("rho0", s)?),
        None => None,
    };
    let mut rows: Vec<(String, f64)> = Vec::new();
    for l in &args.lambda {
        rows.push((format!("lambda={l}"), (-(*l as f64)).exp2()));
    }
    for t in &args.tail {
        rows.push((format!("tail={t:.3e}"), *t));
    }
    println!("{:<14} {:>12} {:>16} {:>16}", "source", "tail", "delta", "delta_grid");
    for (label, tail) in rows {
        let delta = params::derive_delta_tail(&model, tail)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let grid = match &rho0 {
            Some(r) => params::delta_to_grid(delta, r)
                .map(|g| g.to_decimal_string())
                .unwrap_or_else(|e| format!("({e})")),
            None => "-".into(),
        };
        println!("{label:<14} {tail:>12.3e} {delta:>16.6} {grid:>16}");
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// entry
// ---------------------------------------------------------------------------

/// Parses arguments, dispatches, and maps errors to exit codes.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let run = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Check(a) => cmd_check(a),
        Command::Params(a) => cmd_params(a),
    };
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
