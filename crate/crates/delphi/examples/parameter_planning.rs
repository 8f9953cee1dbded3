//! Sizing the spread bound from a latency-tail model, then predicting cost.
//!
//! Before deployment an operator must fix `delta_max`, the assumed bound on
//! honest input spread. Too small and real spreads void the guarantees; too
//! large and every run pays for grid levels it never uses. The `params`
//! module sizes the bound from a fitted extreme-value model: choose a
//! security level lambda, accept a `2^-lambda` per-invocation chance of
//! exceedance, read off the quantile, and round up to the power-of-two
//! grid. Light (Gumbel) tails grow linearly in lambda; heavy (Frechet)
//! tails grow geometrically, which is why heavy-tailed feeds are expensive.
//! Run with:
//!
//! ```text
//! cargo run --example parameter_planning
//! ```

use delphi_aa::core::derive_params;
use delphi_aa::encoding::EncodeMode;
use delphi_aa::params::{delta_to_grid, derive_delta, estimate_complexity, NoiseModel};
use delphi_aa::{
    run_protocol, BehaviorPreset, FixedValue, ProtocolConfig, SchedulerKind, SimConfig,
};

fn fx(s: &str) -> FixedValue {
    FixedValue::parse_decimal(s).expect("literal")
}

fn main() {
    let gumbel = NoiseModel::GumbelRange { location: 4.0, scale: 1.2 };
    let frechet = NoiseModel::FrechetRange { location: 4.0, scale: 1.2, alpha: 3.0 };

    println!("spread quantiles by security level (per-invocation exceedance 2^-lambda):");
    println!("{:>8} {:>14} {:>14}", "lambda", "gumbel", "frechet");
    for lambda in [10u32, 20, 30, 40] {
        let g = derive_delta(&gumbel, lambda).expect("valid model");
        let f = derive_delta(&frechet, lambda).expect("valid model");
        println!("{lambda:>8} {g:>14.3} {f:>14.3}");
    }

    // plan a deployment against the light-tailed model at lambda = 30
    let lambda = 30;
    let rho0 = fx("2");
    let raw = derive_delta(&gumbel, lambda).expect("valid model");
    let delta_max = delta_to_grid(raw, &rho0).expect("grid fit");
    println!("\nlambda {lambda}: raw quantile {raw:.3} -> delta_max {delta_max} on the rho0={rho0} grid");

    let cfg = ProtocolConfig {
        n: 8,
        t: 2,
        s_bound: fx("0"),
        e_bound: fx("64"),
        rho0,
        delta_max,
        epsilon: fx("2"),
    };
    let params = derive_params(&cfg).expect("valid config");
    let geometry = delphi_aa::delphi::Geometry::new(cfg.clone()).expect("valid config");
    println!(
        "derived: {} levels, {} rounds per instance, {} instances per node",
        params.l_max + 1,
        params.r_max,
        geometry.instance_count(),
    );

    // predict traffic for a typical observed spread, then measure one run
    let typical = fx("8");
    let est = estimate_complexity(&cfg, &params, &typical);
    println!(
        "\npredicted for spread {typical}: {} KB per round, {} rounds, {} KB total",
        est.bits_per_round / 8192,
        est.rounds,
        est.total_bits / 8192,
    );

    let inputs: Vec<FixedValue> =
        (0..cfg.n as i64).map(|i| fx("20").add(&FixedValue::from_int(i))).collect();
    let sim = SimConfig::new(
        cfg,
        inputs,
        BehaviorPreset::Honest.expand(8, 0),
        SchedulerKind::UniformRandom { max_delay: 20 },
        EncodeMode::Optimized,
        3,
    );
    let run = run_protocol(&sim).expect("run terminates");
    println!(
        "measured:                    {} KB total over {} rounds",
        run.net.bytes_sent / 1024,
        run.rounds_used,
    );
    println!("\nthe estimate is an order-of-magnitude planning figure, not an invoice");
}
