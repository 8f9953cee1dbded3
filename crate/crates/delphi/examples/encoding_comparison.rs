//! Plain records versus the delta/run-length wire format.
//!
//! The same runs are simulated twice: once sending every checkpoint value
//! as an explicit record, once with the optimized encoding that collapses
//! unchanged checkpoints into movement symbols and run-length blocks.
//! Outputs must be bit-identical; only the byte meter may move. Wider
//! honest spreads light up more checkpoints, so the byte gap closes as
//! the spread grows. Run with:
//!
//! ```text
//! cargo run --example encoding_comparison
//! ```

use delphi_aa::encoding::EncodeMode;
use delphi_aa::{
    run_protocol, BehaviorPreset, FixedValue, ProtocolConfig, SchedulerKind, SimConfig,
};

fn fx(s: &str) -> FixedValue {
    FixedValue::parse_decimal(s).expect("literal")
}

/// Eight inputs stepping up from `center - spread/2` in spread/8 increments.
fn spaced_inputs(n: u16, center: i64, spread: i64) -> Vec<FixedValue> {
    let lo = FixedValue::from_int(center).sub(&FixedValue::from_int(spread).mul_pow2(-1));
    let step = FixedValue::from_int(spread).mul_pow2(-3);
    (0..n as i64).map(|i| lo.add(&FixedValue::from_int(i).mul(&step))).collect()
}

fn main() {
    let cfg = ProtocolConfig {
        n: 8,
        t: 2,
        s_bound: fx("0"),
        e_bound: fx("512"),
        rho0: fx("1"),
        delta_max: fx("256"),
        epsilon: fx("1"),
    };

    println!(
        "{:>7} {:>6} {:>13} {:>13} {:>7}   outputs",
        "spread", "seed", "plain bytes", "delta bytes", "ratio"
    );
    for spread in [2i64, 16, 64, 128] {
        for seed in [1u64, 2] {
            let inputs = spaced_inputs(cfg.n, 256, spread);
            let run = |mode: EncodeMode| {
                let sim = SimConfig::new(
                    cfg.clone(),
                    inputs.clone(),
                    BehaviorPreset::Honest.expand(cfg.n, 0),
                    SchedulerKind::UniformRandom { max_delay: 20 },
                    mode,
                    seed,
                );
                run_protocol(&sim).expect("run terminates")
            };
            let plain = run(EncodeMode::Plain);
            let optimized = run(EncodeMode::Optimized);

            // the encoding must never change protocol behavior
            let same = plain
                .honest
                .iter()
                .all(|i| plain.outputs[*i as usize] == optimized.outputs[*i as usize]);
            assert!(same, "encodings disagree on outputs");
            assert_eq!(plain.rounds_used, optimized.rounds_used);
            assert!(
                optimized.net.bytes_sent <= plain.net.bytes_sent,
                "optimized encoding regressed"
            );

            println!(
                "{:>7} {:>6} {:>13} {:>13} {:>6.2}x   identical",
                spread,
                seed,
                plain.net.bytes_sent,
                optimized.net.bytes_sent,
                plain.net.bytes_sent as f64 / optimized.net.bytes_sent as f64,
            );
        }
    }
    println!("\nsame outputs, same rounds, fewer bytes on every run");
}
