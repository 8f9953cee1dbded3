//! Checkpoint protocol versus the witness-based classic, byte for byte.
//!
//! Both protocols solve the same task on the same cluster: tight honest
//! inputs, no faults, identical epsilon. The witness construction pays
//! `O(n^3)` reliable-broadcast messages over a couple of rounds; the
//! checkpoint protocol pays `O(n^2)` messages per round over many more
//! rounds (its round count follows the derived per-instance budget, not
//! the observed spread). Which one is cheaper in bytes depends on the
//! geometry, so the comparison is printed per configuration and the
//! cheaper side flagged. Run with:
//!
//! ```text
//! cargo run --example baseline_comparison
//! ```

use delphi_aa::baseline::{run_baseline, BaselineConfig};
use delphi_aa::encoding::EncodeMode;
use delphi_aa::report::RunReport;
use delphi_aa::{
    run_protocol, BehaviorPreset, FixedValue, ProtocolConfig, SchedulerKind, SimConfig,
    CSV_HEADER,
};

fn fx(s: &str) -> FixedValue {
    FixedValue::parse_decimal(s).expect("literal")
}

fn tight_inputs(n: u16) -> Vec<FixedValue> {
    (0..n)
        .map(|i| match i % 4 {
            0 => fx("11"),
            1 => fx("11.5"),
            2 => fx("12"),
            _ => fx("12.5"),
        })
        .collect()
}

fn main() {
    println!("{CSV_HEADER}");
    let mut rows = Vec::new();
    for n in [8u16, 16] {
        let t = (n - 1) / 3;
        let cfg = ProtocolConfig {
            n,
            t,
            s_bound: fx("0"),
            e_bound: fx("32"),
            rho0: fx("2"),
            delta_max: fx("16"),
            epsilon: fx("2"),
        };
        let inputs = tight_inputs(n);
        let scheduler = SchedulerKind::UniformRandom { max_delay: 20 };

        let sim = SimConfig::new(
            cfg.clone(),
            inputs.clone(),
            BehaviorPreset::Honest.expand(n, 0),
            scheduler.clone(),
            EncodeMode::Optimized,
            5,
        );
        let delphi = run_protocol(&sim).expect("checkpoint run terminates");
        let delphi_report = RunReport::from_run(&sim, BehaviorPreset::Honest.name(), &delphi);

        let base_cfg = BaselineConfig {
            protocol: cfg,
            inputs,
            silent: 0,
            scheduler,
            seed: 5,
        };
        let witness = run_baseline(&base_cfg).expect("witness run terminates");
        let witness_report =
            RunReport::from_baseline(&base_cfg, BehaviorPreset::Honest.name(), &witness);

        println!("{}", delphi_report.csv_row());
        println!("{}", witness_report.csv_row());
        rows.push((n, delphi.net.bytes_sent, witness.net.bytes_sent));
    }

    println!("\n{:>4} {:>16} {:>16}   cheaper", "n", "checkpoint bytes", "witness bytes");
    for (n, d, w) in rows {
        let (who, factor) = if d <= w {
            ("checkpoint", w as f64 / d as f64)
        } else {
            ("witness", d as f64 / w as f64)
        };
        println!("{n:>4} {d:>16} {w:>16}   {who} by {factor:.1}x");
    }
    println!(
        "\nwith a tight spread the witness protocol stops after its first reduce \
         round, so its cubic fan-out still undercuts the checkpoint ladder at \
         these sizes; the ladder's advantage is robustness, not fair-weather bytes"
    );
}
