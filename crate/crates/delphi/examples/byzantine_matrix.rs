//! Every fault behavior against every adversarial scheduler.
//!
//! A seven-node cluster (fault budget t = 2) runs the full grid of
//! behavior presets and schedulers, several seeds each, and reports the
//! worst agreement distance and validity relaxation seen per cell. The
//! bound on relaxation is `max(rho0, spread)`: honest inputs here span 4,
//! so outputs may leave the hull by at most 4. Run with:
//!
//! ```text
//! cargo run --example byzantine_matrix
//! ```

use delphi_aa::core::{decimal12, Rational};
use delphi_aa::encoding::EncodeMode;
use delphi_aa::{
    run_protocol, BehaviorPreset, FixedValue, ProtocolConfig, SchedulerKind, SimConfig,
};

fn fx(s: &str) -> FixedValue {
    FixedValue::parse_decimal(s).expect("literal")
}

fn main() {
    let cfg = ProtocolConfig {
        n: 7,
        t: 2,
        s_bound: fx("0"),
        e_bound: fx("32"),
        rho0: fx("2"),
        delta_max: fx("16"),
        epsilon: fx("2"),
    };
    // spread 4 around 12; the faulty suffix of the vector is ignored by
    // behaviors that pick their own story
    let inputs: Vec<FixedValue> =
        ["10", "14", "12", "10", "14", "12", "10"].iter().map(|s| fx(s)).collect();
    let spread = fx("4");
    let allowed = spread.to_rational(); // max(rho0, spread)
    let epsilon = cfg.epsilon.to_rational();

    let schedulers = [
        SchedulerKind::UniformRandom { max_delay: 20 },
        SchedulerKind::targeted_into(0, cfg.n, 8, 20),
        SchedulerKind::skew_split(3, 160, 20),
    ];

    println!(
        "{:<14} {:<16} {:>12} {:>12} {:>8} {:>10}",
        "behavior", "scheduler", "agreement", "relaxation", "rounds", "bytes"
    );
    let mut worst_agreement = Rational::from_integer(0.into());
    for preset in BehaviorPreset::all() {
        let faulty = match preset {
            BehaviorPreset::Honest => 0,
            _ => cfg.t,
        };
        for sched in &schedulers {
            let mut cell_agree = Rational::from_integer(0.into());
            let mut cell_relax = Rational::from_integer(0.into());
            let mut rounds = 0;
            let mut bytes = 0;
            for seed in 0..10u64 {
                let sim = SimConfig::new(
                    cfg.clone(),
                    inputs.clone(),
                    preset.expand(cfg.n, faulty),
                    sched.clone(),
                    EncodeMode::Optimized,
                    seed,
                );
                let result = run_protocol(&sim).expect("run terminates");
                assert!(result.all_honest_finished(), "{} stalled", preset.name());
                let a = result.agreement_distance().expect("honest outputs");
                let r = result.validity_relaxation(&inputs).expect("honest outputs");
                assert!(a <= epsilon, "{}: agreement {} > epsilon", preset.name(), decimal12(&a));
                assert!(r <= allowed, "{}: relaxation {} > bound", preset.name(), decimal12(&r));
                cell_agree = cell_agree.max(a);
                cell_relax = cell_relax.max(r);
                rounds = rounds.max(result.rounds_used);
                bytes = bytes.max(result.net.bytes_sent);
            }
            println!(
                "{:<14} {:<16} {:>12} {:>12} {:>8} {:>10}",
                preset.name(),
                sched.name(),
                decimal12(&cell_agree),
                decimal12(&cell_relax),
                rounds,
                bytes,
            );
            worst_agreement = worst_agreement.max(cell_agree);
        }
    }
    println!(
        "\nworst agreement across 150 runs: {} (epsilon 2); every cell within bounds",
        decimal12(&worst_agreement)
    );
}
