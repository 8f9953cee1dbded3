//! One simulated agreement run, narrated end to end.
//!
//! Seven oracle nodes hold readings between 10 and 14; two of them crash
//! before sending anything. The survivors must converge to within
//! `epsilon = 2` of each other while staying inside the honest input hull
//! (relaxed by the base separator). Run with:
//!
//! ```text
//! cargo run --example single_run
//! ```

use delphi_aa::core::{decimal12, ratio_string};
use delphi_aa::encoding::EncodeMode;
use delphi_aa::{
    derive_params, run_protocol, BehaviorPreset, FixedValue, ProtocolConfig, SchedulerKind,
    SimConfig,
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
    let params = derive_params(&cfg).expect("valid config");
    println!("config: n={} t={} range [{}, {}]", cfg.n, cfg.t, cfg.s_bound, cfg.e_bound);
    println!(
        "derived: {} grid levels, {} rounds per instance, eps' = {}",
        params.l_max + 1,
        params.r_max,
        ratio_string(&params.eps_prime),
    );

    let inputs: Vec<FixedValue> =
        ["10", "14", "12", "10.5", "13.5", "12", "11"].iter().map(|s| fx(s)).collect();
    println!("\ninputs: {:?}", inputs.iter().map(|v| v.to_string()).collect::<Vec<_>>());

    // the last two nodes stay silent for the whole run
    let behaviors = BehaviorPreset::Silent.expand(cfg.n, 2);
    let sim = SimConfig::new(
        cfg,
        inputs.clone(),
        behaviors,
        SchedulerKind::UniformRandom { max_delay: 20 },
        EncodeMode::Optimized,
        7,
    );
    let result = run_protocol(&sim).expect("run terminates");

    println!("\nper-node results:");
    for id in 0..sim.protocol.n {
        match &result.outputs[id as usize] {
            Some(out) => {
                let cert = result.certificates[id as usize]
                    .as_ref()
                    .map(|c| format!("certificate for {} ({} attestors)", c.value, c.attestors.len()))
                    .unwrap_or_else(|| "no certificate".into());
                println!(
                    "  node {id}: exact {} -> grid {}, {}",
                    decimal12(&out.value),
                    out.grid_value,
                    cert,
                );
            }
            None => println!("  node {id}: faulty (silent)"),
        }
    }

    println!("\nlevel aggregates at node 0:");
    if let Some(out) = &result.outputs[0] {
        for lv in &out.levels {
            println!(
                "  level {}: value {} weight {} cross-weight {}{}",
                lv.level,
                decimal12(&lv.value),
                ratio_string(&lv.weight),
                ratio_string(&lv.cross_weight),
                if lv.fallback { " (fallback)" } else { "" },
            );
        }
    }

    let agreement = result.agreement_distance().expect("honest outputs exist");
    let relaxation = result.validity_relaxation(&inputs).expect("honest outputs exist");
    println!("\nagreement distance: {} (epsilon {})", decimal12(&agreement), sim.protocol.epsilon);
    println!("validity relaxation: {} (allowed {})", decimal12(&relaxation), sim.protocol.rho0);
    println!(
        "traffic: {} messages, {} bytes, {} rounds, {} events",
        result.net.messages_sent, result.net.bytes_sent, result.rounds_used, result.net.events,
    );

    assert!(result.all_honest_finished());
    assert!(agreement <= sim.protocol.epsilon.to_rational());
    println!("\nall honest nodes finished within epsilon of each other");
}
