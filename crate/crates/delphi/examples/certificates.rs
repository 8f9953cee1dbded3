//! From agreed values to checkable output certificates.
//!
//! Agreement alone leaves each node with a private number. To make the
//! result consumable, nodes round their exact outputs to the epsilon grid,
//! attest the rounded value with a keyed tag, and collect attestations:
//! `t + 1` distinct attestors certify a value, because at least one of the
//! attestors must be honest. Since honest outputs agree to within epsilon,
//! rounding can split them across at most two adjacent grid points, so a
//! pool accepts a second certificate only within epsilon of the first and
//! treats anything farther as evidence of a broken run. Run with:
//!
//! ```text
//! cargo run --example certificates
//! ```

use delphi_aa::encoding::EncodeMode;
use delphi_aa::finalize::{attest_tag, round_to_grid, verify_attest, AttestPool};
use delphi_aa::{
    run_protocol, BehaviorPreset, FixedValue, ProtocolConfig, SchedulerKind, SimConfig,
};

fn fx(s: &str) -> FixedValue {
    FixedValue::parse_decimal(s).expect("literal")
}

fn main() {
    // --- rounding: exact rationals snap to the nearest epsilon multiple ---
    let epsilon = fx("2");
    for v in ["12.75", "13", "13.25"] {
        let exact = fx(v).to_rational();
        println!("round_to_grid({v}) = {} (ties go up)", round_to_grid(&exact, &epsilon));
    }

    // --- attestation tags bind node, value, and run context ---
    let run_context = 0xfeed;
    let tag = attest_tag(3, &fx("14"), run_context);
    assert!(verify_attest(3, &fx("14"), run_context, &tag));
    assert!(!verify_attest(4, &fx("14"), run_context, &tag), "wrong node");
    assert!(!verify_attest(3, &fx("16"), run_context, &tag), "wrong value");
    assert!(!verify_attest(3, &fx("14"), 0xbeef, &tag), "wrong run");
    println!("\ntags verify only for the exact (node, value, run) they were made for");

    // --- a pool certifies at t + 1 and polices certificate distance ---
    let t = 2;
    let mut pool = AttestPool::new(t, epsilon, run_context);
    let mut certified = None;
    for node in 0..=t {
        let v = fx("14");
        certified = pool.insert(node, v, attest_tag(node, &v, run_context)).expect("no conflict");
    }
    let cert = certified.expect("t + 1 attestors reached");
    println!("\ncertificate for {} after {} attestations", cert.value, cert.attestors.len());

    // a forged tag is counted and ignored, never certified
    pool.insert(9, fx("0"), [0u8; 32]).expect("forgeries are not conflicts");
    assert_eq!(pool.rejected, 1);

    // the adjacent grid value may legally certify too...
    for node in t + 1..=2 * t + 1 {
        let v = fx("16");
        pool.insert(node, v, attest_tag(node, &v, run_context)).expect("adjacent is legal");
    }
    let last = pool.certificates().last().expect("just certified");
    println!("adjacent certificate accepted: {}", last.value);

    // ...but a distant one is a protocol violation
    let mut far = AttestPool::new(0, fx("2"), run_context);
    far.insert(0, fx("14"), attest_tag(0, &fx("14"), run_context)).expect("first");
    let err = far.insert(1, fx("20"), attest_tag(1, &fx("20"), run_context));
    println!("distant second certificate: {}", err.expect_err("must conflict"));

    // --- the simulator wires all of this into every honest node ---
    let cfg = ProtocolConfig {
        n: 7,
        t: 2,
        s_bound: fx("0"),
        e_bound: fx("32"),
        rho0: fx("2"),
        delta_max: fx("16"),
        epsilon: fx("2"),
    };
    let inputs: Vec<FixedValue> =
        ["10", "14", "12", "10", "14", "12", "10"].iter().map(|s| fx(s)).collect();
    let sim = SimConfig::new(
        cfg.clone(),
        inputs,
        BehaviorPreset::Equivocator.expand(cfg.n, 2),
        SchedulerKind::UniformRandom { max_delay: 20 },
        EncodeMode::Optimized,
        11,
    );
    let result = run_protocol(&sim).expect("run terminates");
    println!("\nwith 2 split-brain equivocators among 7 nodes:");
    for id in &result.honest {
        let cert = result.certificates[*id as usize].as_ref().expect("honest node certified");
        println!(
            "  node {id}: certified {} with attestors {:?}",
            cert.value, cert.attestors
        );
        assert!(cert.attestors.len() >= (cfg.t + 1) as usize);
    }
    for id in &result.honest {
        assert!(result.audit_errors[*id as usize].is_none(), "no conflicts seen");
    }
    println!("every honest node holds a quorum-backed certificate and saw no conflicts");
}
