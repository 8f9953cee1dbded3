//! Output finalization: grid rounding, attestations, certificates.
//!
//! Approximate agreement leaves honest outputs strictly within `epsilon` of
//! each other. Rounding every output to the nearest multiple of `epsilon`
//! (ties toward positive infinity) therefore lands all honest nodes on at
//! most two adjacent grid multiples. Each node broadcasts a short
//! attestation of its rounded value; `t + 1` attestations of one value
//! guarantee at least one honest attestor, which makes that value safe to
//! publish as a certificate. Two certificates can legitimately coexist only
//! on adjacent multiples; certificates further apart prove a protocol
//! violation and surface as an audit error instead of being masked.

use num::bigint::BigInt;
use num::{Signed, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::core::{FixedValue, Rational};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FinalizeError {
    /// Two certified values more than one grid step apart: impossible when
    /// at most `t` nodes lie, so the run is flagged for audit.
    #[error("conflicting certificates: {a} and {b} are not adjacent grid multiples")]
    ConflictingCertificates { a: String, b: String },
}

/// Rounds to the nearest multiple of `epsilon`, halves toward positive
/// infinity: `floor(o / epsilon + 1/2) * epsilon`.
pub fn round_to_grid(o: &Rational, epsilon: &FixedValue) -> FixedValue {
    let eps = epsilon.to_rational();
    assert!(eps > Rational::zero(), "epsilon must be positive");
    let shifted = o / &eps + Rational::new(BigInt::from(1), BigInt::from(2));
    let steps = shifted.floor().to_integer();
    // steps fits i64 for any value the protocol can produce
    let steps = i64::try_from(steps).expect("grid index out of range");
    epsilon.mul(&FixedValue::from_int(steps))
}

/// Distance from a rational point to a fixed-point grid value.
pub fn grid_distance(o: &Rational, g: &FixedValue) -> Rational {
    (o - g.to_rational()).abs()
}

/// Attestation tag: a 32-byte commitment binding the attestor, the rounded
/// value, and the run context. Links are authenticated, so the tag only has
/// to be deterministic and collision-resistant, not unforgeable.
pub fn attest_tag(node: u16, value: &FixedValue, run_context: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"checkpoint-attest-v1");
    h.update(node.to_le_bytes());
    h.update(value.numer().to_le_bytes());
    h.update(value.scale_exp().to_le_bytes());
    h.update(run_context.to_le_bytes());
    h.finalize().into()
}

pub fn verify_attest(node: u16, value: &FixedValue, run_context: u64, tag: &[u8; 32]) -> bool {
    attest_tag(node, value, run_context) == *tag
}

/// A value backed by `t + 1` distinct attestors: at least one is honest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub value: FixedValue,
    /// Node ids whose attestations formed the certificate.
    pub attestors: Vec<u16>,
}

/// Collects attestations and forms certificates.
#[derive(Debug, Clone)]
pub struct AttestPool {
    t: u16,
    epsilon: FixedValue,
    run_context: u64,
    /// value -> bitmask of attestors seen
    seen: BTreeMap<FixedValue, u64>,
    /// values already certified, in formation order
    certified: Vec<Certificate>,
    /// attestations with bad tags (counted, ignored)
    pub rejected: u64,
}

impl AttestPool {
    pub fn new(t: u16, epsilon: FixedValue, run_context: u64) -> Self {
        AttestPool {
            t,
            epsilon,
            run_context,
            seen: BTreeMap::new(),
            certified: Vec::new(),
            rejected: 0,
        }
    }

    /// Ingests one attestation. Returns a certificate when `value` first
    /// reaches `t + 1` attestors, and an audit error if a new certificate
    /// conflicts with an earlier one.
    pub fn insert(
        &mut self,
        sender: u16,
        value: FixedValue,
        tag: [u8; 32],
    ) -> Result<Option<Certificate>, FinalizeError> {
        if sender >= 64 || !verify_attest(sender, &value, self.run_context, &tag) {
            self.rejected += 1;
            return Ok(None);
        }
        let mask = self.seen.entry(value).or_insert(0);
        *mask |= 1 << sender;
        if mask.count_ones() != self.t as u32 + 1 {
            // below threshold, or already certified earlier
            return Ok(None);
        }
        let cert = Certificate {
            value,
            attestors: (0..64).filter(|i| *mask & (1 << i) != 0).collect(),
        };
        for earlier in &self.certified {
            let gap = earlier.value.sub(&value).abs();
            if gap > self.epsilon {
                return Err(FinalizeError::ConflictingCertificates {
                    a: earlier.value.to_decimal_string(),
                    b: value.to_decimal_string(),
                });
            }
        }
        self.certified.push(cert.clone());
        Ok(Some(cert))
    }

    /// The first certificate formed, if any.
    pub fn first(&self) -> Option<&Certificate> {
        self.certified.first()
    }

    pub fn certificates(&self) -> &[Certificate] {
        &self.certified
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::FromPrimitive;

    fn rat(n: i64, d: i64) -> Rational {
        Rational::new(BigInt::from(n), BigInt::from(d))
    }

    fn fv(s: &str) -> FixedValue {
        FixedValue::parse_decimal(s).unwrap()
    }

    #[test]
    fn rounding_examples() {
        let eps = FixedValue::from_int(2);
        // 11.3 -> 12 (nearest), 11 -> 12 (half toward +inf), 10.9 -> 10
        assert_eq!(round_to_grid(&rat(113, 10), &eps), fv("12"));
        assert_eq!(round_to_grid(&rat(11, 1), &eps), fv("12"));
        assert_eq!(round_to_grid(&rat(109, 10), &eps), fv("10"));
        assert_eq!(round_to_grid(&rat(-11, 1), &eps), fv("-10"));
        // fractional grid
        assert_eq!(round_to_grid(&rat(113, 10), &fv("0.5")), fv("11.5"));
        assert_eq!(round_to_grid(&Rational::from_f64(0.0).unwrap(), &eps), fv("0"));
    }

    #[test]
    fn rounding_error_is_at_most_half_a_step() {
        let eps = fv("0.5");
        for i in -40..40i64 {
            let o = rat(i * 7 + 3, 13);
            let g = round_to_grid(&o, &eps);
            assert!(grid_distance(&o, &g) * Rational::from_i64(2).unwrap() <= eps.to_rational());
            assert!(g.is_multiple_of(&eps));
        }
    }

    #[test]
    fn honest_outputs_round_to_adjacent_multiples() {
        // any set of points spanning strictly less than epsilon rounds onto
        // at most two adjacent multiples
        let eps = FixedValue::from_int(2);
        for base in [rat(0, 1), rat(97, 10), rat(-31, 7)] {
            let pts: Vec<Rational> = (0..20)
                .map(|i| &base + rat(i, 11)) // span 19/11 < 2
                .collect();
            let grids: Vec<FixedValue> = pts.iter().map(|p| round_to_grid(p, &eps)).collect();
            let lo = grids.iter().min().unwrap();
            let hi = grids.iter().max().unwrap();
            assert!(hi.sub(lo) <= eps);
        }
    }

    #[test]
    fn tags_bind_all_inputs() {
        let v = fv("12");
        let base = attest_tag(3, &v, 99);
        assert!(verify_attest(3, &v, 99, &base));
        assert_ne!(base, attest_tag(4, &v, 99));
        assert_ne!(base, attest_tag(3, &fv("14"), 99));
        assert_ne!(base, attest_tag(3, &v, 100));
    }

    #[test]
    fn pool_certifies_at_small_quorum() {
        let mut pool = AttestPool::new(1, FixedValue::from_int(2), 7);
        let v = fv("12");
        assert_eq!(pool.insert(0, v, attest_tag(0, &v, 7)).unwrap(), None);
        // duplicate attestor does not advance the count
        assert_eq!(pool.insert(0, v, attest_tag(0, &v, 7)).unwrap(), None);
        let cert = pool.insert(5, v, attest_tag(5, &v, 7)).unwrap().unwrap();
        assert_eq!(cert.value, v);
        assert_eq!(cert.attestors, vec![0, 5]);
        // further attestors do not mint a second certificate for the value
        assert_eq!(pool.insert(2, v, attest_tag(2, &v, 7)).unwrap(), None);
        assert_eq!(pool.certificates().len(), 1);
    }

    #[test]
    fn bad_tags_rejected() {
        let mut pool = AttestPool::new(1, FixedValue::from_int(2), 7);
        let v = fv("12");
        // tag for the wrong node
        assert_eq!(pool.insert(1, v, attest_tag(0, &v, 7)).unwrap(), None);
        // tag for the wrong context
        assert_eq!(pool.insert(1, v, attest_tag(1, &v, 8)).unwrap(), None);
        assert_eq!(pool.rejected, 2);
        assert_eq!(pool.insert(1, v, attest_tag(1, &v, 7)).unwrap(), None);
        assert!(pool.insert(2, v, attest_tag(2, &v, 7)).unwrap().is_some());
    }

    #[test]
    fn adjacent_certificates_allowed_distant_ones_flagged() {
        let eps = FixedValue::from_int(2);
        let mut pool = AttestPool::new(1, eps, 7);
        let a = fv("12");
        let b = fv("14"); // adjacent
        let c = fv("20"); // three steps away
        pool.insert(0, a, attest_tag(0, &a, 7)).unwrap();
        pool.insert(1, a, attest_tag(1, &a, 7)).unwrap();
        pool.insert(2, b, attest_tag(2, &b, 7)).unwrap();
        let second = pool.insert(3, b, attest_tag(3, &b, 7)).unwrap();
        assert!(second.is_some(), "adjacent second certificate is legal");
        pool.insert(4, c, attest_tag(4, &c, 7)).unwrap();
        let err = pool.insert(5, c, attest_tag(5, &c, 7)).unwrap_err();
        assert!(matches!(err, FinalizeError::ConflictingCertificates { .. }));
    }
}
