//! Exact numeric types, protocol configuration, and the checkpoint grid.
//!
//! Everything that touches protocol state is exact: [`FixedValue`] is a
//! dyadic fixed-point number (integer numerator over a power of two) used for
//! inputs, per-instance values, and grid coordinates; [`Rational`] is an
//! arbitrary-precision rational used for weights and aggregation. Floating
//! point appears only in the planning helpers of the `params` module, never
//! in protocol state, so identical configurations replay identically on any
//! platform.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num::bigint::BigInt;
use num::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arbitrary-precision rational, always reduced, denominator positive.
pub type Rational = num::BigRational;

/// Errors from configuration validation and exact parsing.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    /// The configuration violates a structural invariant.
    #[error("invalid config: {0}")]
    Config(String),
    /// A value lies outside the configured input range.
    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange {
        value: String,
        lo: String,
        hi: String,
    },
    /// A decimal literal is not an exact dyadic rational.
    #[error("`{0}` is not an exact dyadic decimal (denominator must be a power of two)")]
    InvalidDecimal(String),
    /// Arithmetic left the representable range of `FixedValue`.
    #[error("fixed-point overflow in {0}")]
    Overflow(&'static str),
}

// ---------------------------------------------------------------------------
// FixedValue
// ---------------------------------------------------------------------------

/// Exact dyadic fixed-point number: `numer / 2^scale_exp`.
///
/// The representation is canonical: `numer` is odd, or the value is zero and
/// stored as `0 / 2^0`. All arithmetic is exact; operations that could leave
/// `i128` range panic rather than round (protocol values are small by
/// construction, so an overflow is a logic error, not a data condition).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct FixedValue {
    numer: i128,
    scale_exp: u32,
}

// Manual impl so values arriving through serde are re-normalized; a
// non-canonical pair would break Eq and Hash.
impl<'de> Deserialize<'de> for FixedValue {
    fn deserialize<D>(d: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            numer: i128,
            scale_exp: u32,
        }
        let r = Raw::deserialize(d)?;
        Ok(FixedValue::new(r.numer, r.scale_exp))
    }
}

impl FixedValue {
    /// Builds `numer / 2^scale_exp` and normalizes to canonical form.
    pub fn new(numer: i128, scale_exp: u32) -> Self {
        let mut v = FixedValue { numer, scale_exp };
        v.normalize();
        v
    }

    /// The integer `n`.
    pub fn from_int(n: i64) -> Self {
        FixedValue {
            numer: n as i128,
            scale_exp: 0,
        }
    }

    /// `2^exp` for `exp <= 0` given as `pow2_neg(r) = 2^-r`.
    pub fn pow2_neg(r: u32) -> Self {
        FixedValue {
            numer: 1,
            scale_exp: r,
        }
    }

    pub fn zero() -> Self {
        FixedValue {
            numer: 0,
            scale_exp: 0,
        }
    }

    pub fn one() -> Self {
        FixedValue {
            numer: 1,
            scale_exp: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.numer == 0
    }

    pub fn numer(&self) -> i128 {
        self.numer
    }

    /// Depth of the dyadic: the canonical scale exponent. Zero has depth 0.
    pub fn scale_exp(&self) -> u32 {
        self.scale_exp
    }

    fn normalize(&mut self) {
        if self.numer == 0 {
            self.scale_exp = 0;
            return;
        }
        while self.scale_exp > 0 && self.numer % 2 == 0 {
            self.numer /= 2;
            self.scale_exp -= 1;
        }
    }

    fn align(a: &Self, b: &Self) -> (i128, i128, u32) {
        let s = a.scale_exp.max(b.scale_exp);
        let an = shl_exact(a.numer, s - a.scale_exp).expect("fixed-point overflow in align");
        let bn = shl_exact(b.numer, s - b.scale_exp).expect("fixed-point overflow in align");
        (an, bn, s)
    }

    pub fn add(&self, other: &Self) -> Self {
        let (a, b, s) = Self::align(self, other);
        FixedValue::new(a.checked_add(b).expect("fixed-point overflow in add"), s)
    }

    pub fn sub(&self, other: &Self) -> Self {
        let (a, b, s) = Self::align(self, other);
        FixedValue::new(a.checked_sub(b).expect("fixed-point overflow in sub"), s)
    }

    pub fn neg(&self) -> Self {
        FixedValue {
            numer: -self.numer,
            scale_exp: self.scale_exp,
        }
    }

    pub fn abs(&self) -> Self {
        FixedValue {
            numer: self.numer.abs(),
            scale_exp: self.scale_exp,
        }
    }

    /// Exact midpoint `(self + other) / 2`.
    pub fn avg(&self, other: &Self) -> Self {
        let (a, b, s) = Self::align(self, other);
        FixedValue::new(a.checked_add(b).expect("fixed-point overflow in avg"), s + 1)
    }

    /// Exact product. Scales add, numerators multiply.
    pub fn mul(&self, other: &Self) -> Self {
        FixedValue::new(
            self.numer
                .checked_mul(other.numer)
                .expect("fixed-point overflow in mul"),
            self.scale_exp + other.scale_exp,
        )
    }

    /// `self * 2^exp` (exp may be negative).
    pub fn mul_pow2(&self, exp: i32) -> Self {
        if exp >= 0 {
            FixedValue::new(
                self.numer
                    .checked_shl(exp as u32)
                    .expect("fixed-point overflow in mul_pow2"),
                self.scale_exp,
            )
        } else {
            FixedValue::new(self.numer, self.scale_exp + (-exp) as u32)
        }
    }

    /// Exact `floor(self / divisor)` for `divisor > 0`.
    pub fn div_floor(&self, divisor: &Self) -> i64 {
        assert!(divisor.numer > 0, "div_floor requires a positive divisor");
        // a/2^as over b/2^bs = a*2^bs / (b*2^as); shift only the smaller side.
        let (a, b, _) = Self::align(self, divisor);
        num::integer::div_floor(a, b) as i64
    }

    /// Exact `ceil(self / divisor)` for `divisor > 0`.
    pub fn div_ceil(&self, divisor: &Self) -> i64 {
        assert!(divisor.numer > 0, "div_ceil requires a positive divisor");
        let (a, b, _) = Self::align(self, divisor);
        num::integer::div_ceil(a, b) as i64
    }

    /// True when `self` is an exact integer multiple of `divisor > 0`.
    pub fn is_multiple_of(&self, divisor: &Self) -> bool {
        let (a, b, _) = Self::align(self, divisor);
        a % b == 0
    }

    pub fn to_rational(&self) -> Rational {
        Rational::new(
            BigInt::from(self.numer),
            BigInt::from(1i128) << self.scale_exp,
        )
    }

    /// Nearest dyadic of depth <= `max_scale` (used to quantize sampled
    /// inputs; ties round up). Exact values pass through unchanged.
    pub fn from_f64_quantized(x: f64, max_scale: u32) -> Option<Self> {
        if !x.is_finite() {
            return None;
        }
        let scaled = x * (1u64 << max_scale.min(62)) as f64;
        if scaled.abs() >= i64::MAX as f64 {
            return None;
        }
        Some(FixedValue::new(
            scaled.round_ties_even() as i128,
            max_scale.min(62),
        ))
    }

    pub fn to_f64(&self) -> f64 {
        self.numer as f64 / 2f64.powi(self.scale_exp as i32)
    }

    /// Exact finite decimal expansion (every dyadic has one).
    pub fn to_decimal_string(&self) -> String {
        if self.scale_exp == 0 {
            return self.numer.to_string();
        }
        // numer / 2^s == numer * 5^s / 10^s
        let digits = BigInt::from(self.numer) * BigInt::from(5u32).pow(self.scale_exp);
        let neg = digits.is_negative();
        let mut s = digits.abs().to_string();
        let point = self.scale_exp as usize;
        if s.len() <= point {
            s = format!("{}{}", "0".repeat(point - s.len() + 1), s);
        }
        s.insert(s.len() - point, '.');
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if neg {
            format!("-{s}")
        } else {
            s
        }
    }

    /// Parses an exact decimal literal. Fails unless the value is dyadic
    /// (e.g. `"11.5"`, `"0.25"`, `"-3"`; `"0.1"` is rejected).
    pub fn parse_decimal(text: &str) -> Result<Self, CoreError> {
        let t = text.trim();
        let bad = || CoreError::InvalidDecimal(text.to_string());
        let (sign, t) = match t.strip_prefix('-') {
            Some(rest) => (-1i128, rest),
            None => (1i128, t.strip_prefix('+').unwrap_or(t)),
        };
        if t.is_empty() {
            return Err(bad());
        }
        let (int_part, frac_part) = match t.split_once('.') {
            Some((i, f)) => (i, f),
            None => (t, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad());
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(bad());
        }
        let mut numer = BigInt::from(0u32);
        for c in int_part.chars().chain(frac_part.chars()) {
            numer = numer * 10 + (c as u8 - b'0');
        }
        // value = numer / 10^d; dyadic iff numer divisible by 5^d.
        let d = frac_part.len() as u32;
        let five = BigInt::from(5u32).pow(d);
        if (&numer % &five) != BigInt::zero() {
            return Err(bad());
        }
        let reduced = numer / five;
        let reduced = reduced.to_i128().ok_or(CoreError::Overflow("parse"))?;
        Ok(FixedValue::new(sign * reduced, d))
    }
}

impl PartialOrd for FixedValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FixedValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.numer.signum(), other.numer.signum()) {
            (a, b) if a != b => return a.cmp(&b),
            (0, 0) => return Ordering::Equal,
            _ => {}
        }
        let s = self.scale_exp.max(other.scale_exp);
        let la = s - self.scale_exp;
        let lb = s - other.scale_exp;
        match (shl_exact(self.numer, la), shl_exact(other.numer, lb)) {
            (Some(a), Some(b)) => a.cmp(&b),
            // Hostile wire values can carry extreme scales; fall back to
            // arbitrary precision rather than overflow.
            _ => {
                let a = BigInt::from(self.numer) << la;
                let b = BigInt::from(other.numer) << lb;
                a.cmp(&b)
            }
        }
    }
}

/// `v << s` only when no significant bit is lost (`checked_shl` alone does
/// not detect value overflow, merely oversized shift amounts).
fn shl_exact(v: i128, s: u32) -> Option<i128> {
    if v == 0 || s == 0 {
        return Some(v);
    }
    // need s fresh zero bits above the magnitude, plus the sign bit
    if s + 1 > v.unsigned_abs().leading_zeros() {
        return None;
    }
    Some(v << s)
}

impl fmt::Display for FixedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_decimal_string())
    }
}

impl FromStr for FixedValue {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FixedValue::parse_decimal(s)
    }
}

/// Renders a rational with 12 significant digits (reports only; exact values
/// travel as numerator/denominator strings next to it).
pub fn decimal12(r: &Rational) -> String {
    if r.is_zero() {
        return "0".to_string();
    }
    let x = rational_to_f64(r);
    format!("{:.11e}", x)
}

/// Lossy conversion for display and fitting; never used in protocol state.
pub fn rational_to_f64(r: &Rational) -> f64 {
    r.numer()
        .to_f64()
        .and_then(|n| r.denom().to_f64().map(|d| n / d))
        .unwrap_or_else(|| {
            // Extremely large terms: scale both sides down.
            let bits = r.numer().bits().max(r.denom().bits()) as i64 - 900;
            let shift = bits.max(0) as u64;
            let n = (r.numer() >> shift).to_f64().unwrap_or(f64::NAN);
            let d = (r.denom() >> shift).to_f64().unwrap_or(f64::NAN);
            n / d
        })
}

/// `p/q` form for exact report fields.
pub fn ratio_string(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

// ---------------------------------------------------------------------------
// Configuration and derived parameters
// ---------------------------------------------------------------------------

/// Static protocol configuration shared by every node of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Number of nodes.
    pub n: u16,
    /// Fault budget; safety needs `n >= 3t + 1`.
    pub t: u16,
    /// Lower input bound (inclusive), a multiple of `delta_max`.
    pub s_bound: FixedValue,
    /// Upper input bound (inclusive), a multiple of `delta_max`.
    pub e_bound: FixedValue,
    /// Base checkpoint separator at level 0.
    pub rho0: FixedValue,
    /// Bound on the honest input spread; `delta_max / rho0` must be a power
    /// of two (the loader rounds `delta_max` up to enforce this).
    pub delta_max: FixedValue,
    /// Agreement target.
    pub epsilon: FixedValue,
}

impl ProtocolConfig {
    /// Validates the structural invariants. Call before deriving parameters.
    pub fn validate(&self) -> Result<(), CoreError> {
        let err = |m: String| Err(CoreError::Config(m));
        if (self.n as u32) < 3 * self.t as u32 + 1 {
            return err(format!("n={} < 3t+1 with t={}", self.n, self.t));
        }
        if self.n > 64 {
            return err(format!("n={} exceeds the simulation limit of 64", self.n));
        }
        if self.rho0 <= FixedValue::zero() {
            return err("rho0 must be positive".into());
        }
        if self.epsilon <= FixedValue::zero() {
            return err("epsilon must be positive".into());
        }
        if self.rho0 > self.delta_max {
            return err("rho0 must not exceed delta_max".into());
        }
        if self.s_bound >= self.e_bound {
            return err("s_bound must be below e_bound".into());
        }
        if ratio_power_of_two(&self.delta_max, &self.rho0).is_none() {
            return err(format!(
                "delta_max/rho0 = {}/{} is not a power of two",
                self.delta_max, self.rho0
            ));
        }
        // Grid-aligned bounds keep a full checkpoint cell inside the range at
        // every level, which the termination bound relies on.
        if !self.s_bound.is_multiple_of(&self.delta_max)
            || !self.e_bound.is_multiple_of(&self.delta_max)
        {
            return err("s_bound and e_bound must be integer multiples of delta_max".into());
        }
        if self.e_bound.sub(&self.s_bound) < self.delta_max {
            return err("e_bound - s_bound must be at least delta_max".into());
        }
        Ok(())
    }

    /// Separator at `level`: `rho0 * 2^level`.
    pub fn separator(&self, level: u32) -> FixedValue {
        self.rho0.mul_pow2(level as i32)
    }

    /// Echo-amplification threshold `t + 1`.
    pub fn quorum_small(&self) -> u32 {
        self.t as u32 + 1
    }

    /// Round-progress threshold `n - t`.
    pub fn quorum_large(&self) -> u32 {
        self.n as u32 - self.t as u32
    }
}

/// Returns `Some(log2(a/b))` when `a/b` is an exact positive power of two.
fn ratio_power_of_two(a: &FixedValue, b: &FixedValue) -> Option<u32> {
    if a.is_zero() || b.is_zero() {
        return None;
    }
    // a/b = 2^k iff a.numer * 2^b.scale == b.numer * 2^(a.scale) * 2^k.
    if a.numer() % b.numer() != 0 {
        return None;
    }
    let q = a.numer() / b.numer();
    if q <= 0 || q.count_ones() != 1 {
        return None;
    }
    let k = q.trailing_zeros() as i64 + b.scale_exp() as i64 - a.scale_exp() as i64;
    u32::try_from(k).ok()
}

/// Parameters derived from a validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedParams {
    /// Top level index; levels run `0..=l_max` with separators doubling.
    pub l_max: u32,
    /// Per-instance precision target `epsilon / (4 * delta_max * max(1, l_max) * n)`.
    pub eps_prime: Rational,
    /// Rounds per instance: smallest `r` with `2^-r <= eps_prime`.
    pub r_max: u32,
}

/// Derives grid depth, per-instance precision and round count.
///
/// Rejects configurations whose `delta_max / rho0` is not a power of two;
/// the CLI loader rounds `delta_max` up before calling this.
pub fn derive_params(cfg: &ProtocolConfig) -> Result<DerivedParams, CoreError> {
    cfg.validate()?;
    let l_max = ratio_power_of_two(&cfg.delta_max, &cfg.rho0)
        .ok_or_else(|| CoreError::Config("delta_max/rho0 must be a power of two".into()))?;
    // l_max = 0 (delta == rho0) would zero the denominator; clamp to 1.
    let levels = l_max.max(1);
    let denom = cfg.delta_max.to_rational()
        * Rational::from_integer(BigInt::from(4u32 * levels * cfg.n as u32));
    let eps_prime = cfg.epsilon.to_rational() / denom;
    if eps_prime <= Rational::zero() || eps_prime >= Rational::one() {
        return Err(CoreError::Config(format!(
            "eps_prime = {} outside (0, 1); widen epsilon or shrink the grid",
            eps_prime
        )));
    }
    let r_max = ceil_log2_inverse(&eps_prime);
    if r_max > 64 {
        return Err(CoreError::Config(format!(
            "r_max = {r_max} rounds is beyond the supported range (64)"
        )));
    }
    Ok(DerivedParams {
        l_max,
        eps_prime,
        r_max,
    })
}

/// Smallest `r >= 0` with `2^-r <= x`, i.e. `ceil(log2(1/x))` for `0 < x <= 1`.
fn ceil_log2_inverse(x: &Rational) -> u32 {
    let mut r = 0u32;
    let mut pow = Rational::one();
    let one = Rational::one();
    while &pow * x < one {
        pow *= Rational::from_integer(BigInt::from(2u32));
        r += 1;
        if r > 512 {
            break;
        }
    }
    r
}

// ---------------------------------------------------------------------------
// Checkpoint grid
// ---------------------------------------------------------------------------

/// Identifies one agreement instance: checkpoint `k` on `level`, at grid
/// value `k * rho0 * 2^level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CheckpointId {
    pub level: u32,
    pub k: i64,
}

impl CheckpointId {
    /// Grid value of this checkpoint under `cfg`.
    pub fn value(&self, cfg: &ProtocolConfig) -> FixedValue {
        cfg.separator(self.level)
            .mul(&FixedValue::from_int(self.k))
    }
}

/// Inclusive checkpoint index range of `level`: `ceil(s/rho) ..= floor(e/rho)`.
pub fn level_k_range(cfg: &ProtocolConfig, level: u32) -> (i64, i64) {
    let rho = cfg.separator(level);
    (cfg.s_bound.div_ceil(&rho), cfg.e_bound.div_floor(&rho))
}

/// The checkpoints a node with input `v` seeds with 1 at `level`:
/// `{floor(v/rho), floor(v/rho)+1}` clipped to the level's range (a value on
/// the grid takes itself and its right neighbor). Every returned checkpoint
/// is within one separator of `v`.
pub fn checkpoints_for_input(
    v: &FixedValue,
    level: u32,
    cfg: &ProtocolConfig,
) -> Result<Vec<CheckpointId>, CoreError> {
    if *v < cfg.s_bound || *v > cfg.e_bound {
        return Err(CoreError::OutOfRange {
            value: v.to_decimal_string(),
            lo: cfg.s_bound.to_decimal_string(),
            hi: cfg.e_bound.to_decimal_string(),
        });
    }
    let rho = cfg.separator(level);
    let (k_min, k_max) = level_k_range(cfg, level);
    let k0 = v.div_floor(&rho);
    let picks = [k0, k0 + 1];
    Ok(picks
        .into_iter()
        .filter(|k| *k >= k_min && *k <= k_max)
        .map(|k| CheckpointId { level, k })
        .collect())
}
