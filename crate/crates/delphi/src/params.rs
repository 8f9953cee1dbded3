//! Deployment planning: sizing the range bound and predicting traffic.
//!
//! The protocol needs an a-priori bound `delta_max` on the honest input
//! spread. Operators size it from a fitted extreme-value model of the
//! spread: pick a security level `lambda`, accept a `2^-lambda` chance of
//! the bound being exceeded per invocation, and read the corresponding
//! quantile off the model. Gumbel tails (light: normal- or gamma-like
//! feeds) grow linearly in `lambda`; Frechet tails (heavy: Pareto-like
//! feeds) grow like `2^(lambda/alpha)`, which is the quantitative reason
//! heavy-tailed feeds need dramatically wider bounds.
//!
//! Planning is not protocol arithmetic: double-precision floats are fine
//! here, and results are rounded up to the power-of-two grid the protocol
//! configuration requires.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{CoreError, DerivedParams, FixedValue, ProtocolConfig};
use crate::encoding::POINT_RECORD_BYTES;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParamsError {
    #[error("invalid noise model: {0}")]
    InvalidModel(&'static str),
}

/// Fitted extreme-value model of the honest input spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Light-tailed spread; quantile `Q(p) = -ln(-ln p)`.
    GumbelRange { location: f64, scale: f64 },
    /// Heavy-tailed spread; quantile `Q(p) = (-ln p)^(-1/alpha)`.
    FrechetRange {
        location: f64,
        scale: f64,
        alpha: f64,
    },
}

impl NoiseModel {
    fn validate(&self) -> Result<(), ParamsError> {
        let scale = match self {
            NoiseModel::GumbelRange { scale, .. } => *scale,
            NoiseModel::FrechetRange { scale, alpha, .. } => {
                if !alpha.is_finite() || *alpha <= 0.0 {
                    return Err(ParamsError::InvalidModel("alpha must be positive"));
                }
                *scale
            }
        };
        if !scale.is_finite() || scale <= 0.0 {
            return Err(ParamsError::InvalidModel("scale must be positive"));
        }
        Ok(())
    }

    /// Quantile at `1 - tail`. Evaluated through `ln_1p` so security levels
    /// past the 2^-52 resolution of `1 - tail` still compute exactly.
    pub fn quantile_upper(&self, tail: f64) -> Result<f64, ParamsError> {
        self.validate()?;
        if !(tail > 0.0 && tail < 1.0) {
            return Err(ParamsError::InvalidModel("tail must be in (0, 1)"));
        }
        // -ln(p) for p = 1 - tail, without the catastrophic 1 - tail rounding
        let neg_ln_p = -(-tail).ln_1p();
        Ok(match self {
            NoiseModel::GumbelRange { location, scale } => location + scale * -neg_ln_p.ln(),
            NoiseModel::FrechetRange {
                location,
                scale,
                alpha,
            } => location + scale * neg_ln_p.powf(-1.0 / alpha),
        })
    }
}

/// Spread bound that holds except with probability `2^-lambda_bits`.
pub fn derive_delta(model: &NoiseModel, lambda_bits: u32) -> Result<f64, ParamsError> {
    if lambda_bits == 0 {
        return Err(ParamsError::InvalidModel("lambda must be at least 1"));
    }
    model.quantile_upper((-(lambda_bits as f64)).exp2())
}

/// Same bound from an explicit tail probability (e.g. `1e-10`).
pub fn derive_delta_tail(model: &NoiseModel, tail: f64) -> Result<f64, ParamsError> {
    model.quantile_upper(tail)
}

/// Smallest power-of-two multiple of `rho0` at or above `delta`, i.e. the
/// nearest configuration-legal `delta_max`.
pub fn delta_to_grid(delta: f64, rho0: &FixedValue) -> Result<FixedValue, CoreError> {
    if !delta.is_finite() || delta <= 0.0 {
        return Err(CoreError::Config(
            "spread bound must be positive and finite".into(),
        ));
    }
    assert!(rho0.numer() > 0);
    let mut candidate = *rho0;
    for _ in 0..64 {
        if candidate.to_f64() >= delta {
            return Ok(candidate);
        }
        candidate = candidate.mul_pow2(1);
    }
    Err(CoreError::Config(
        "spread bound exceeds 2^64 separators".into(),
    ))
}

/// Cap on distinct seeded checkpoints per level: the spread covers at most
/// `2 * delta/rho0` cells and honest nodes only seed `n - t` positions.
/// Purely diagnostic; the protocol never consults it.
pub fn level_seed_bound(cfg: &ProtocolConfig) -> u64 {
    let cells = 2 * cfg.delta_max.div_floor(&cfg.rho0).max(1) as u64;
    cells.min((cfg.n - cfg.t) as u64)
}

/// Predicted traffic for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub bits_per_round: u64,
    pub total_bits: u64,
    pub rounds: u32,
}

/// Per-checkpoint message multiplicity per round: the round opener, at most
/// two amplifications, and one confirmation.
const MSGS_PER_ACTIVE: u64 = 4;

/// Bits per logical message, anchored to the explicit point record layout.
pub const RECORD_BITS: u64 = 8 * POINT_RECORD_BYTES as u64;

/// Traffic prediction from the active-checkpoint law: per round, every node
/// addresses every other about `min(delta/rho0, n * levels)` live
/// checkpoints. Used to sanity-check measured counters within a constant
/// factor, not as an exact accounting.
pub fn estimate_complexity(
    cfg: &ProtocolConfig,
    params: &DerivedParams,
    delta_runtime: &FixedValue,
) -> ComplexityEstimate {
    let n = cfg.n as u64;
    let spread_cells = delta_runtime.div_ceil(&cfg.rho0).max(1) as u64;
    let ladder = n * params.l_max.max(1) as u64;
    let active = spread_cells.min(ladder);
    let bits_per_round = MSGS_PER_ACTIVE * n * n * active * RECORD_BITS;
    ComplexityEstimate {
        bits_per_round,
        total_bits: bits_per_round * params.r_max as u64,
        rounds: params.r_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::derive_params;

    fn gumbel() -> NoiseModel {
        NoiseModel::GumbelRange {
            location: 0.0,
            scale: 1.0,
        }
    }

    fn frechet() -> NoiseModel {
        NoiseModel::FrechetRange {
            location: 0.0,
            scale: 29.3,
            alpha: 4.41,
        }
    }

    #[test]
    fn gumbel_quantile_at_thirty_bits() {
        // closed form: -ln(-ln(1 - 2^-30)) ~= 30 ln 2
        let d = derive_delta(&gumbel(), 30).unwrap();
        let expect = 30.0 * std::f64::consts::LN_2;
        assert!((d - expect).abs() < 0.01, "got {d}, want about {expect}");
    }

    #[test]
    fn gumbel_grows_linearly_in_lambda() {
        let d30 = derive_delta(&gumbel(), 30).unwrap();
        let d60 = derive_delta(&gumbel(), 60).unwrap();
        let ratio = d60 / d30;
        assert!((ratio - 2.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn frechet_doubles_every_alpha_bits() {
        // Q(2^-(lambda+alpha)) / Q(2^-lambda) = 2^(alpha/alpha) = 2
        let model = NoiseModel::FrechetRange {
            location: 0.0,
            scale: 1.0,
            alpha: 4.0,
        };
        let a = derive_delta(&model, 20).unwrap();
        let b = derive_delta(&model, 24).unwrap();
        let ratio = b / a;
        assert!((ratio - 2.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn frechet_reference_fit_documented() {
        // The published sizing for this fit quotes a 2000-unit bound at a
        // 1e-10 tail; a direct quantile inversion gives ~5.4e3. The gap is
        // recorded here and in the acceptance suite, not asserted away.
        let d = derive_delta_tail(&frechet(), 1e-10).unwrap();
        assert!((5000.0..6000.0).contains(&d), "quantile moved: {d}");
    }

    #[test]
    fn deep_tails_do_not_collapse_to_one() {
        // lambda past f64's 1 - 2^-52 resolution still differentiates
        let d100 = derive_delta(&gumbel(), 100).unwrap();
        let d101 = derive_delta(&gumbel(), 101).unwrap();
        assert!(d101 > d100 && d100 > 69.0 && d100.is_finite());
    }

    #[test]
    fn monotone_in_lambda_and_scale() {
        let mut prev = 0.0;
        for lambda in [1, 2, 5, 10, 20, 40, 80] {
            let d = derive_delta(&gumbel(), lambda).unwrap();
            assert!(d > prev || lambda == 1);
            prev = d;
        }
        let wide = NoiseModel::GumbelRange {
            location: 0.0,
            scale: 3.0,
        };
        assert!(derive_delta(&wide, 30).unwrap() > derive_delta(&gumbel(), 30).unwrap());
    }

    #[test]
    fn model_validation_rejects_bad_parameters() {
        let bad_scale = NoiseModel::GumbelRange {
            location: 0.0,
            scale: 0.0,
        };
        assert!(derive_delta(&bad_scale, 30).is_err());
        let bad_alpha = NoiseModel::FrechetRange {
            location: 0.0,
            scale: 1.0,
            alpha: -1.0,
        };
        assert!(derive_delta(&bad_alpha, 30).is_err());
        assert!(derive_delta(&gumbel(), 0).is_err());
        assert!(derive_delta_tail(&gumbel(), 0.0).is_err());
        assert!(derive_delta_tail(&gumbel(), 1.0).is_err());
    }

    #[test]
    fn grid_rounding_picks_next_power_of_two_multiple() {
        let two = FixedValue::from_int(2);
        assert_eq!(delta_to_grid(20.79, &two).unwrap(), FixedValue::from_int(32));
        assert_eq!(delta_to_grid(16.0, &two).unwrap(), FixedValue::from_int(16));
        assert_eq!(delta_to_grid(0.5, &two).unwrap(), two);
        assert_eq!(
            delta_to_grid(3.0, &FixedValue::parse_decimal("0.5").unwrap()).unwrap(),
            FixedValue::from_int(4)
        );
        assert!(delta_to_grid(-1.0, &two).is_err());
    }

    fn cfg(n: u16, ratio: i64) -> ProtocolConfig {
        ProtocolConfig {
            n,
            t: (n - 1) / 3,
            s_bound: FixedValue::from_int(0),
            e_bound: FixedValue::from_int(2 * 2 * ratio),
            rho0: FixedValue::from_int(2),
            delta_max: FixedValue::from_int(2 * ratio),
            epsilon: FixedValue::from_int(2),
        }
    }

    #[test]
    fn tight_spread_estimate_scales_with_n_squared() {
        let small = cfg(4, 8);
        let big = cfg(8, 8);
        let rho = FixedValue::from_int(2);
        let a = estimate_complexity(&small, &derive_params(&small).unwrap(), &rho);
        let b = estimate_complexity(&big, &derive_params(&big).unwrap(), &rho);
        assert_eq!(b.bits_per_round, 4 * a.bits_per_round);
    }

    #[test]
    fn wide_spread_estimate_clamps_at_ladder_size() {
        let c = cfg(4, 1024);
        let p = derive_params(&c).unwrap();
        let est = estimate_complexity(&c, &p, &c.delta_max);
        let ladder = 4 * p.l_max as u64;
        assert!((c.delta_max.div_ceil(&c.rho0) as u64) > ladder);
        assert_eq!(
            est.bits_per_round,
            MSGS_PER_ACTIVE * 16 * ladder * RECORD_BITS
        );
        assert_eq!(est.total_bits, est.bits_per_round * est.rounds as u64);
    }

    #[test]
    fn seed_bound_takes_the_smaller_cap() {
        let c = cfg(16, 8); // 2*delta/rho0 = 16, n - t = 11
        assert_eq!(level_seed_bound(&c), 11);
        let c = cfg(16, 2); // 2*delta/rho0 = 4 < 11
        assert_eq!(level_seed_bound(&c), 4);
    }
}
