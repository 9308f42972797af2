//! Cutoff operator used to localize the length dependence of the
//! coefficient fields: values of magnitude below `1/n` are pushed out to
//! `sign/n`, larger values pass through. With the length replaced by its
//! cutoff, the `1/L²` diffusion coefficient stays bounded by `n²`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, CoefficientFields, FlowError};
use crate::geometry::CurvatureState;

#[derive(Debug, Error)]
pub enum TruncationError {
    #[error("truncation level must be at least 1, got {0}")]
    LevelTooSmall(u32),
}

/// A positive truncation level `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TruncationLevel {
    n: u32,
}

impl TruncationLevel {
    pub fn new(n: u32) -> Result<Self, TruncationError> {
        if n == 0 {
            return Err(TruncationError::LevelTooSmall(n));
        }
        Ok(TruncationLevel { n })
    }

    pub fn get(&self) -> u32 {
        self.n
    }

    /// `1/n`, the lower end of the untruncated band.
    pub fn floor(&self) -> f64 {
        1.0 / self.n as f64
    }
}

/// The cutoff map: `sign(m)/n` for `0 < |m| < 1/n`, identity for
/// `|m| >= 1/n`. The value at `m = 0` is defined as `1/n` (the limit from
/// above), so `|cutoff(n, m)| >= 1/n` everywhere.
pub fn cutoff(level: TruncationLevel, m: f64) -> f64 {
    let floor = level.floor();
    if m == 0.0 {
        floor
    } else if m.abs() < floor {
        m.signum() * floor
    } else {
        m
    }
}

/// Itô coefficient fields with every occurrence of the length replaced by
/// `cutoff(n, L)`.
pub fn truncated_coefficients(
    state: &CurvatureState,
    sigma: f64,
    level: TruncationLevel,
) -> Result<CoefficientFields, FlowError> {
    dynamics::ito_coefficients_at_length(state, sigma, cutoff(level, state.length))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha12Rng;
    use rand_core::{RngCore, SeedableRng};

    fn lvl(n: u32) -> TruncationLevel {
        TruncationLevel::new(n).unwrap()
    }

    /// Uniform draw in [0, hi).
    fn uniform(rng: &mut ChaCha12Rng, hi: f64) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * hi
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoff(lvl(10), 0.05), 0.1);
        assert_eq!(cutoff(lvl(10), 5.0), 5.0);
        assert_eq!(cutoff(lvl(10), -0.05), -0.1);
        assert_eq!(cutoff(lvl(10), 0.0), 0.1);
        assert_eq!(cutoff(lvl(10), 0.1), 0.1);
    }

    #[test]
    fn cutoff_linear_growth_and_lipschitz() {
        // The cutoff acts on lengths, so the property domain is m >= 0
        // (where the map is continuous; across the sign jump at 0 the
        // Lipschitz bound cannot hold).
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for n in [1u32, 2, 10, 100] {
            let level = lvl(n);
            for _ in 0..10_000 {
                let m1 = uniform(&mut rng, 50.0);
                let m2 = uniform(&mut rng, 0.5);
                assert!(cutoff(level, m1).abs() <= 1.0 + m1.abs());
                assert!(cutoff(level, m2).abs() <= 1.0 + m2.abs());
                assert!((cutoff(level, m1) - cutoff(level, m2)).abs() <= (m1 - m2).abs() + 1e-15);
            }
            // Boundary values.
            assert!(cutoff(level, 0.0).abs() <= 1.0);
            assert!((cutoff(level, 0.0) - cutoff(level, level.floor())).abs() <= 0.0);
        }
    }

    #[test]
    fn level_zero_rejected() {
        assert!(TruncationLevel::new(0).is_err());
    }

    #[test]
    fn truncation_is_identity_above_floor() {
        let state = CurvatureState::new(vec![1.0; 16], 2.0, 0.0).unwrap();
        let level = lvl(10);
        let plain = dynamics::ito_coefficients(&state, 0.2).unwrap();
        let truncated = truncated_coefficients(&state, 0.2, level).unwrap();
        assert_eq!(plain.drift_f, truncated.drift_f);
        assert_eq!(plain.drift_l, truncated.drift_l);
        assert_eq!(plain.diff_f, truncated.diff_f);
        assert_eq!(plain.diff_l, truncated.diff_l);
    }

    #[test]
    fn truncation_clamps_short_lengths() {
        let n = 10u32;
        let short = CurvatureState::new(vec![1.0; 16], 1.0 / (2.0 * n as f64), 0.0).unwrap();
        let clamped = CurvatureState::new(vec![1.0; 16], 1.0 / n as f64, 0.0).unwrap();
        let truncated = truncated_coefficients(&short, 0.3, lvl(n)).unwrap();
        let reference = dynamics::ito_coefficients(&clamped, 0.3).unwrap();
        // Identical coefficient fields: the cutoff value is exactly 1/n.
        assert_eq!(truncated.drift_f, reference.drift_f);
        assert_eq!(truncated.diff_f, reference.diff_f);
        assert_eq!(truncated.drift_l, reference.drift_l);
        assert_eq!(truncated.diff_l, reference.diff_l);
    }

    #[test]
    fn truncation_stabilizes_for_large_n() {
        let state = CurvatureState::new(vec![0.5; 16], 0.7, 0.0).unwrap();
        let plain = dynamics::ito_coefficients(&state, 0.1).unwrap();
        // Any n > 1/L leaves the state untouched.
        for n in [2u32, 10, 1000] {
            let truncated = truncated_coefficients(&state, 0.1, lvl(n)).unwrap();
            assert_eq!(plain.drift_f, truncated.drift_f);
        }
    }
}
