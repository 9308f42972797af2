//! Seeded Brownian-motion driver. Every scheme and every refinement level
//! consumes increments from the same recorded path, so strong-error and
//! Stratonovich-vs-Itô comparisons are pathwise.
//!
//! Increments are generated by Box–Muller over `ChaCha12` 64-bit draws
//! (bit 63..11 mapped to the unit interval), so a `(seed, base_dt, count)`
//! triple regenerates bit-identical values on any platform. Ensemble members
//! use seeds `base_seed + member_index`.

use std::io::{Read, Write};

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"BMPATH01";

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("base_dt must be positive and finite, got {0}")]
    InvalidBaseDt(f64),
    #[error("increment count must be at least 1")]
    EmptyCount,
    #[error("coarsening factor must be at least 1")]
    ZeroFactor,
    #[error("factor {factor} does not divide increment count {count}")]
    NonDivisorFactor { factor: usize, count: usize },
    #[error("path file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A recorded Brownian path: Gaussian increments with variance `base_dt`,
/// fully determined by `(seed, base_dt, count)`. Partial sums define `W` at
/// grid times with `W(0) = 0`. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    seed: u64,
    base_dt: f64,
    increments: Vec<f64>,
}

/// Samples `count` increments of a standard Brownian motion at spacing
/// `base_dt`.
pub fn sample_path(seed: u64, base_dt: f64, count: usize) -> Result<BrownianPath, NoiseError> {
    if !(base_dt.is_finite() && base_dt > 0.0) {
        return Err(NoiseError::InvalidBaseDt(base_dt));
    }
    if count == 0 {
        return Err(NoiseError::EmptyCount);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scale = base_dt.sqrt();
    let mut increments = Vec::with_capacity(count);
    while increments.len() < count {
        let (z0, z1) = gaussian_pair(&mut rng);
        increments.push(scale * z0);
        if increments.len() < count {
            increments.push(scale * z1);
        }
    }
    Ok(BrownianPath { seed, base_dt, increments })
}

impl BrownianPath {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base_dt(&self) -> f64 {
        self.base_dt
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// `W` at the grid times `0, base_dt, 2·base_dt, …` (length `len + 1`,
    /// starting at 0).
    pub fn cumulative(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.increments.len() + 1);
        w.push(0.0);
        let mut acc = 0.0;
        for &dw in &self.increments {
            acc += dw;
            w.push(acc);
        }
        w
    }

    /// Sums consecutive increments in blocks of `factor`. The coarse path's
    /// `W` coincides with the fine path's `W` at shared grid times (block
    /// sums use balanced trees, so coarsening by 2 twice is bit-identical to
    /// coarsening by 4).
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath, NoiseError> {
        if factor == 0 {
            return Err(NoiseError::ZeroFactor);
        }
        if self.increments.len() % factor != 0 {
            return Err(NoiseError::NonDivisorFactor {
                factor,
                count: self.increments.len(),
            });
        }
        let increments = self
            .increments
            .chunks(factor)
            .map(balanced_sum)
            .collect();
        Ok(BrownianPath {
            seed: self.seed,
            base_dt: self.base_dt * factor as f64,
            increments,
        })
    }

    /// Binary dump: 24-byte header (magic `BMPATH01`, seed, count as
    /// little-endian u64) followed by the increments as little-endian f64.
    /// `base_dt` is not part of the header; replay supplies it.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), NoiseError> {
        w.write_all(MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.increments.len() as u64).to_le_bytes())?;
        for &v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, base_dt: f64) -> Result<BrownianPath, NoiseError> {
        if !(base_dt.is_finite() && base_dt > 0.0) {
            return Err(NoiseError::InvalidBaseDt(base_dt));
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NoiseError::Corrupt("bad magic".into()));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let seed = u64::from_le_bytes(buf);
        r.read_exact(&mut buf)?;
        let count = u64::from_le_bytes(buf) as usize;
        if count == 0 {
            return Err(NoiseError::Corrupt("zero increment count".into()));
        }
        let mut increments = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            increments.push(f64::from_le_bytes(buf));
        }
        Ok(BrownianPath { seed, base_dt, increments })
    }
}

/// One Box–Muller draw: two independent standard normals.
fn gaussian_pair(rng: &mut ChaCha12Rng) -> (f64, f64) {
    let u1 = unit_open(rng.next_u64());
    let u2 = unit_open(rng.next_u64());
    let radius = (-2.0 * u1.ln()).sqrt();
    let angle = std::f64::consts::TAU * u2;
    (radius * angle.cos(), radius * angle.sin())
}

/// Maps a u64 to (0, 1]: the top 53 bits plus one, scaled by 2^-53. The +1
/// keeps ln() away from zero.
fn unit_open(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sum with a balanced split so that block sums compose exactly under
/// power-of-two coarsening.
fn balanced_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (lo, hi) = xs.split_at(n / 2);
            balanced_sum(lo) + balanced_sum(hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_path(42, 1e-3, 100_000).unwrap();
        let b = sample_path(42, 1e-3, 100_000).unwrap();
        assert_eq!(a.increments(), b.increments());
        assert_ne!(
            a.increments()[..8],
            sample_path(43, 1e-3, 8).unwrap().increments()[..8]
        );
    }

    #[test]
    fn increment_variance_matches_base_dt() {
        let base_dt = 1e-3;
        let path = sample_path(42, base_dt, 100_000).unwrap();
        let n = path.len() as f64;
        let mean = path.increments().iter().sum::<f64>() / n;
        let var = path.increments().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(
            var >= 0.97 * base_dt && var <= 1.03 * base_dt,
            "sample variance {var}"
        );
        assert!(mean.abs() <= 3.0 * (base_dt / n).sqrt(), "sample mean {mean}");
    }

    #[test]
    fn increments_uncorrelated_at_lag_one() {
        let path = sample_path(7, 1e-3, 100_000).unwrap();
        let xs = path.increments();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let cov = xs
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (n - 1.0);
        assert!((cov / var).abs() <= 0.02, "lag-1 autocorrelation {}", cov / var);
    }

    #[test]
    fn cumulative_starts_at_zero() {
        let path = sample_path(1, 0.5, 10).unwrap();
        let w = path.cumulative();
        assert_eq!(w[0], 0.0);
        assert_eq!(w.len(), 11);
    }

    #[test]
    fn coarsen_identity_and_composition() {
        let path = sample_path(3, 1e-4, 64).unwrap();
        let same = path.coarsen(1).unwrap();
        assert_eq!(path, same);

        let twice = path.coarsen(2).unwrap().coarsen(2).unwrap();
        let once = path.coarsen(4).unwrap();
        assert_eq!(twice.increments(), once.increments());
        assert_eq!(twice.base_dt(), once.base_dt());
    }

    #[test]
    fn coarsening_preserves_terminal_value() {
        let path = sample_path(9, 1e-4, 1024).unwrap();
        let fine_w = *path.cumulative().last().unwrap();
        for factor in [2, 4, 8, 256] {
            let coarse = path.coarsen(factor).unwrap();
            let coarse_w = *coarse.cumulative().last().unwrap();
            assert!(
                (fine_w - coarse_w).abs() <= 1e-13 * fine_w.abs().max(1.0),
                "factor {factor}: {fine_w} vs {coarse_w}"
            );
        }
    }

    #[test]
    fn coarsen_rejects_non_divisors() {
        let path = sample_path(3, 1e-4, 10).unwrap();
        assert!(matches!(
            path.coarsen(3),
            Err(NoiseError::NonDivisorFactor { factor: 3, count: 10 })
        ));
        assert!(matches!(path.coarsen(0), Err(NoiseError::ZeroFactor)));
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(matches!(sample_path(0, 0.0, 4), Err(NoiseError::InvalidBaseDt(_))));
        assert!(matches!(sample_path(0, -1.0, 4), Err(NoiseError::InvalidBaseDt(_))));
        assert!(matches!(sample_path(0, 1e-3, 0), Err(NoiseError::EmptyCount)));
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let path = sample_path(1234, 2e-3, 777).unwrap();
        let mut buf = Vec::new();
        path.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(buf.len(), 24 + 8 * 777);
        let back = BrownianPath::read_binary(&buf[..], 2e-3).unwrap();
        assert_eq!(path, back);
    }

    #[test]
    fn binary_rejects_garbage() {
        let garbage = b"NOTAPATH\x00\x00\x00\x00\x00\x00\x00\x00";
        assert!(BrownianPath::read_binary(&garbage[..], 1e-3).is_err());
    }
}
