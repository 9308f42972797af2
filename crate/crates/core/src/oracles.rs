//! Independent reference solutions and estimators used to validate the
//! solver: the closed-form length driven by the recorded curvature history,
//! the one-dimensional circle reduction, the classical area law, strong
//! convergence-order estimation, and the blow-up detector.

use std::f64::consts::{PI, TAU};

use thiserror::Error;

use crate::dynamics::{self, FlowConfig, FlowError, StepError};
use crate::geometry::{self, CurvatureState, Point};
use crate::noise::{self, BrownianPath, NoiseError};
use crate::trajectory::{StopReason, TrajectoryRecord};

/// Fine-to-coarse step ratio of the circle reference integrator.
pub const CIRCLE_REFERENCE_REFINEMENT: usize = 100;

/// Extra halvings between the finest measured step and the reference step in
/// the order estimator; a closer reference biases the fitted slope.
const REFERENCE_EXTRA_LEVELS: u32 = 3;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("history covers [0, {covered}] but t = {t} was requested")]
    HistoryTooShort { covered: f64, t: f64 },
    #[error("reference radius collapsed at t = {t}")]
    ReferenceCollapse { t: f64 },
    #[error("area law requires a noise-free trajectory (sigma = {0})")]
    SigmaNotZero(f64),
    #[error("order estimation needs at least 3 refinement levels, got {0}")]
    TooFewRefinements(u32),
    #[error("order estimation needs at least one seed")]
    NoSeeds,
    #[error("all {0} paths stopped before t_end; no order estimate")]
    AllPathsExcluded(usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
}

/// Closed-form length given the squared-curvature history and the Brownian
/// value:
///
/// ```text
/// L(t) = L₀ · exp( -∫₀ᵗ ∫ f²(r, τ) dr dτ  -  2σπ W(t) )
/// ```
///
/// `history` holds `(τ, ∫f²dr)` samples covering `[0, t]`; the time integral
/// uses the trapezoid rule with linear interpolation at `t`. Because the
/// realized `f` enters, this checks the internal consistency of
/// `(f, L, W)` rather than the curvature dynamics themselves.
pub fn exact_length(
    l0: f64,
    history: &[(f64, f64)],
    w_t: f64,
    sigma: f64,
    t: f64,
) -> Result<f64, OracleError> {
    let covered = history.last().map(|&(tau, _)| tau).unwrap_or(0.0);
    if t > covered + 1e-12 && t > 0.0 {
        return Err(OracleError::HistoryTooShort { covered, t });
    }
    let mut integral = 0.0;
    for pair in history.windows(2) {
        let (t0, g0) = pair[0];
        let (t1, g1) = pair[1];
        if t0 >= t {
            break;
        }
        if t1 <= t {
            integral += 0.5 * (t1 - t0) * (g0 + g1);
        } else {
            // Partial last interval: interpolate g at t.
            let frac = (t - t0) / (t1 - t0);
            let gt = g0 + frac * (g1 - g0);
            integral += 0.5 * (t - t0) * (g0 + gt);
            break;
        }
    }
    Ok(l0 * (-integral - 2.0 * sigma * PI * w_t).exp())
}

/// Pathwise reference for circle data from the one-dimensional radius
/// reduction of the flow.
#[derive(Clone, Debug)]
pub struct CircleReference {
    /// Coarse grid times, starting at 0.
    pub times: Vec<f64>,
    /// Curvature 1/R at the coarse times.
    pub curvature: Vec<f64>,
    /// Length 2πR at the coarse times.
    pub length: Vec<f64>,
}

/// Integrates the radius SDE
///
/// ```text
/// dR = (-1/R + 2σ²π²R) dt - 2πσR dW
/// ```
///
/// with Euler–Maruyama at a step 100× finer than `dt`, consuming the
/// supplied refined path, and returns `(1/R, 2πR)` sampled on the coarse
/// grid. The drift equals `drift_L / 2π` of the full system restricted to
/// circles.
pub fn circle_sde_reference(
    r0: f64,
    sigma: f64,
    path: &BrownianPath,
    dt: f64,
    t_end: f64,
) -> Result<CircleReference, OracleError> {
    if !(r0.is_finite() && r0 > 0.0) {
        return Err(FlowError::InvalidConfig("reference radius must be positive".into()).into());
    }
    let dt_fine = dt / CIRCLE_REFERENCE_REFINEMENT as f64;
    if (path.base_dt() - dt_fine).abs() > 1e-9 * dt_fine {
        return Err(FlowError::BaseDtMismatch { path_dt: path.base_dt(), dt: dt_fine }.into());
    }
    let n_coarse = (t_end / dt + 1e-9).floor() as usize;
    let n_fine = n_coarse * CIRCLE_REFERENCE_REFINEMENT;
    if path.len() < n_fine {
        return Err(FlowError::PathTooShort { available: path.len(), needed: n_fine }.into());
    }

    let mut r = r0;
    let mut times = vec![0.0];
    let mut curvature = vec![1.0 / r0];
    let mut length = vec![TAU * r0];
    for k in 0..n_fine {
        let drift = -1.0 / r + 2.0 * sigma * sigma * PI * PI * r;
        r += dt_fine * drift - 2.0 * PI * sigma * r * path.increments()[k];
        if !(r.is_finite() && r > 0.0) {
            return Err(OracleError::ReferenceCollapse { t: (k + 1) as f64 * dt_fine });
        }
        if (k + 1) % CIRCLE_REFERENCE_REFINEMENT == 0 {
            times.push(((k + 1) / CIRCLE_REFERENCE_REFINEMENT) as f64 * dt);
            curvature.push(1.0 / r);
            length.push(TAU * r);
        }
    }
    Ok(CircleReference { times, curvature, length })
}

/// Residuals `|A(t) - (A(0) - 2πt)|` of the classical area law along a
/// noise-free trajectory, with areas taken from curves reconstructed at
/// resolution 4N. External oracle (not from the moving-boundary
/// formulation itself).
pub fn deterministic_area_law(record: &TrajectoryRecord) -> Result<Vec<(f64, f64)>, OracleError> {
    if record.config.sigma != 0.0 && record.config.scheme != dynamics::Scheme::Deterministic {
        return Err(OracleError::SigmaNotZero(record.config.sigma));
    }
    let mut out = Vec::with_capacity(record.snapshots.len());
    let mut a0 = 0.0;
    for (i, snap) in record.snapshots.iter().enumerate() {
        let state = CurvatureState::new(snap.curvature.clone(), snap.length, snap.t)?;
        let rebuilt = geometry::reconstruct_curve(&state, Point::ORIGIN, 0.0, 4 * state.grid_size());
        // Drop the duplicate endpoint and close the polygon for the shoelace
        // area.
        let mut pts = rebuilt.points().to_vec();
        pts.pop();
        let area = geometry::enclosed_area(&geometry::Curve::closed(pts)?)?;
        if i == 0 {
            a0 = area;
        }
        out.push((snap.t, (area - (a0 - TAU * snap.t)).abs()));
    }
    Ok(out)
}

/// Least-squares estimate of the pathwise convergence order of the
/// configured scheme.
#[derive(Clone, Debug)]
pub struct OrderEstimate {
    /// Measured step sizes, strictly decreasing.
    pub dts: Vec<f64>,
    /// Seed-averaged pathwise errors against the fine reference.
    pub errors: Vec<f64>,
    /// Log-log slope fitted by least squares.
    pub fitted_order: f64,
    /// Seeds whose paths stopped before `t_end` and were excluded.
    pub excluded_seeds: Vec<u64>,
}

/// Measures the strong convergence order of `config.scheme` on `initial`.
///
/// For each seed one fine path is sampled and every run consumes a coarsened
/// view of it: the measured levels use `dt/2^j` for `j = 0..refinements`,
/// the reference runs `2^3` further halvings below the finest level. The
/// per-level error is the sup over shared coarse-grid times of
/// `|L - L_ref| + max_r |f - f_ref|`, averaged over seeds; paths that stop
/// early are excluded and reported.
pub fn estimate_strong_order(
    initial: &CurvatureState,
    config: &FlowConfig,
    seeds: &[u64],
    refinements: u32,
) -> Result<OrderEstimate, OracleError> {
    if refinements < 3 {
        return Err(OracleError::TooFewRefinements(refinements));
    }
    if seeds.is_empty() {
        return Err(OracleError::NoSeeds);
    }
    config.validate()?;

    let levels = refinements as usize;
    let ref_level = refinements + REFERENCE_EXTRA_LEVELS;
    let dt_ref = config.dt / (1u64 << ref_level) as f64;
    let n_base = config.step_count();
    let n_ref = n_base * (1usize << ref_level);

    let mut sums = vec![0.0; levels];
    let mut excluded_seeds = Vec::new();

    'seeds: for &seed in seeds {
        let fine = noise::sample_path(seed, dt_ref, n_ref)?;
        let reference = match integrate_at_base_times(initial, config, &fine, 1usize << ref_level) {
            Ok(states) => states,
            Err(StepError::NonFinite { t }) => return Err(FlowError::NonFinite { t }.into()),
            Err(StepError::LengthCollapse { .. }) => {
                excluded_seeds.push(seed);
                continue;
            }
        };

        let mut level_errors = Vec::with_capacity(levels);
        for j in 0..levels {
            let factor = 1usize << (ref_level as usize - j);
            let coarse_path = fine.coarsen(factor)?;
            let states = match integrate_at_base_times(initial, config, &coarse_path, 1usize << j) {
                Ok(states) => states,
                Err(StepError::NonFinite { t }) => return Err(FlowError::NonFinite { t }.into()),
                Err(StepError::LengthCollapse { .. }) => {
                    excluded_seeds.push(seed);
                    continue 'seeds;
                }
            };
            let mut err: f64 = 0.0;
            for (a, b) in states.iter().zip(&reference).skip(1) {
                let df = a
                    .curvature
                    .iter()
                    .zip(&b.curvature)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                err = err.max((a.length - b.length).abs() + df);
            }
            level_errors.push(err);
        }
        for (sum, err) in sums.iter_mut().zip(&level_errors) {
            *sum += err;
        }
    }

    let included = seeds.len() - excluded_seeds.len();
    if included == 0 {
        return Err(OracleError::AllPathsExcluded(seeds.len()));
    }
    let errors: Vec<f64> = sums.iter().map(|s| s / included as f64).collect();
    let dts: Vec<f64> = (0..levels).map(|j| config.dt / (1u64 << j) as f64).collect();
    let fitted_order = log_log_slope(&dts, &errors);
    Ok(OrderEstimate { dts, errors, fitted_order, excluded_seeds })
}

/// Runs the configured scheme at `path.base_dt()`, returning the states at
/// multiples of the base step (`stride` fine steps apart), starting with the
/// initial state.
fn integrate_at_base_times(
    initial: &CurvatureState,
    config: &FlowConfig,
    path: &BrownianPath,
    stride: usize,
) -> Result<Vec<CurvatureState>, StepError> {
    let mut cfg = config.clone();
    cfg.dt = path.base_dt();
    let mut state = initial.clone();
    let mut out = vec![state.clone()];
    for (k, &dw) in path.increments().iter().enumerate() {
        state = dynamics::advance(&state, &cfg, dw)?;
        if (k + 1) % stride == 0 {
            out.push(state.clone());
        }
    }
    Ok(out)
}

fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(f64::MIN_POSITIVE).ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Checks the state against the configured stopping thresholds: curvature
/// sup-norm above `blowup_f_max`, or length outside
/// `(blowup_l_min, blowup_l_max)`.
pub fn detect_blowup(state: &CurvatureState, config: &FlowConfig) -> Option<StopReason> {
    if state.sup_abs_curvature() > config.blowup_f_max {
        Some(StopReason::CurvatureBlowup)
    } else if state.length <= config.blowup_l_min {
        Some(StopReason::LengthCollapse)
    } else if state.length >= config.blowup_l_max {
        Some(StopReason::LengthExplosion)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Scheme;

    #[test]
    fn exact_length_flat_history_is_geometric() {
        let sigma = 0.25;
        let history = [(0.0, 0.0), (1.0, 0.0)];
        for w in [-0.3, 0.0, 1.7] {
            let l = exact_length(2.0, &history, w, sigma, 1.0).unwrap();
            assert!((l - 2.0 * (-2.0 * sigma * PI * w).exp()).abs() <= 1e-14);
        }
    }

    #[test]
    fn exact_length_circle_history_matches_closed_form() {
        // Noise-free circle: ∫f²dr = 1/(R₀² - 2τ), so the formula collapses
        // to 2π√(R₀² - 2t).
        let r0: f64 = 1.0;
        let t = 0.4;
        let samples = 4000;
        let history: Vec<(f64, f64)> = (0..=samples)
            .map(|i| {
                let tau = t * i as f64 / samples as f64;
                (tau, 1.0 / (r0 * r0 - 2.0 * tau))
            })
            .collect();
        let l = exact_length(TAU * r0, &history, 0.0, 0.0, t).unwrap();
        let exact = TAU * (r0 * r0 - 2.0 * t).sqrt();
        assert!((l - exact).abs() <= 1e-6, "{l} vs {exact}");
    }

    #[test]
    fn exact_length_at_time_zero() {
        let l = exact_length(3.5, &[(0.0, 1.0)], 0.0, 0.5, 0.0).unwrap();
        assert_eq!(l, 3.5);
    }

    #[test]
    fn exact_length_demands_coverage() {
        assert!(exact_length(1.0, &[(0.0, 1.0), (0.5, 1.0)], 0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn circle_reference_matches_ode_without_noise() {
        let dt = 1e-5;
        let t_end = 0.01;
        let path = noise::sample_path(3, dt / 100.0, 100 * 1000).unwrap();
        let reference = circle_sde_reference(1.0, 0.0, &path, dt, t_end).unwrap();
        for (i, &t) in reference.times.iter().enumerate() {
            let exact = (1.0f64 - 2.0 * t).sqrt();
            assert!((reference.length[i] - TAU * exact).abs() <= 1e-6 * TAU);
            assert!((reference.curvature[i] - 1.0 / exact).abs() <= 1e-6);
        }
    }

    #[test]
    fn circle_reference_drift_matches_length_drift() {
        // -1/R + 2σ²π²R at R = 1 equals drift_L/(2π) of the full system on
        // the unit circle.
        let sigma = 0.1;
        let drift_r = -1.0 + 2.0 * sigma * sigma * PI * PI;
        let state = CurvatureState::new(vec![1.0; 16], TAU, 0.0).unwrap();
        let c = dynamics::ito_coefficients(&state, sigma).unwrap();
        assert!((drift_r - c.drift_l / TAU).abs() <= 1e-14);
        assert!((drift_r + 0.80261).abs() <= 1e-5);
    }

    #[test]
    fn circle_reference_validates_path() {
        let path = noise::sample_path(3, 1e-5, 100).unwrap();
        // base_dt should be dt/100 = 1e-7.
        assert!(circle_sde_reference(1.0, 0.1, &path, 1e-5, 0.01).is_err());
    }

    #[test]
    fn detect_blowup_examples() {
        let config = FlowConfig::new(0.0, 16, 1e-3, 1.0, Scheme::EulerMaruyama);
        let fine = CurvatureState::new(vec![1.0; 16], TAU, 0.0).unwrap();
        assert_eq!(detect_blowup(&fine, &config), None);

        let mut spiky = vec![1.0; 16];
        spiky[3] = 1e4;
        let spike = CurvatureState::new(spiky, TAU, 0.0).unwrap();
        assert_eq!(detect_blowup(&spike, &config), Some(StopReason::CurvatureBlowup));

        let short = CurvatureState::new(vec![1.0; 16], 1e-4, 0.0).unwrap();
        assert_eq!(detect_blowup(&short, &config), Some(StopReason::LengthCollapse));

        let long = CurvatureState::new(vec![1.0; 16], 2e3, 0.0).unwrap();
        assert_eq!(detect_blowup(&long, &config), Some(StopReason::LengthExplosion));
    }

    #[test]
    fn detect_blowup_monotone_in_thresholds() {
        use rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        for _ in 0..200 {
            let f = uniform() * 20.0;
            let l = uniform() * 20.0 + 1e-6;
            let state = CurvatureState::new(vec![f; 16], l, 0.0).unwrap();
            let mut tight = FlowConfig::new(0.0, 16, 1e-3, 1.0, Scheme::EulerMaruyama);
            tight.blowup_f_max = 1.0 + uniform() * 5.0;
            tight.blowup_l_min = uniform() * 0.5 + 1e-9;
            tight.blowup_l_max = 1.0 + uniform() * 10.0;
            let mut loose = tight.clone();
            loose.blowup_f_max *= 2.0;
            loose.blowup_l_min /= 2.0;
            loose.blowup_l_max *= 2.0;
            if detect_blowup(&state, &tight).is_none() {
                assert_eq!(detect_blowup(&state, &loose), None);
            }
        }
    }
}
