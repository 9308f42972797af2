//! Drift/diffusion coefficient fields of the rescaled (curvature, length)
//! system in both Stratonovich and Itô form, the time-stepping schemes that
//! advance the state, and the deterministic general-speed moving-boundary
//! right-hand side.
//!
//! With `f` the curvature profile on the unit torus (grid `r_j = j/N`) and
//! `L` the length, the Itô system is
//!
//! ```text
//! df = [ (2σ²π²r² + 1/L²) f_rr - 4σ²πrL f f_r + 2σ²π²r f_r
//!        - r f_r ∫f²dr + f³ + σ²f³L² - σ²πf²L ] dt
//!      + σ (f²L - 2πr f_r) dW
//! dL = L (2σ²π² - ∫f²dr) dt - 2σπL dW
//! ```
//!
//! and the Stratonovich form drops every σ²-correction from the drift while
//! keeping the same diffusion. The coefficient `r` is the plain coordinate
//! value in [0, 1), not periodized.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CurvatureState;
use crate::noise::BrownianPath;
use crate::oracles;
use crate::trajectory::{Snapshot, SnapshotDiagnostics, StopReason, TrajectoryRecord};
use crate::truncation::{self, TruncationLevel};

pub const DEFAULT_BLOWUP_F_MAX: f64 = 1e3;
pub const DEFAULT_BLOWUP_L_MIN: f64 = 1e-3;
pub const DEFAULT_BLOWUP_L_MAX: f64 = 1e3;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("{0}")]
    InvalidConfig(String),
    #[error("state contains nonfinite values")]
    NonFiniteState,
    #[error("state became nonfinite at t = {t}")]
    NonFinite { t: f64 },
    #[error("Brownian path has {available} increments but {needed} steps are required")]
    PathTooShort { available: usize, needed: usize },
    #[error("path base_dt {path_dt:e} does not match the configured dt {dt:e}")]
    BaseDtMismatch { path_dt: f64, dt: f64 },
}

/// Failure of a single step. Length collapse is a stopping signal, not an
/// error: the driver records it and keeps the last valid state.
#[derive(Debug, Error)]
pub enum StepError {
    #[error("length collapsed to {length:.3e} during the step ending at t = {t}")]
    LengthCollapse { t: f64, length: f64 },
    #[error("state became nonfinite at t = {t}")]
    NonFinite { t: f64 },
}

/// Time-stepping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    /// Explicit Euler–Maruyama on the Itô form. Strong order 1/2.
    EulerMaruyama,
    /// Predictor–corrector (Heun) on the Stratonovich form; same (dt, dW)
    /// applied to the averaged coefficients.
    HeunStratonovich,
    /// Second-order term implicit (cyclic tridiagonal solve with the length
    /// and the r-dependent coefficient frozen), everything else explicit.
    Imex,
    /// Heun on the noise-free system; ignores the Brownian path.
    Deterministic,
}

impl Scheme {
    pub fn consumes_noise(&self) -> bool {
        !matches!(self, Scheme::Deterministic)
    }

    fn is_explicit(&self) -> bool {
        !matches!(self, Scheme::Imex)
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "em" | "euler_maruyama" | "euler-maruyama" => Ok(Scheme::EulerMaruyama),
            "heun" | "heun_stratonovich" => Ok(Scheme::HeunStratonovich),
            "imex" => Ok(Scheme::Imex),
            "deterministic" => Ok(Scheme::Deterministic),
            other => Err(format!(
                "unknown scheme '{other}' (expected em, heun, imex, or deterministic)"
            )),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let text = match self {
            Scheme::EulerMaruyama => "em",
            Scheme::HeunStratonovich => "heun",
            Scheme::Imex => "imex",
            Scheme::Deterministic => "deterministic",
        };
        f.write_str(text)
    }
}

impl TryFrom<String> for Scheme {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

/// All numerical decisions for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Noise intensity σ ≥ 0.
    pub sigma: f64,
    /// Grid size N.
    pub grid_size: usize,
    /// Time step.
    pub dt: f64,
    /// Final time; rounded down to an integer number of steps.
    pub t_end: f64,
    pub scheme: Scheme,
    /// Optional truncation level; when set, coefficient evaluation replaces
    /// the length by its cutoff value.
    pub trunc_n: Option<u32>,
    pub blowup_f_max: f64,
    pub blowup_l_min: f64,
    pub blowup_l_max: f64,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(sigma: f64, grid_size: usize, dt: f64, t_end: f64, scheme: Scheme) -> Self {
        FlowConfig {
            sigma,
            grid_size,
            dt,
            t_end,
            scheme,
            trunc_n: None,
            blowup_f_max: DEFAULT_BLOWUP_F_MAX,
            blowup_l_min: DEFAULT_BLOWUP_L_MIN,
            blowup_l_max: DEFAULT_BLOWUP_L_MAX,
            seed: 0,
        }
    }

    /// Enables truncation at level `n` and aligns the blow-up thresholds
    /// with the stopping-band of the truncated system: sup-norm bound `n`,
    /// length band `(1/n, n)`.
    pub fn with_truncation(mut self, n: u32) -> Self {
        self.trunc_n = Some(n);
        self.blowup_f_max = n as f64;
        self.blowup_l_min = 1.0 / n as f64;
        self.blowup_l_max = n as f64;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let err = |msg: String| Err(FlowError::InvalidConfig(msg));
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return err("sigma must be nonnegative".into());
        }
        if self.grid_size < crate::geometry::MIN_GRID {
            return err(format!("grid must be at least {}", crate::geometry::MIN_GRID));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return err("dt must be positive".into());
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return err("t-end must be positive".into());
        }
        if self.trunc_n == Some(0) {
            return err("trunc-n must be at least 1".into());
        }
        if !(self.blowup_f_max.is_finite() && self.blowup_f_max > 0.0) {
            return err("blowup-f-max must be positive".into());
        }
        if !(self.blowup_l_min.is_finite() && self.blowup_l_min > 0.0) {
            return err("blowup-l-min must be positive".into());
        }
        if self.blowup_l_max <= self.blowup_l_min {
            return err("blowup-l-max must exceed blowup-l-min".into());
        }
        Ok(())
    }

    /// Number of steps: `t_end` rounded down to a whole number of `dt`.
    pub fn step_count(&self) -> usize {
        (self.t_end / self.dt + 1e-9).floor() as usize
    }

    /// Step-size bound of the explicit schemes for the second-order
    /// coefficient at length `l`.
    pub fn explicit_dt_bound(&self, l: f64) -> f64 {
        let h = 1.0 / self.grid_size as f64;
        let sig = self.sigma;
        0.25 * (h * l).powi(2) / (1.0 + 2.0 * sig * sig * PI * PI * l * l)
    }

    fn effective_length(&self, l: f64) -> f64 {
        match self.trunc_n {
            Some(n) => {
                let level = TruncationLevel::new(n).expect("validated: trunc_n >= 1");
                truncation::cutoff(level, l)
            }
            None => l,
        }
    }
}

/// Drift and diffusion fields evaluated at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientFields {
    pub drift_f: Vec<f64>,
    pub drift_l: f64,
    pub diff_f: Vec<f64>,
    pub diff_l: f64,
}

/// Drift increment that converts Stratonovich drift into Itô drift.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftCorrection {
    pub drift_f: Vec<f64>,
    pub drift_l: f64,
}

/// First and second central differences of a periodic grid function with
/// spacing `1/N`.
fn periodic_derivatives(f: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = f.len();
    let nf = n as f64;
    let mut fr = Vec::with_capacity(n);
    let mut frr = Vec::with_capacity(n);
    for j in 0..n {
        let up = f[(j + 1) % n];
        let dn = f[(j + n - 1) % n];
        fr.push(0.5 * nf * (up - dn));
        frr.push(nf * nf * (up - 2.0 * f[j] + dn));
    }
    (fr, frr)
}

fn check_state(state: &CurvatureState) -> Result<(), FlowError> {
    if !(state.length.is_finite() && state.length > 0.0)
        || state.curvature.iter().any(|v| !v.is_finite())
    {
        return Err(FlowError::NonFiniteState);
    }
    Ok(())
}

/// Itô coefficient fields. Spatial derivatives are second-order central
/// differences on the periodic grid; the squared-curvature integral uses the
/// rectangle rule.
pub fn ito_coefficients(state: &CurvatureState, sigma: f64) -> Result<CoefficientFields, FlowError> {
    ito_coefficients_at_length(state, sigma, state.length)
}

/// Itô fields with the length replaced by `l` everywhere it appears (the
/// truncated system evaluates these at the cutoff length).
pub(crate) fn ito_coefficients_at_length(
    state: &CurvatureState,
    sigma: f64,
    l: f64,
) -> Result<CoefficientFields, FlowError> {
    check_state(state)?;
    let n = state.grid_size();
    let nf = n as f64;
    let g = state.curvature_sq_integral();
    let (fr, frr) = periodic_derivatives(&state.curvature);
    let s2 = sigma * sigma;
    let inv_l2 = 1.0 / (l * l);

    let mut drift_f = Vec::with_capacity(n);
    let mut diff_f = Vec::with_capacity(n);
    for j in 0..n {
        let r = j as f64 / nf;
        let f = state.curvature[j];
        let drift = (2.0 * s2 * PI * PI * r * r + inv_l2) * frr[j]
            - 4.0 * s2 * PI * r * l * f * fr[j]
            + 2.0 * s2 * PI * PI * r * fr[j]
            - r * fr[j] * g
            + f * f * f
            + s2 * f * f * f * l * l
            - s2 * PI * f * f * l;
        drift_f.push(drift);
        diff_f.push(sigma * (f * f * l - 2.0 * PI * r * fr[j]));
    }
    let drift_l = l * (2.0 * s2 * PI * PI - g);
    let diff_l = -2.0 * sigma * PI * l;
    Ok(CoefficientFields { drift_f, drift_l, diff_f, diff_l })
}

/// Stratonovich coefficient fields: no σ²-corrections in the drift, same
/// diffusion as the Itô form.
pub fn stratonovich_coefficients(
    state: &CurvatureState,
    sigma: f64,
) -> Result<CoefficientFields, FlowError> {
    stratonovich_coefficients_at_length(state, sigma, state.length)
}

fn stratonovich_coefficients_at_length(
    state: &CurvatureState,
    sigma: f64,
    l: f64,
) -> Result<CoefficientFields, FlowError> {
    check_state(state)?;
    let n = state.grid_size();
    let nf = n as f64;
    let g = state.curvature_sq_integral();
    let (fr, frr) = periodic_derivatives(&state.curvature);
    let inv_l2 = 1.0 / (l * l);

    let mut drift_f = Vec::with_capacity(n);
    let mut diff_f = Vec::with_capacity(n);
    for j in 0..n {
        let r = j as f64 / nf;
        let f = state.curvature[j];
        drift_f.push(inv_l2 * frr[j] + f * f * f - r * fr[j] * g);
        diff_f.push(sigma * (f * f * l - 2.0 * PI * r * fr[j]));
    }
    let drift_l = -l * g;
    let diff_l = -2.0 * sigma * PI * l;
    Ok(CoefficientFields { drift_f, drift_l, diff_f, diff_l })
}

/// Stratonovich-to-Itô drift correction, assembled from the conversion of
/// each diffusion term:
///
/// ```text
/// L ∘dW    = L dW    - σπL dt
/// f_r ∘dW  = f_r dW  + (σ f f_r L - σπ f_r - σπ r f_rr) dt
/// f²L ∘dW  = f²L dW  + (σ f³L² - 2σπ r f f_r L - σπ f²L) dt
/// ```
///
/// so that `stratonovich drift + correction = itô drift` identically on the
/// grid.
pub fn ito_correction(state: &CurvatureState, sigma: f64) -> Result<DriftCorrection, FlowError> {
    check_state(state)?;
    let n = state.grid_size();
    let nf = n as f64;
    let l = state.length;
    let (fr, frr) = periodic_derivatives(&state.curvature);

    let mut drift_f = Vec::with_capacity(n);
    for j in 0..n {
        let r = j as f64 / nf;
        let f = state.curvature[j];
        let corr_f2l = sigma * f * f * f * l * l
            - 2.0 * sigma * PI * r * f * fr[j] * l
            - sigma * PI * f * f * l;
        let corr_fr = sigma * f * fr[j] * l - sigma * PI * fr[j] - sigma * PI * r * frr[j];
        drift_f.push(sigma * (corr_f2l - 2.0 * PI * r * corr_fr));
    }
    let drift_l = 2.0 * sigma * sigma * PI * PI * l;
    Ok(DriftCorrection { drift_f, drift_l })
}

fn finish_step(
    f_next: Vec<f64>,
    l_next: f64,
    t_next: f64,
) -> Result<CurvatureState, StepError> {
    if l_next.is_finite() && l_next <= 0.0 {
        return Err(StepError::LengthCollapse { t: t_next, length: l_next });
    }
    if !l_next.is_finite() || f_next.iter().any(|v| !v.is_finite()) {
        return Err(StepError::NonFinite { t: t_next });
    }
    Ok(CurvatureState::unchecked(f_next, l_next, t_next))
}

/// One Euler–Maruyama step of the Itô system with increment `dw`.
pub fn step_euler_maruyama(
    state: &CurvatureState,
    config: &FlowConfig,
    dw: f64,
) -> Result<CurvatureState, StepError> {
    let l_eff = config.effective_length(state.length);
    let c = ito_coefficients_at_length(state, config.sigma, l_eff)
        .map_err(|_| StepError::NonFinite { t: state.time })?;
    let dt = config.dt;
    let f_next: Vec<f64> = state
        .curvature
        .iter()
        .zip(c.drift_f.iter().zip(&c.diff_f))
        .map(|(&f, (&a, &b))| f + dt * a + dw * b)
        .collect();
    let l_next = state.length + dt * c.drift_l + dw * c.diff_l;
    finish_step(f_next, l_next, state.time + dt)
}

/// One Heun (predictor–corrector) step of the Stratonovich system: the
/// corrector averages the coefficients at the current and predicted states
/// and applies them with the same `(dt, dw)`.
pub fn step_heun_stratonovich(
    state: &CurvatureState,
    config: &FlowConfig,
    dw: f64,
) -> Result<CurvatureState, StepError> {
    heun_core(state, config, config.sigma, dw)
}

/// One deterministic step: Heun on the noise-free system. Consumes no
/// Brownian increment.
pub fn step_deterministic(
    state: &CurvatureState,
    config: &FlowConfig,
) -> Result<CurvatureState, StepError> {
    heun_core(state, config, 0.0, 0.0)
}

fn heun_core(
    state: &CurvatureState,
    config: &FlowConfig,
    sigma: f64,
    dw: f64,
) -> Result<CurvatureState, StepError> {
    let dt = config.dt;
    let t = state.time;
    let nonfinite = |_: FlowError| StepError::NonFinite { t };

    let c0 = stratonovich_coefficients_at_length(state, sigma, config.effective_length(state.length))
        .map_err(nonfinite)?;

    let f_pred: Vec<f64> = state
        .curvature
        .iter()
        .zip(c0.drift_f.iter().zip(&c0.diff_f))
        .map(|(&f, (&a, &b))| f + dt * a + dw * b)
        .collect();
    let l_pred = state.length + dt * c0.drift_l + dw * c0.diff_l;
    let predictor = finish_step(f_pred, l_pred, t + dt)?;

    let c1 =
        stratonovich_coefficients_at_length(&predictor, sigma, config.effective_length(l_pred))
            .map_err(nonfinite)?;

    let f_next: Vec<f64> = state
        .curvature
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            f + 0.5 * dt * (c0.drift_f[j] + c1.drift_f[j])
                + 0.5 * dw * (c0.diff_f[j] + c1.diff_f[j])
        })
        .collect();
    let l_next =
        state.length + 0.5 * dt * (c0.drift_l + c1.drift_l) + 0.5 * dw * (c0.diff_l + c1.diff_l);
    finish_step(f_next, l_next, t + dt)
}

/// One IMEX step: the stiff second-order term `(2σ²π²r² + 1/L²) f_rr` is
/// treated implicitly with the length and the coefficient frozen at the
/// current step (a cyclic tridiagonal solve); all remaining drift and the
/// diffusion are explicit with `(dt, dw)`. The length advances explicitly.
pub fn step_imex(
    state: &CurvatureState,
    config: &FlowConfig,
    dw: f64,
) -> Result<CurvatureState, StepError> {
    let t = state.time;
    let dt = config.dt;
    let l_eff = config.effective_length(state.length);
    let c = ito_coefficients_at_length(state, config.sigma, l_eff)
        .map_err(|_| StepError::NonFinite { t })?;

    let n = state.grid_size();
    let nf = n as f64;
    let s2 = config.sigma * config.sigma;
    let inv_l2 = 1.0 / (l_eff * l_eff);
    let (_, frr) = periodic_derivatives(&state.curvature);

    let mut sub = Vec::with_capacity(n);
    let mut diag = Vec::with_capacity(n);
    let mut sup = Vec::with_capacity(n);
    let mut rhs = Vec::with_capacity(n);
    for j in 0..n {
        let r = j as f64 / nf;
        let a_coef = 2.0 * s2 * PI * PI * r * r + inv_l2;
        let mu = dt * a_coef * nf * nf;
        sub.push(-mu);
        diag.push(1.0 + 2.0 * mu);
        sup.push(-mu);
        let explicit = c.drift_f[j] - a_coef * frr[j];
        rhs.push(state.curvature[j] + dt * explicit + dw * c.diff_f[j]);
    }

    let f_next = cyclic_tridiagonal_solve(&sub, &diag, &sup, &rhs)
        .ok_or(StepError::NonFinite { t })?;
    let l_next = state.length + dt * c.drift_l + dw * c.diff_l;
    finish_step(f_next, l_next, t + dt)
}

/// Advances one step with the configured scheme. `dw` is ignored by the
/// deterministic scheme.
pub fn advance(
    state: &CurvatureState,
    config: &FlowConfig,
    dw: f64,
) -> Result<CurvatureState, StepError> {
    match config.scheme {
        Scheme::EulerMaruyama => step_euler_maruyama(state, config, dw),
        Scheme::HeunStratonovich => step_heun_stratonovich(state, config, dw),
        Scheme::Imex => step_imex(state, config, dw),
        Scheme::Deterministic => step_deterministic(state, config),
    }
}

/// Right-hand sides of the deterministic general-speed moving-boundary
/// system for the unrescaled curvature `k` on `[0, L]`:
///
/// ```text
/// ∂t k = ∂ss V + k² V       ∂t L = -∫ k V ds
/// ```
///
/// The speed `V` is evaluated pointwise as `v(k_j, s_j, t)` on the uniform
/// arclength grid `s_j = j L / N`; derivatives are central differences and
/// the integral the rectangle rule. With `V = k` this is the noise-free
/// curve-shortening system used elsewhere.
pub fn general_stefan_rhs<V>(
    state: &CurvatureState,
    speed: V,
) -> Result<(Vec<f64>, f64), FlowError>
where
    V: Fn(f64, f64, f64) -> f64,
{
    check_state(state)?;
    let n = state.grid_size();
    let ds = state.length / n as f64;

    let v: Vec<f64> = (0..n)
        .map(|j| speed(state.curvature[j], j as f64 * ds, state.time))
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FlowError::NonFiniteState);
    }

    let mut dk = Vec::with_capacity(n);
    let mut flux = 0.0;
    for j in 0..n {
        let up = v[(j + 1) % n];
        let dn = v[(j + n - 1) % n];
        let vss = (up - 2.0 * v[j] + dn) / (ds * ds);
        let k = state.curvature[j];
        dk.push(vss + k * k * v[j]);
        flux += k * v[j];
    }
    Ok((dk, -ds * flux))
}

/// Advances `initial` until `t_end` or until the blow-up detector fires,
/// recording snapshots every `snapshot_every` steps (plus the initial and
/// final states) with per-snapshot diagnostics.
pub fn run_flow(
    initial: &CurvatureState,
    config: &FlowConfig,
    path: &BrownianPath,
    snapshot_every: usize,
) -> Result<TrajectoryRecord, FlowError> {
    config.validate()?;
    check_state(initial)?;
    if snapshot_every == 0 {
        return Err(FlowError::InvalidConfig("snapshot-every must be at least 1".into()));
    }
    let n_steps = config.step_count();
    if config.scheme.consumes_noise() {
        if path.len() < n_steps {
            return Err(FlowError::PathTooShort { available: path.len(), needed: n_steps });
        }
        let dt_err = (path.base_dt() - config.dt).abs();
        if dt_err > 1e-9 * config.dt {
            return Err(FlowError::BaseDtMismatch { path_dt: path.base_dt(), dt: config.dt });
        }
    }

    let started = std::time::Instant::now();
    let sigma_eff = if config.scheme == Scheme::Deterministic { 0.0 } else { config.sigma };
    let initial_length = initial.length;

    let mut state = initial.clone();
    let mut g_prev = state.curvature_sq_integral();
    let mut time_integral = 0.0;
    let mut w = 0.0;
    let mut cfl_warning = false;
    let mut snapshots =
        vec![make_snapshot(&state, initial_length, sigma_eff, time_integral, w)];
    let mut last_snap_step = 0usize;

    let finish = |snapshots: Vec<Snapshot>, stop_reason, stop_time, cfl_warning| {
        Ok(TrajectoryRecord {
            config: config.clone(),
            seed: config.seed,
            snapshots,
            stop_reason,
            stop_time,
            cfl_warning,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    };

    if let Some(reason) = oracles::detect_blowup(&state, config) {
        return finish(snapshots, reason, state.time, cfl_warning);
    }

    for k in 0..n_steps {
        if config.scheme.is_explicit() && config.dt > config.explicit_dt_bound(state.length) {
            if !cfl_warning {
                log::warn!(
                    "explicit step size {:e} exceeds the stability bound {:e} at t = {}",
                    config.dt,
                    config.explicit_dt_bound(state.length),
                    state.time
                );
            }
            cfl_warning = true;
        }

        let dw = if config.scheme.consumes_noise() { path.increments()[k] } else { 0.0 };
        match advance(&state, config, dw) {
            Ok(next) => {
                let g_new = next.curvature_sq_integral();
                time_integral += 0.5 * config.dt * (g_prev + g_new);
                g_prev = g_new;
                w += dw;
                state = next;

                let due = (k + 1) % snapshot_every == 0 || k + 1 == n_steps;
                let blowup = oracles::detect_blowup(&state, config);
                if due || blowup.is_some() {
                    snapshots.push(make_snapshot(
                        &state,
                        initial_length,
                        sigma_eff,
                        time_integral,
                        w,
                    ));
                    last_snap_step = k + 1;
                }
                if let Some(reason) = blowup {
                    return finish(snapshots, reason, state.time, cfl_warning);
                }
            }
            Err(StepError::LengthCollapse { .. }) => {
                if last_snap_step != k {
                    snapshots.push(make_snapshot(
                        &state,
                        initial_length,
                        sigma_eff,
                        time_integral,
                        w,
                    ));
                }
                return finish(snapshots, StopReason::LengthCollapse, state.time, cfl_warning);
            }
            Err(StepError::NonFinite { t }) => return Err(FlowError::NonFinite { t }),
        }
    }

    finish(snapshots, StopReason::Completed, state.time, cfl_warning)
}

fn make_snapshot(
    state: &CurvatureState,
    initial_length: f64,
    sigma: f64,
    time_integral: f64,
    w: f64,
) -> Snapshot {
    let formula = initial_length * (-time_integral - 2.0 * sigma * PI * w).exp();
    Snapshot {
        t: state.time,
        length: state.length,
        curvature: state.curvature.clone(),
        diagnostics: SnapshotDiagnostics {
            turning_number: crate::geometry::turning_number(state),
            f_sq_integral: state.curvature_sq_integral(),
            closure_defect: crate::geometry::closure_defect(state),
            exact_length_residual: (state.length - formula).abs() / formula,
            sup_f: state.sup_abs_curvature(),
        },
    }
}

/// Solves the cyclic tridiagonal system with sub/main/super diagonals
/// `a, b, c` and wrap entries `a[0]` (row 0, last column) and `c[n-1]`
/// (last row, column 0), by the Thomas algorithm plus a rank-one
/// (Sherman–Morrison) correction. Returns `None` on a vanishing pivot.
pub(crate) fn cyclic_tridiagonal_solve(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
) -> Option<Vec<f64>> {
    let n = d.len();
    debug_assert!(n >= 3 && a.len() == n && b.len() == n && c.len() == n);

    let gamma = -b[0];
    let mut diag = b.to_vec();
    diag[0] = b[0] - gamma;
    diag[n - 1] = b[n - 1] - a[0] * c[n - 1] / gamma;

    let x1 = thomas_solve(a, &diag, c, d)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = c[n - 1];
    let x2 = thomas_solve(a, &diag, c, &u)?;

    let denom = 1.0 + x2[0] + a[0] * x2[n - 1] / gamma;
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    let fact = (x1[0] + a[0] * x1[n - 1] / gamma) / denom;
    Some((0..n).map(|j| x1[j] - fact * x2[j]).collect())
}

/// Plain tridiagonal solve (no wrap entries); `a[0]` and `c[n-1]` unused.
fn thomas_solve(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Option<Vec<f64>> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    if b[0] == 0.0 {
        return None;
    }
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for j in 1..n {
        let m = b[j] - a[j] * cp[j - 1];
        if m == 0.0 || !m.is_finite() {
            return None;
        }
        cp[j] = c[j] / m;
        dp[j] = (d[j] - a[j] * dp[j - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for j in (0..n - 1).rev() {
        x[j] = dp[j] - cp[j] * x[j + 1];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn constant_state(f: f64, length: f64, n: usize) -> CurvatureState {
        CurvatureState::new(vec![f; n], length, 0.0).unwrap()
    }

    fn smooth_state(seed: u64, n: usize) -> CurvatureState {
        use rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let modes: Vec<(f64, f64, f64)> = (1..=4)
            .map(|q| {
                let amp = (uniform() - 0.5) * 0.6 / (q * q) as f64;
                let phase = uniform() * TAU;
                (q as f64, amp, phase)
            })
            .collect();
        let f: Vec<f64> = (0..n)
            .map(|j| {
                let r = j as f64 / n as f64;
                1.0 + modes.iter().map(|(q, a, p)| a * (TAU * q * r + p).cos()).sum::<f64>()
            })
            .collect();
        let length = 0.5 + 2.5 * uniform();
        CurvatureState::new(f, length, 0.0).unwrap()
    }

    fn config(sigma: f64, n: usize, dt: f64, scheme: Scheme) -> FlowConfig {
        FlowConfig::new(sigma, n, dt, 1.0, scheme)
    }

    #[test]
    fn ito_coefficients_on_circle_without_noise() {
        let state = constant_state(1.0, TAU, 32);
        let c = ito_coefficients(&state, 0.0).unwrap();
        for j in 0..32 {
            assert!((c.drift_f[j] - 1.0).abs() <= 1e-13);
            assert_eq!(c.diff_f[j], 0.0);
        }
        assert!((c.drift_l + TAU).abs() <= 1e-13);
        assert_eq!(c.diff_l, 0.0);
    }

    #[test]
    fn ito_coefficients_on_circle_with_noise() {
        // Constant profile on the unit circle: all gradient terms vanish, so
        // drift_f = f³ + σ²f³L² - σ²πf²L = 1 + 0.02π² at σ = 0.1, L = 2π.
        let sigma = 0.1;
        let state = constant_state(1.0, TAU, 32);
        let c = ito_coefficients(&state, sigma).unwrap();
        let expected_drift_f = 1.0 + 0.02 * PI * PI;
        let expected_diff_f = 0.2 * PI;
        let expected_drift_l = TAU * (0.02 * PI * PI - 1.0);
        let expected_diff_l = -0.4 * PI * PI;
        for j in 0..32 {
            assert!((c.drift_f[j] - expected_drift_f).abs() <= 1e-12);
            assert!((c.diff_f[j] - expected_diff_f).abs() <= 1e-12);
        }
        assert!((c.drift_l - expected_drift_l).abs() <= 1e-12, "drift_l = {}", c.drift_l);
        assert!((c.diff_l - expected_diff_l).abs() <= 1e-12);
        // Reference decimals.
        assert!((expected_drift_f - 1.19739).abs() <= 1e-5);
        assert!((expected_diff_f - 0.62832).abs() <= 1e-5);
        assert!((expected_drift_l + 5.04293).abs() <= 1e-5);
    }

    #[test]
    fn ito_coefficients_on_flat_state() {
        let state = constant_state(0.0, 1.0, 16);
        let c = ito_coefficients(&state, 0.3).unwrap();
        for j in 0..16 {
            assert_eq!(c.drift_f[j], 0.0);
            assert_eq!(c.diff_f[j], 0.0);
        }
        let expected_drift_l = 2.0 * 0.09 * PI * PI;
        assert!((c.drift_l - expected_drift_l).abs() <= 1e-12);
        assert!((expected_drift_l - 1.77653).abs() <= 1e-5);
        assert!((c.diff_l + 0.6 * PI).abs() <= 1e-12);
        assert!((0.6 * PI - 1.88496).abs() <= 1e-5);
    }

    #[test]
    fn stratonovich_drift_has_no_sigma_terms() {
        let state = constant_state(1.0, TAU, 32);
        for sigma in [0.0, 0.1, 0.7] {
            let c = stratonovich_coefficients(&state, sigma).unwrap();
            for j in 0..32 {
                assert!((c.drift_f[j] - 1.0).abs() <= 1e-13);
            }
            assert!((c.drift_l + TAU).abs() <= 1e-13);
        }
    }

    #[test]
    fn stratonovich_diffusion_matches_ito_diffusion() {
        let state = smooth_state(5, 64);
        let a = ito_coefficients(&state, 0.4).unwrap();
        let b = stratonovich_coefficients(&state, 0.4).unwrap();
        assert_eq!(a.diff_f, b.diff_f);
        assert_eq!(a.diff_l, b.diff_l);
    }

    #[test]
    fn stratonovich_flat_state_all_zero_but_length_diffusion() {
        let state = constant_state(0.0, 1.0, 16);
        let sigma = 0.3;
        let c = stratonovich_coefficients(&state, sigma).unwrap();
        assert!(c.drift_f.iter().all(|&x| x == 0.0));
        assert!(c.diff_f.iter().all(|&x| x == 0.0));
        assert_eq!(c.drift_l, 0.0);
        assert!((c.diff_l + 2.0 * sigma * PI).abs() <= 1e-15);
    }

    #[test]
    fn correction_on_circle() {
        let sigma = 0.1;
        let state = constant_state(1.0, TAU, 32);
        let corr = ito_correction(&state, sigma).unwrap();
        for j in 0..32 {
            assert!((corr.drift_f[j] - 0.02 * PI * PI).abs() <= 1e-13);
        }
        // 2σ²π²L = 4σ²π³ at L = 2π.
        assert!((corr.drift_l - 4.0 * sigma * sigma * PI.powi(3)).abs() <= 1e-13);
    }

    #[test]
    fn correction_vanishes_without_noise() {
        let state = smooth_state(1, 32);
        let corr = ito_correction(&state, 0.0).unwrap();
        assert!(corr.drift_f.iter().all(|&x| x == 0.0));
        assert_eq!(corr.drift_l, 0.0);
    }

    #[test]
    fn stratonovich_plus_correction_equals_ito() {
        for seed in 0..100 {
            let state = smooth_state(seed, 48);
            for sigma in [0.05, 0.3] {
                let ito = ito_coefficients(&state, sigma).unwrap();
                let strat = stratonovich_coefficients(&state, sigma).unwrap();
                let corr = ito_correction(&state, sigma).unwrap();
                for j in 0..48 {
                    let lhs = strat.drift_f[j] + corr.drift_f[j];
                    assert!(
                        (lhs - ito.drift_f[j]).abs() <= 1e-12,
                        "seed {seed} sigma {sigma} j {j}: {} vs {}",
                        lhs,
                        ito.drift_f[j]
                    );
                }
                let lhs = strat.drift_l + corr.drift_l;
                assert!((lhs - ito.drift_l).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn euler_step_on_circle() {
        let state = constant_state(1.0, TAU, 32);
        let cfg = config(0.0, 32, 1e-4, Scheme::EulerMaruyama);
        let next = step_euler_maruyama(&state, &cfg, 0.0).unwrap();
        assert!((next.length - (TAU - TAU * 1e-4)).abs() <= 1e-14);
        for &f in &next.curvature {
            assert!((f - 1.0001).abs() <= 1e-13);
        }
        assert!((next.time - 1e-4).abs() <= 1e-18);
    }

    #[test]
    fn euler_step_on_flat_state_with_noise() {
        let state = constant_state(0.0, 1.0, 16);
        let cfg = config(0.3, 16, 1e-3, Scheme::EulerMaruyama);
        let dw = 0.02;
        let next = step_euler_maruyama(&state, &cfg, dw).unwrap();
        let expected = 1.0 + 1e-3 * (0.18 * PI * PI) + dw * (-0.6 * PI);
        assert!((next.length - expected).abs() <= 1e-15);
        assert!(next.curvature.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn euler_step_first_order_consistency() {
        // With dw = 0 the step displacement scales linearly in dt.
        let state = smooth_state(3, 32);
        let mut deltas = Vec::new();
        for dt in [1e-3, 5e-4, 2.5e-4] {
            let cfg = config(0.2, 32, dt, Scheme::EulerMaruyama);
            let next = step_euler_maruyama(&state, &cfg, 0.0).unwrap();
            let delta = next
                .curvature
                .iter()
                .zip(&state.curvature)
                .map(|(a, b)| (a - b).abs())
                .fold((next.length - state.length).abs(), f64::max);
            deltas.push(delta);
        }
        assert!(deltas[0] / deltas[1] > 1.9 && deltas[0] / deltas[1] < 2.1);
        assert!(deltas[1] / deltas[2] > 1.9 && deltas[1] / deltas[2] < 2.1);
    }

    #[test]
    fn heun_step_matches_circle_solution_to_second_order() {
        // Exact circle collapse: f(t) = (1-2t)^(-1/2), L(t) = 2π(1-2t)^(1/2).
        let state = constant_state(1.0, TAU, 16);
        let mut errors = Vec::new();
        for dt in [1e-2, 5e-3] {
            let cfg = config(0.0, 16, dt, Scheme::HeunStratonovich);
            let next = step_heun_stratonovich(&state, &cfg, 0.0).unwrap();
            let f_exact = (1.0 - 2.0 * dt).powf(-0.5);
            let l_exact = TAU * (1.0 - 2.0 * dt).sqrt();
            errors.push((next.curvature[0] - f_exact).abs() + (next.length - l_exact).abs());
        }
        assert!(errors[0] <= 1e-4, "one-step error {}", errors[0]);
        // Local error is third order: halving dt shrinks it ~8x.
        assert!(errors[0] / errors[1] >= 6.0, "ratio {}", errors[0] / errors[1]);
    }

    #[test]
    fn heun_zero_step_is_identity() {
        let state = smooth_state(8, 32);
        let mut cfg = config(0.25, 32, 1e-3, Scheme::HeunStratonovich);
        cfg.dt = 0.0;
        let next = step_heun_stratonovich(&state, &cfg, 0.0).unwrap();
        assert_eq!(next.curvature, state.curvature);
        assert_eq!(next.length, state.length);
    }

    #[test]
    fn imex_keeps_constant_profiles() {
        let state = constant_state(2.0, PI, 32);
        let cfg = config(0.0, 32, 1e-3, Scheme::Imex);
        let explicit = step_euler_maruyama(&state, &cfg, 0.0).unwrap();
        let implicit = step_imex(&state, &cfg, 0.0).unwrap();
        // Constants lie in the kernel of f_rr: both schemes agree.
        for j in 0..32 {
            assert!((explicit.curvature[j] - implicit.curvature[j]).abs() <= 1e-12);
        }
        assert!((explicit.length - implicit.length).abs() <= 1e-14);
    }

    #[test]
    fn imex_stable_where_explicit_euler_overflows() {
        let n = 64;
        let f: Vec<f64> = (0..n)
            .map(|j| 1.0 + 0.5 * (8.0 * TAU * j as f64 / n as f64).cos())
            .collect();
        let state = CurvatureState::new(f, TAU, 0.0).unwrap();
        let dt = 2e-2; // far beyond the explicit bound (~5e-3 at N = 64)
        let cfg = config(0.0, n, dt, Scheme::Imex);
        assert!(dt > cfg.explicit_dt_bound(state.length));

        let mut exp_state = state.clone();
        let mut explicit_failed = false;
        for _ in 0..40 {
            match step_euler_maruyama(&exp_state, &cfg, 0.0) {
                Ok(next) => {
                    if next.sup_abs_curvature() > 1e6 {
                        explicit_failed = true;
                        break;
                    }
                    exp_state = next;
                }
                Err(_) => {
                    explicit_failed = true;
                    break;
                }
            }
        }
        assert!(explicit_failed, "explicit run stayed bounded: sup = {}", exp_state.sup_abs_curvature());

        // Stop well before the curve's extinction time (~0.5): boundedness of
        // the stiff term is the point here, not the geometric collapse.
        let mut imex_state = state;
        for _ in 0..20 {
            imex_state = step_imex(&imex_state, &cfg, 0.0).unwrap();
        }
        assert!(imex_state.sup_abs_curvature() <= 10.0, "imex sup = {}", imex_state.sup_abs_curvature());
    }

    #[test]
    fn imex_agrees_with_euler_on_smooth_data() {
        let state = smooth_state(4, 64);
        let dt = 1e-5;
        let cfg_em = config(0.1, 64, dt, Scheme::EulerMaruyama);
        let cfg_imex = config(0.1, 64, dt, Scheme::Imex);
        let mut a = state.clone();
        let mut b = state;
        let path = crate::noise::sample_path(17, dt, 1000).unwrap();
        for &dw in path.increments() {
            a = step_euler_maruyama(&a, &cfg_em, dw).unwrap();
            b = step_imex(&b, &cfg_imex, dw).unwrap();
        }
        let max_diff = a
            .curvature
            .iter()
            .zip(&b.curvature)
            .map(|(x, y)| (x - y).abs())
            .fold((a.length - b.length).abs(), f64::max);
        assert!(max_diff <= 1e-3, "pathwise gap {max_diff}");
    }

    #[test]
    fn length_collapse_signalled() {
        let state = constant_state(1.0, TAU, 16);
        let mut cfg = config(0.0, 16, 1.5, Scheme::EulerMaruyama);
        cfg.t_end = 3.0;
        // dt·drift_l = -1.5·2π pushes the length negative in one step.
        match step_euler_maruyama(&state, &cfg, 0.0) {
            Err(StepError::LengthCollapse { .. }) => {}
            other => panic!("expected collapse, got {other:?}"),
        }
    }

    #[test]
    fn stefan_rhs_circle_examples() {
        let radius = 2.0;
        let state = constant_state(1.0 / radius, TAU * radius, 32);

        let (dk, dl) = general_stefan_rhs(&state, |k, _, _| k).unwrap();
        for &v in &dk {
            assert!((v - 1.0 / radius.powi(3)).abs() <= 1e-12);
        }
        assert!((dl + TAU / radius).abs() <= 1e-12);

        let (dk, dl) = general_stefan_rhs(&state, |_, _, _| 1.0).unwrap();
        for &v in &dk {
            assert!((v - 1.0 / (radius * radius)).abs() <= 1e-12);
        }
        assert!((dl + TAU).abs() <= 1e-12);

        let (dk, dl) = general_stefan_rhs(&state, |_, _, _| 0.0).unwrap();
        assert!(dk.iter().all(|&v| v == 0.0));
        assert_eq!(dl, 0.0);
    }

    #[test]
    fn stefan_rhs_rejects_nonfinite_speed() {
        let state = constant_state(1.0, TAU, 16);
        assert!(general_stefan_rhs(&state, |_, _, _| f64::NAN).is_err());
    }

    #[test]
    fn cyclic_solver_matches_dense_residual() {
        use rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        for n in [8usize, 16, 37] {
            let a: Vec<f64> = (0..n).map(|_| -uniform()).collect();
            let c: Vec<f64> = (0..n).map(|_| -uniform()).collect();
            let b: Vec<f64> = (0..n)
                .map(|j| 1.0 + a[j].abs() + c[j].abs() + uniform())
                .collect();
            let d: Vec<f64> = (0..n).map(|_| uniform() * 2.0 - 1.0).collect();
            let x = cyclic_tridiagonal_solve(&a, &b, &c, &d).unwrap();
            for j in 0..n {
                let lhs = a[j] * x[(j + n - 1) % n] + b[j] * x[j] + c[j] * x[(j + 1) % n];
                assert!((lhs - d[j]).abs() <= 1e-10, "n {n} row {j}: {lhs} vs {}", d[j]);
            }
        }
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("em".parse::<Scheme>().unwrap(), Scheme::EulerMaruyama);
        assert_eq!("heun".parse::<Scheme>().unwrap(), Scheme::HeunStratonovich);
        assert_eq!("imex".parse::<Scheme>().unwrap(), Scheme::Imex);
        assert_eq!("deterministic".parse::<Scheme>().unwrap(), Scheme::Deterministic);
        assert!("rk4".parse::<Scheme>().is_err());
        assert_eq!(Scheme::EulerMaruyama.to_string(), "em");
    }

    #[test]
    fn config_validation_messages() {
        let mut cfg = config(-0.1, 32, 1e-3, Scheme::EulerMaruyama);
        match cfg.validate() {
            Err(FlowError::InvalidConfig(msg)) => assert!(msg.contains("sigma")),
            other => panic!("{other:?}"),
        }
        cfg.sigma = 0.1;
        cfg.dt = 0.0;
        assert!(cfg.validate().is_err());
        cfg.dt = 1e-3;
        cfg.blowup_l_max = cfg.blowup_l_min;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn truncation_defaults_follow_stopping_band() {
        let cfg = config(0.1, 32, 1e-3, Scheme::EulerMaruyama).with_truncation(10);
        assert_eq!(cfg.trunc_n, Some(10));
        assert_eq!(cfg.blowup_f_max, 10.0);
        assert_eq!(cfg.blowup_l_min, 0.1);
        assert_eq!(cfg.blowup_l_max, 10.0);
    }
}
