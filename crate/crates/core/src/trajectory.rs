//! Time-indexed snapshots and diagnostics produced by a flow run.

use serde::{Deserialize, Serialize};

use crate::dynamics::FlowConfig;

/// Why a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Reached `t_end`.
    Completed,
    /// `sup |f|` exceeded the configured threshold.
    CurvatureBlowup,
    /// Length fell to the lower bound (or collapsed to zero within a step).
    LengthCollapse,
    /// Length exceeded the upper bound.
    LengthExplosion,
}

impl StopReason {
    pub fn is_blowup(&self) -> bool {
        !matches!(self, StopReason::Completed)
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let text = match self {
            StopReason::Completed => "completed",
            StopReason::CurvatureBlowup => "curvature blow-up",
            StopReason::LengthCollapse => "length collapse",
            StopReason::LengthExplosion => "length explosion",
        };
        f.write_str(text)
    }
}

/// Per-snapshot scalar diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDiagnostics {
    /// `L · mean(f) / 2π`; conserved at 1 by the continuum flow on simple
    /// closed curves.
    pub turning_number: f64,
    /// Rectangle-rule value of the squared-curvature integral over the torus.
    pub f_sq_integral: f64,
    /// Endpoint gap of the reconstructed curve, normalized by length.
    pub closure_defect: f64,
    /// Relative mismatch between the simulated length and the closed-form
    /// length driven by the recorded curvature history and noise.
    pub exact_length_residual: f64,
    /// `sup |f|` over the grid.
    pub sup_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "f")]
    pub curvature: Vec<f64>,
    pub diagnostics: SnapshotDiagnostics,
}

/// Full record of one run: configuration, snapshots with diagnostics, and
/// the stopping outcome. Wall-clock time is informational only and excluded
/// from persistence and equality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub config: FlowConfig,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
    pub stop_reason: StopReason,
    /// Time of the last valid state.
    pub stop_time: f64,
    /// True when the explicit step-size guard tripped at least once.
    pub cfl_warning: bool,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl PartialEq for TrajectoryRecord {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.snapshots == other.snapshots
            && self.stop_reason == other.stop_reason
            && self.stop_time == other.stop_time
            && self.cfl_warning == other.cfl_warning
    }
}

impl TrajectoryRecord {
    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("a record always has at least one snapshot")
    }
}
