//! Stochastic curve-shortening flow of closed planar curves with
//! length-proportional noise.
//!
//! The flow is integrated in its moving-boundary form: the state is the
//! curvature profile `f` on the unit torus (arclength rescaled by the total
//! length) together with the scalar length `L`. [`geometry`] converts between
//! embedded curves and `(f, L)` data, [`noise`] supplies seeded Brownian
//! increments shared across schemes and refinement levels, [`dynamics`]
//! evaluates the drift/diffusion fields and advances the state, and
//! [`oracles`] holds the independent reference solutions used to validate
//! the solver.

pub mod dynamics;
pub mod geometry;
pub mod noise;
pub mod oracles;
pub mod trajectory;
pub mod truncation;

pub use dynamics::{CoefficientFields, FlowConfig, Scheme};
pub use geometry::{Curve, CurvatureState, Point};
pub use noise::BrownianPath;
pub use trajectory::{Snapshot, SnapshotDiagnostics, StopReason, TrajectoryRecord};
pub use truncation::TruncationLevel;
