//! Conversions between embedded planar curves and intrinsic (curvature,
//! length) data, plus the geometric diagnostics (turning number, closure
//! defect, enclosed area) used as invariants by the flow solver.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lengths at or below this are treated as degenerate input.
pub const MIN_LENGTH: f64 = 1e-12;

/// Smallest supported curvature grid.
pub const MIN_GRID: usize = 8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("closed curve needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("zero-length edge between points {0} and {1}")]
    ZeroLengthEdge(usize, usize),
    #[error("closed curve must be counterclockwise (signed area {0:.3e})")]
    NotCounterclockwise(f64),
    #[error("operation requires a closed curve")]
    NotClosed,
    #[error("curve length {0:.3e} is below the degeneracy threshold {MIN_LENGTH:.0e}")]
    DegenerateLength(f64),
    #[error("grid size {0} is below the minimum of {MIN_GRID}")]
    GridTooSmall(usize),
    #[error("length must be positive and finite, got {0}")]
    InvalidLength(f64),
    #[error("curvature samples must be finite")]
    NonFiniteCurvature,
    #[error("curve CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A point in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance_to(&self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A planar polyline, optionally closed. Closed curves store each vertex
/// once; the wrap edge from the last point back to the first is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    points: Vec<Point>,
    closed: bool,
}

impl Curve {
    /// Builds a closed curve. Requires at least 3 points and no zero-length
    /// edges (including the implicit closing edge).
    pub fn closed(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() < 3 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        let n = points.len();
        for i in 0..n {
            let j = (i + 1) % n;
            if points[i].distance_to(points[j]) == 0.0 {
                return Err(GeometryError::ZeroLengthEdge(i, j));
            }
        }
        Ok(Curve { points, closed: true })
    }

    /// Builds an open polyline. No distinctness requirement: reconstructed
    /// tangent fields may legitimately fold back on themselves.
    pub fn open(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        Ok(Curve { points, closed: false })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Total polygonal arclength, including the closing edge when closed.
    pub fn total_length(&self) -> f64 {
        let n = self.points.len();
        let edges = if self.closed { n } else { n - 1 };
        (0..edges)
            .map(|i| self.points[i].distance_to(self.points[(i + 1) % n]))
            .sum()
    }

    fn shoelace(&self) -> f64 {
        let n = self.points.len();
        let mut twice_area = 0.0;
        for i in 0..n {
            let p = self.points[i];
            let q = self.points[(i + 1) % n];
            twice_area += p.x * q.y - q.x * p.y;
        }
        twice_area / 2.0
    }
}

/// The PDE unknown: `n` samples of curvature on the uniform grid
/// `r_j = j / n` of the unit torus, together with the curve length and the
/// current time. `curvature` is interpreted as a 1-periodic function of `r`;
/// the physical curvature at arclength `s` is `curvature(s / length)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureState {
    #[serde(rename = "f")]
    pub curvature: Vec<f64>,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "t")]
    pub time: f64,
}

impl CurvatureState {
    pub fn new(curvature: Vec<f64>, length: f64, time: f64) -> Result<Self, GeometryError> {
        if curvature.len() < MIN_GRID {
            return Err(GeometryError::GridTooSmall(curvature.len()));
        }
        if !(length.is_finite() && length > MIN_LENGTH) {
            return Err(GeometryError::InvalidLength(length));
        }
        if curvature.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteCurvature);
        }
        Ok(CurvatureState { curvature, length, time })
    }

    /// Constructor used by the time steppers, which maintain the invariants
    /// themselves (and handle length collapse as a stopping signal).
    pub(crate) fn unchecked(curvature: Vec<f64>, length: f64, time: f64) -> Self {
        CurvatureState { curvature, length, time }
    }

    pub fn grid_size(&self) -> usize {
        self.curvature.len()
    }

    pub fn mean_curvature(&self) -> f64 {
        self.curvature.iter().sum::<f64>() / self.curvature.len() as f64
    }

    /// Rectangle-rule value of the squared-curvature integral over the unit
    /// torus; spectrally accurate for smooth periodic profiles.
    pub fn curvature_sq_integral(&self) -> f64 {
        self.curvature.iter().map(|f| f * f).sum::<f64>() / self.curvature.len() as f64
    }

    pub fn sup_abs_curvature(&self) -> f64 {
        self.curvature.iter().fold(0.0, |m, f| m.max(f.abs()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let state: CurvatureState =
            serde_json::from_str(text).map_err(|e| GeometryError::Csv(e.to_string()))?;
        CurvatureState::new(state.curvature, state.length, state.time)
    }
}

/// Extracts a [`CurvatureState`] from a closed counterclockwise curve.
///
/// The polyline is resampled to `n` points uniform in arclength (linear
/// interpolation along the polygon), and `f_j` is the turning angle at
/// resampled vertex `j` divided by the arclength spacing. Turning angles are
/// accumulated without mod-2π jumps, so the discrete turning number of the
/// output is exactly the winding number of the resampled polygon.
pub fn curvature_from_curve(curve: &Curve, n: usize) -> Result<CurvatureState, GeometryError> {
    if !curve.is_closed() {
        return Err(GeometryError::NotClosed);
    }
    if n < MIN_GRID {
        return Err(GeometryError::GridTooSmall(n));
    }
    let area = curve.shoelace();
    if area <= 0.0 {
        return Err(GeometryError::NotCounterclockwise(area));
    }
    let total = curve.total_length();
    if total <= MIN_LENGTH {
        return Err(GeometryError::DegenerateLength(total));
    }

    let samples = resample_uniform(curve, n);
    let h = total / n as f64;

    // Edge tangent angles of the resampled polygon.
    let mut angles = Vec::with_capacity(n);
    for j in 0..n {
        let p = samples[j];
        let q = samples[(j + 1) % n];
        angles.push((q.y - p.y).atan2(q.x - p.x));
    }

    // Turning at vertex j = wrapped angle increment from edge j-1 to edge j.
    let mut f = Vec::with_capacity(n);
    for j in 0..n {
        let prev = angles[(j + n - 1) % n];
        let turn = wrap_angle(angles[j] - prev);
        f.push(turn / h);
    }

    CurvatureState::new(f, total, 0.0)
}

/// Rebuilds a polyline from intrinsic data by integrating the tangent angle
/// and then the tangent field, both with the composite trapezoid rule on
/// `m + 1` arclength stations covering `[0, L]`.
///
/// The first output point is `start`; closure is never enforced (see
/// [`closure_defect`]).
///
/// Panics if `m < state.grid_size()`.
pub fn reconstruct_curve(state: &CurvatureState, start: Point, start_angle: f64, m: usize) -> Curve {
    let n = state.grid_size();
    assert!(m >= n, "output resolution {m} must be at least the grid size {n}");
    let h = state.length / m as f64;

    // Linear interpolation of the periodic profile at r = i / m.
    let f_at = |i: usize| -> f64 {
        let pos = (i % m) as f64 * n as f64 / m as f64;
        let j = pos.floor() as usize;
        let frac = pos - j as f64;
        let a = state.curvature[j % n];
        let b = state.curvature[(j + 1) % n];
        a + frac * (b - a)
    };

    let mut theta = Vec::with_capacity(m + 1);
    theta.push(start_angle);
    for i in 0..m {
        let prev = theta[i];
        theta.push(prev + 0.5 * h * (f_at(i) + f_at(i + 1)));
    }

    let mut points = Vec::with_capacity(m + 1);
    points.push(start);
    for i in 0..m {
        let p = points[i];
        let (s0, c0) = theta[i].sin_cos();
        let (s1, c1) = theta[i + 1].sin_cos();
        points.push(Point::new(p.x + 0.5 * h * (c0 + c1), p.y + 0.5 * h * (s0 + s1)));
    }

    Curve { points, closed: false }
}

/// Winding of the tangent field: `L * mean(f) / 2π`. Equals 1 for simple
/// closed counterclockwise curves.
pub fn turning_number(state: &CurvatureState) -> f64 {
    state.length * state.mean_curvature() / TAU
}

/// Distance between the endpoints of the curve reconstructed at resolution
/// `4n`, normalized by the length. Zero for exactly closing tangent fields;
/// recorded per snapshot as a scheme-quality diagnostic since the flow never
/// enforces closure.
pub fn closure_defect(state: &CurvatureState) -> f64 {
    let curve = reconstruct_curve(state, Point::ORIGIN, 0.0, 4 * state.grid_size());
    let pts = curve.points();
    pts[0].distance_to(pts[pts.len() - 1]) / state.length
}

/// Signed polygonal (shoelace) area; positive for counterclockwise
/// orientation.
pub fn enclosed_area(curve: &Curve) -> Result<f64, GeometryError> {
    if !curve.is_closed() {
        return Err(GeometryError::NotClosed);
    }
    Ok(curve.shoelace())
}

/// Symmetric Hausdorff distance between two polylines, measured point to
/// segment in both directions.
pub fn hausdorff_distance(a: &Curve, b: &Curve) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

fn directed_hausdorff(a: &Curve, b: &Curve) -> f64 {
    a.points()
        .iter()
        .map(|&p| distance_to_polyline(p, b))
        .fold(0.0, f64::max)
}

fn distance_to_polyline(p: Point, c: &Curve) -> f64 {
    let pts = c.points();
    let n = pts.len();
    let segs = if c.is_closed() { n } else { n - 1 };
    let mut best = f64::INFINITY;
    for i in 0..segs {
        best = best.min(point_segment_distance(p, pts[i], pts[(i + 1) % n]));
    }
    best
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len_sq = dx * dx + dy * dy;
    if len_sq == 0.0 {
        return p.distance_to(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len_sq).clamp(0.0, 1.0);
    p.distance_to(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Writes a curve as CSV with header `x,y`, one point per row. Closed curves
/// do not duplicate the closing point.
pub fn write_curve_csv<W: Write>(mut w: W, curve: &Curve) -> std::io::Result<()> {
    writeln!(w, "x,y")?;
    for p in curve.points() {
        writeln!(w, "{},{}", p.x, p.y)?;
    }
    Ok(())
}

/// Reads a closed curve from `x,y` CSV.
pub fn read_closed_curve_csv<R: BufRead>(r: R) -> Result<Curve, GeometryError> {
    let mut points = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            if line != "x,y" {
                return Err(GeometryError::Csv(format!("expected header 'x,y', got '{line}'")));
            }
            continue;
        }
        let mut parts = line.split(',');
        let (x, y) = match (parts.next(), parts.next(), parts.next()) {
            (Some(x), Some(y), None) => (x, y),
            _ => return Err(GeometryError::Csv(format!("row {idx}: expected two fields"))),
        };
        let x: f64 = x
            .trim()
            .parse()
            .map_err(|e| GeometryError::Csv(format!("row {idx}: {e}")))?;
        let y: f64 = y
            .trim()
            .parse()
            .map_err(|e| GeometryError::Csv(format!("row {idx}: {e}")))?;
        points.push(Point::new(x, y));
    }
    Curve::closed(points)
}

/// Resamples a closed polyline to `n` points uniform in arclength.
fn resample_uniform(curve: &Curve, n: usize) -> Vec<Point> {
    let pts = curve.points();
    let m = pts.len();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for i in 0..m {
        let d = pts[i].distance_to(pts[(i + 1) % m]);
        cum.push(cum[i] + d);
    }
    let total = cum[m];

    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for j in 0..n {
        let target = total * j as f64 / n as f64;
        while seg + 1 < m && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let frac = if seg_len > 0.0 { (target - cum[seg]) / seg_len } else { 0.0 };
        let a = pts[seg];
        let b = pts[(seg + 1) % m];
        out.push(Point::new(a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y)));
    }
    out
}

/// Reduces an angle difference to (-π, π].
fn wrap_angle(x: f64) -> f64 {
    let mut d = x % TAU;
    if d > PI {
        d -= TAU;
    } else if d <= -PI {
        d += TAU;
    }
    d
}
