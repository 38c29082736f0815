//! Per-frame joint estimation of camera attitude (pitch, roll) and person
//! location on the virtual ground plane.
//!
//! The person is a rigid stack of four points at known heights above their
//! footprint. With the camera at height `camera_height` above the plane and
//! rotated by roll about z after pitch about x, the ray from the camera to
//! point `i` is, in the (level) robot frame,
//!
//! ```text
//! cp_i = (lateral, camera_height - h_i, depth)
//! ```
//!
//! and in the camera frame `q_i = R^T * cp_i` with `R = Rz(roll) * Rx(pitch)`.
//! Matching the projections of `q_i` against the normalized-plane
//! measurements is a five-parameter bounded nonlinear least-squares problem,
//! solved by alternating a translation block (lateral, depth, camera height)
//! with a rotation block (pitch, roll), each via the dogbox minimizer, under
//! a Cauchy robust cost.
//!
//! Sign conventions: positive pitch tilts the camera toward the ground,
//! positive roll is clockwise seen from behind the camera.

pub mod dogbox;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraFramePoint;
use crate::observation::{BodyPoint, FourPointObservation, ObservationError};
pub use dogbox::{dogbox_minimize, DogboxConfig, DogboxError, DogboxReport, Termination};

/// The five estimated parameters. Distances in meters, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    /// Footprint offset to the right of the camera axis on the virtual plane.
    pub lateral: f64,
    /// Footprint distance along the camera axis on the virtual plane.
    pub depth: f64,
    /// Camera height above the virtual plane.
    pub camera_height: f64,
    /// Pitch angle; positive looks downward.
    pub pitch: f64,
    /// Roll angle; positive is clockwise from behind the camera.
    pub roll: f64,
}

impl PoseState {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.lateral,
            self.depth,
            self.camera_height,
            self.pitch,
            self.roll,
        ])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            lateral: v[0],
            depth: v[1],
            camera_height: v[2],
            pitch: v[3],
            roll: v[4],
        }
    }
}

/// Calibrated heights of the four body points above the footprint, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointHeights {
    pub neck: f64,
    pub hip: f64,
    pub knee: f64,
    pub ankle: f64,
}

impl JointHeights {
    /// Heights must decrease strictly from neck to ankle and stay nonnegative.
    pub fn new(neck: f64, hip: f64, knee: f64, ankle: f64) -> Result<Self, SolverError> {
        if !(neck > hip && hip > knee && knee > ankle && ankle >= 0.0) {
            return Err(SolverError::InvalidHeights {
                heights: [neck, hip, knee, ankle],
            });
        }
        Ok(Self {
            neck,
            hip,
            knee,
            ankle,
        })
    }

    pub fn get(&self, p: BodyPoint) -> f64 {
        match p {
            BodyPoint::Neck => self.neck,
            BodyPoint::Hip => self.hip,
            BodyPoint::Knee => self.knee,
            BodyPoint::Ankle => self.ankle,
        }
    }
}

/// Per-point residual weights. Mobile lower-body points get smaller weights
/// than the stable upper-body points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub neck: f64,
    pub hip: f64,
    pub knee: f64,
    pub ankle: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            neck: 1.0,
            hip: 1.0,
            knee: 0.7,
            ankle: 0.5,
        }
    }
}

impl WeightConfig {
    pub fn get(&self, p: BodyPoint) -> f64 {
        match p {
            BodyPoint::Neck => self.neck,
            BodyPoint::Hip => self.hip,
            BodyPoint::Knee => self.knee,
            BodyPoint::Ankle => self.ankle,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let all = [self.neck, self.hip, self.knee, self.ankle];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0)
            || all.iter().filter(|w| **w > 0.0).count() < 3
        {
            return Err(SolverError::InvalidWeights { weights: all });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    /// The central `fraction` of the interval (e.g. 0.9 trims 5% per side).
    pub fn shrunk(&self, fraction: f64) -> Interval {
        let margin = (self.max - self.min) * (1.0 - fraction) / 2.0;
        Interval::new(self.min + margin, self.max - margin)
    }
}

/// Box bounds on the state vector, reflecting the physical motion limits of
/// the camera and the person.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBounds {
    pub lateral: Interval,
    pub depth: Interval,
    pub camera_height: Interval,
    pub pitch: Interval,
    pub roll: Interval,
}

impl Default for StateBounds {
    fn default() -> Self {
        Self {
            lateral: Interval::new(-30.0, 30.0),
            depth: Interval::new(0.3, 30.0),
            camera_height: Interval::new(0.2, 1.2),
            pitch: Interval::new(-45f64.to_radians(), 45f64.to_radians()),
            roll: Interval::new(-45f64.to_radians(), 45f64.to_radians()),
        }
    }
}

impl StateBounds {
    pub fn lower(&self) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.lateral.min,
            self.depth.min,
            self.camera_height.min,
            self.pitch.min,
            self.roll.min,
        ])
    }

    pub fn upper(&self) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.lateral.max,
            self.depth.max,
            self.camera_height.max,
            self.pitch.max,
            self.roll.max,
        ])
    }

    pub fn contains(&self, s: &PoseState) -> bool {
        self.lateral.contains(s.lateral)
            && self.depth.contains(s.depth)
            && self.camera_height.contains(s.camera_height)
            && self.pitch.contains(s.pitch)
            && self.roll.contains(s.roll)
    }

    pub fn clamp(&self, s: PoseState) -> PoseState {
        PoseState {
            lateral: self.lateral.clamp(s.lateral),
            depth: self.depth.clamp(s.depth),
            camera_height: self.camera_height.clamp(s.camera_height),
            pitch: self.pitch.clamp(s.pitch),
            roll: self.roll.clamp(s.roll),
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = self.lateral.min < self.lateral.max
            && self.depth.min < self.depth.max
            && self.depth.min > 0.0
            && self.camera_height.min < self.camera_height.max
            && self.camera_height.min > 0.0
            && self.pitch.min < self.pitch.max
            && self.roll.min < self.roll.max;
        if !ok {
            return Err(SolverError::InvalidBounds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub bounds: StateBounds,
    /// Cauchy scale in normalized-plane units (about 5 px at f = 500 px).
    pub cauchy_scale: f64,
    pub ftol: f64,
    pub xtol: f64,
    pub gtol: f64,
    /// Dogbox iteration cap per block solve.
    pub max_inner_iterations: usize,
    /// Cap on translation/rotation alternations.
    pub max_outer_alternations: usize,
    pub initial_trust_radius: f64,
    /// Camera height used by the level-view initialization.
    pub initial_camera_height: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            bounds: StateBounds::default(),
            cauchy_scale: 0.01,
            ftol: 1e-8,
            xtol: 1e-8,
            gtol: 1e-8,
            max_inner_iterations: 50,
            max_outer_alternations: 10,
            initial_trust_radius: 1.0,
            initial_camera_height: 0.5,
        }
    }
}

/// Outcome of a per-frame solve.
#[derive(Debug, Clone)]
pub struct LocalizationResult {
    pub state: PoseState,
    /// Robust reprojection cost at the final state.
    pub final_cost: f64,
    /// Euclidean norm of each visible point's weighted residual.
    pub per_point_residual_norms: [Option<f64>; 4],
    pub converged: bool,
    /// Total dogbox iterations spent across all block solves.
    pub iterations_used: usize,
    pub outer_alternations: usize,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("{visible} visible points, at least 3 required")]
    InsufficientObservations { visible: usize },
    #[error("degenerate observation: visible points have no apparent height")]
    DegenerateObservation,
    #[error("model point behind the camera")]
    BehindCamera,
    #[error("joint heights {heights:?} must decrease strictly from neck to ankle")]
    InvalidHeights { heights: [f64; 4] },
    #[error("weights {weights:?} must be nonnegative with at least 3 positive")]
    InvalidWeights { weights: [f64; 4] },
    #[error("invalid state bounds")]
    InvalidBounds,
    #[error(transparent)]
    Dogbox(#[from] DogboxError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
}

fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rotation_x_deriv(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn rotation_z_deriv(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Camera-to-robot rotation `Rz(roll) * Rx(pitch)` from the two attitude
/// angles.
pub fn rotation_from_angles(pitch: f64, roll: f64) -> Matrix3<f64> {
    rotation_z(roll) * rotation_x(pitch)
}

/// Camera-frame position of the body point at height `point_height` for a
/// given state.
pub fn camera_point(state: &PoseState, point_height: f64) -> CameraFramePoint {
    let rotation = rotation_from_angles(state.pitch, state.roll);
    let cp = Vector3::new(
        state.lateral,
        state.camera_height - point_height,
        state.depth,
    );
    let q = rotation.transpose() * cp;
    CameraFramePoint::new(q.x, q.y, q.z)
}

/// Noiseless projection of the four-point model: the forward model whose
/// inversion is the solver, and the generator behind every synthetic test.
pub fn forward_project(
    state: &PoseState,
    heights: &JointHeights,
) -> Result<FourPointObservation, SolverError> {
    let rotation = rotation_from_angles(state.pitch, state.roll);
    let rt = rotation.transpose();
    let mut points = [None; 4];
    for p in BodyPoint::ALL {
        let cp = Vector3::new(
            state.lateral,
            state.camera_height - heights.get(p),
            state.depth,
        );
        let q = rt * cp;
        if q.z <= 0.0 {
            return Err(SolverError::BehindCamera);
        }
        points[p.index()] = Some(crate::camera::NormalizedPoint::new(q.x / q.z, q.y / q.z));
    }
    Ok(FourPointObservation::from_points(0, 0.0, 0, points)?)
}

/// Cauchy robust cost of a squared residual norm `s`.
fn cauchy_rho(s: f64, scale: f64) -> f64 {
    let c2 = scale * scale;
    c2 * (s / c2).ln_1p()
}

/// Multiplier that maps a residual block to its robustified version:
/// `|| w * r ||^2 == rho(||r||^2)`.
fn robust_scale(s: f64, scale: f64) -> f64 {
    if s <= f64::MIN_POSITIVE {
        1.0
    } else {
        (cauchy_rho(s, scale) / s).sqrt()
    }
}

/// Stacked weighted residuals (x then y per visible point, body order) and
/// the robust total cost. Residuals are `sqrt(w_i) * (n_i - projection_i)`,
/// not robust-rescaled; the cost applies the Cauchy loss per point.
pub fn reprojection_cost(
    state: &PoseState,
    obs: &FourPointObservation,
    heights: &JointHeights,
    weights: &WeightConfig,
    cauchy_scale: f64,
) -> Result<(f64, DVector<f64>), SolverError> {
    let rotation = rotation_from_angles(state.pitch, state.roll);
    let rt = rotation.transpose();
    let mut residuals = Vec::with_capacity(2 * obs.visible_count());
    let mut cost = 0.0;
    for (p, n) in obs.visible_points() {
        let cp = Vector3::new(
            state.lateral,
            state.camera_height - heights.get(p),
            state.depth,
        );
        let q = rt * cp;
        if q.z <= 0.0 {
            return Err(SolverError::BehindCamera);
        }
        let w = weights.get(p).sqrt();
        let rx = w * (n.x - q.x / q.z);
        let ry = w * (n.y - q.y / q.z);
        cost += cauchy_rho(rx * rx + ry * ry, cauchy_scale);
        residuals.push(rx);
        residuals.push(ry);
    }
    Ok((cost, DVector::from_vec(residuals)))
}

/// Exact Jacobian of the stacked (non-robustified) residuals with respect to
/// (lateral, depth, camera_height, pitch, roll). Row order matches
/// [`reprojection_cost`].
pub fn analytic_jacobian(
    state: &PoseState,
    obs: &FourPointObservation,
    heights: &JointHeights,
    weights: &WeightConfig,
) -> Result<DMatrix<f64>, SolverError> {
    let rotation = rotation_from_angles(state.pitch, state.roll);
    let rt = rotation.transpose();
    // d/dpitch and d/droll of R, transposed once outside the point loop.
    let dr_dpitch_t = (rotation_z(state.roll) * rotation_x_deriv(state.pitch)).transpose();
    let dr_droll_t = (rotation_z_deriv(state.roll) * rotation_x(state.pitch)).transpose();

    let rows = 2 * obs.visible_count();
    let mut jac = DMatrix::zeros(rows, 5);
    let mut row = 0;
    for (p, _) in obs.visible_points() {
        let cp = Vector3::new(
            state.lateral,
            state.camera_height - heights.get(p),
            state.depth,
        );
        let q = rt * cp;
        if q.z <= 0.0 {
            return Err(SolverError::BehindCamera);
        }
        let inv_z = 1.0 / q.z;
        // d(projection)/dq for the normalized-plane projection.
        let dpi = Matrix2x3::new(
            inv_z,
            0.0,
            -q.x * inv_z * inv_z,
            0.0,
            inv_z,
            -q.y * inv_z * inv_z,
        );
        let dq = [
            rt.column(0).into_owned(), // d/d lateral
            rt.column(2).into_owned(), // d/d depth
            rt.column(1).into_owned(), // d/d camera_height
            dr_dpitch_t * cp,
            dr_droll_t * cp,
        ];
        let w = weights.get(p).sqrt();
        for (col, dq_dparam) in dq.iter().enumerate() {
            let dn = dpi * dq_dparam;
            // Residual is sqrt(w) (n - projection): derivative flips sign.
            jac[(row, col)] = -w * dn.x;
            jac[(row + 1, col)] = -w * dn.y;
        }
        row += 2;
    }
    Ok(jac)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Level-view initialization: pitch = roll = 0, depth from the apparent
/// height of the longest visible segment, lateral from the median horizontal
/// coordinate.
pub fn initialize_state(
    obs: &FourPointObservation,
    heights: &JointHeights,
    nominal_camera_height: f64,
    bounds: &StateBounds,
) -> Result<PoseState, SolverError> {
    let visible: Vec<(f64, crate::camera::NormalizedPoint)> = obs
        .visible_points()
        .map(|(p, n)| (heights.get(p), n))
        .collect();
    if visible.len() < 2 {
        return Err(SolverError::InsufficientObservations {
            visible: visible.len(),
        });
    }
    // Heights are strictly ordered, so the extreme pair has the largest
    // height difference; the first visible point is the highest.
    let (h_top, n_top) = visible[0];
    let (h_bottom, n_bottom) = visible[visible.len() - 1];
    let apparent = n_bottom.y - n_top.y;
    if apparent.abs() < 1e-12 {
        return Err(SolverError::DegenerateObservation);
    }
    let depth = bounds.depth.clamp((h_top - h_bottom) / apparent);
    let mut xs: Vec<f64> = visible.iter().map(|(_, n)| n.x).collect();
    let lateral = bounds.lateral.clamp(depth * median(&mut xs));
    Ok(PoseState {
        lateral,
        depth,
        camera_height: bounds.camera_height.clamp(nominal_camera_height),
        pitch: bounds.pitch.clamp(0.0),
        roll: bounds.roll.clamp(0.0),
    })
}

/// Robustified residual vector at a state: each visible point's weighted
/// residual block rescaled so its squared norm equals the Cauchy cost.
fn robust_residuals(
    state: &PoseState,
    obs: &FourPointObservation,
    heights: &JointHeights,
    weights: &WeightConfig,
    cauchy_scale: f64,
) -> Option<DVector<f64>> {
    let (_, mut r) = reprojection_cost(state, obs, heights, weights, cauchy_scale).ok()?;
    for block in 0..r.len() / 2 {
        let s = r[2 * block] * r[2 * block] + r[2 * block + 1] * r[2 * block + 1];
        let scale = robust_scale(s, cauchy_scale);
        r[2 * block] *= scale;
        r[2 * block + 1] *= scale;
    }
    Some(r)
}

fn robust_jacobian(
    state: &PoseState,
    obs: &FourPointObservation,
    heights: &JointHeights,
    weights: &WeightConfig,
    cauchy_scale: f64,
) -> Option<DMatrix<f64>> {
    let (_, r) = reprojection_cost(state, obs, heights, weights, cauchy_scale).ok()?;
    let mut jac = analytic_jacobian(state, obs, heights, weights).ok()?;
    for block in 0..r.len() / 2 {
        let s = r[2 * block] * r[2 * block] + r[2 * block + 1] * r[2 * block + 1];
        let scale = robust_scale(s, cauchy_scale);
        for col in 0..5 {
            jac[(2 * block, col)] *= scale;
            jac[(2 * block + 1, col)] *= scale;
        }
    }
    Some(jac)
}

/// Solves one block (a subset of state indices) with dogbox, holding the
/// remaining parameters fixed. Returns the updated full state vector and the
/// iterations spent.
fn solve_block(
    x: &DVector<f64>,
    block: &[usize],
    obs: &FourPointObservation,
    heights: &JointHeights,
    weights: &WeightConfig,
    config: &SolverConfig,
) -> Result<(DVector<f64>, usize), SolverError> {
    let full_lower = config.bounds.lower();
    let full_upper = config.bounds.upper();
    let assemble = |sub: &DVector<f64>| {
        let mut full = x.clone();
        for (k, &j) in block.iter().enumerate() {
            full[j] = sub[k];
        }
        full
    };
    let residuals = |sub: &DVector<f64>| {
        let full = assemble(sub);
        robust_residuals(
            &PoseState::from_slice(full.as_slice()),
            obs,
            heights,
            weights,
            config.cauchy_scale,
        )
    };
    let jacobian = |sub: &DVector<f64>| {
        let full = assemble(sub);
        robust_jacobian(
            &PoseState::from_slice(full.as_slice()),
            obs,
            heights,
            weights,
            config.cauchy_scale,
        )
        .map(|j| j.select_columns(block.iter()))
    };

    let initial = DVector::from_iterator(block.len(), block.iter().map(|&j| x[j]));
    let lower = DVector::from_iterator(block.len(), block.iter().map(|&j| full_lower[j]));
    let upper = DVector::from_iterator(block.len(), block.iter().map(|&j| full_upper[j]));
    let report = dogbox_minimize(
        residuals,
        jacobian,
        &initial,
        &lower,
        &upper,
        &DogboxConfig {
            ftol: config.ftol,
            xtol: config.xtol,
            gtol: config.gtol,
            max_iterations: config.max_inner_iterations,
            initial_trust_radius: config.initial_trust_radius,
        },
    )?;
    let mut full = x.clone();
    for (k, &j) in block.iter().enumerate() {
        full[j] = report.x[k];
    }
    Ok((full, report.iterations))
}

const TRANSLATION_BLOCK: [usize; 3] = [0, 1, 2];
const ROTATION_BLOCK: [usize; 2] = [3, 4];

/// Full per-frame solve: level-view initialization followed by alternating
/// translation/rotation block minimization until the outer relative cost
/// change drops below `ftol` or the alternation budget runs out. Exhausting
/// the budget reports `converged = false` with the best state found.
pub fn solve_localization(
    obs: &FourPointObservation,
    heights: &JointHeights,
    weights: &WeightConfig,
    config: &SolverConfig,
) -> Result<LocalizationResult, SolverError> {
    weights.validate()?;
    config.bounds.validate()?;
    let visible = obs.visible_count();
    if visible < 3 {
        return Err(SolverError::InsufficientObservations { visible });
    }

    let initial = initialize_state(obs, heights, config.initial_camera_height, &config.bounds)?;
    let mut x = initial.to_vector();
    let cost_at = |x: &DVector<f64>| -> f64 {
        reprojection_cost(
            &PoseState::from_slice(x.as_slice()),
            obs,
            heights,
            weights,
            config.cauchy_scale,
        )
        .map(|(c, _)| c)
        .unwrap_or(f64::INFINITY)
    };

    let mut cost_prev = cost_at(&x);
    let mut iterations_used = 0;
    let mut alternations = 0;
    let mut converged = cost_prev <= 1e-24;
    if !converged {
        for _ in 0..config.max_outer_alternations {
            alternations += 1;
            let (x_t, used_t) = solve_block(&x, &TRANSLATION_BLOCK, obs, heights, weights, config)?;
            let (x_r, used_r) =
                solve_block(&x_t, &ROTATION_BLOCK, obs, heights, weights, config)?;
            iterations_used += used_t + used_r;
            x = x_r;
            let cost = cost_at(&x);
            if cost <= 1e-24 || cost_prev - cost < config.ftol * cost_prev {
                converged = true;
                break;
            }
            cost_prev = cost;
        }
    }

    let state = PoseState::from_slice(x.as_slice());
    let (final_cost, residuals) =
        reprojection_cost(&state, obs, heights, weights, config.cauchy_scale)?;
    let mut per_point = [None; 4];
    let mut row = 0;
    for (p, _) in obs.visible_points() {
        per_point[p.index()] =
            Some((residuals[row] * residuals[row] + residuals[row + 1] * residuals[row + 1]).sqrt());
        row += 2;
    }

    Ok(LocalizationResult {
        state,
        final_cost,
        per_point_residual_norms: per_point,
        converged,
        iterations_used,
        outer_alternations: alternations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_heights() -> JointHeights {
        JointHeights::new(1.5, 1.0, 0.5, 0.1).unwrap()
    }

    /// Independent evaluation of the forward chain: rotation from raw
    /// trigonometry, ray assembly, transpose multiply, depth division.
    fn oracle_project(state: &PoseState, point_height: f64) -> (f64, f64) {
        let (sp, cp) = state.pitch.sin_cos();
        let (sr, cr) = state.roll.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, rx_row) in rx.iter().enumerate() {
                    r[i][j] += rz[i][k] * rx_row[j];
                }
            }
        }
        let cp_vec = [
            state.lateral,
            state.camera_height - point_height,
            state.depth,
        ];
        let mut q = [0.0; 3];
        for (i, qi) in q.iter_mut().enumerate() {
            // R^{-1} = R^T for a rotation.
            for j in 0..3 {
                *qi += r[j][i] * cp_vec[j];
            }
        }
        (q[0] / q[2], q[1] / q[2])
    }

    #[test]
    fn rotation_identity_at_zero_angles() {
        let r = rotation_from_angles(0.0, 0.0);
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_pitch_maps_up_to_backward() {
        // Rx(pi/2) applied to the level up direction (0, -1, 0).
        let r = rotation_from_angles(std::f64::consts::FRAC_PI_2, 0.0);
        let v = r * Vector3::new(0.0, -1.0, 0.0);
        assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.z, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn forward_projection_level_example() {
        let state = PoseState {
            lateral: 0.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let obs = forward_project(&state, &test_heights()).unwrap();
        let expect = [(0.0, -0.25), (0.0, -0.125), (0.0, 0.0), (0.0, 0.1)];
        for (p, (ex, ey)) in BodyPoint::ALL.iter().zip(expect) {
            let n = obs.point(*p).unwrap();
            assert_abs_diff_eq!(n.x, ex, epsilon = 1e-15);
            assert_abs_diff_eq!(n.y, ey, epsilon = 1e-15);
        }
    }

    #[test]
    fn lateral_offset_shifts_all_x_equally() {
        let state = PoseState {
            lateral: 2.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let obs = forward_project(&state, &test_heights()).unwrap();
        for p in BodyPoint::ALL {
            assert_abs_diff_eq!(obs.point(p).unwrap().x, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_projection_matches_matrix_oracle_at_tilt() {
        let state = PoseState {
            lateral: 0.7,
            depth: 3.0,
            camera_height: 0.6,
            pitch: 10f64.to_radians(),
            roll: -4f64.to_radians(),
        };
        let heights = test_heights();
        let obs = forward_project(&state, &heights).unwrap();
        for p in BodyPoint::ALL {
            let (ox, oy) = oracle_project(&state, heights.get(p));
            let n = obs.point(p).unwrap();
            assert_abs_diff_eq!(n.x, ox, epsilon = 1e-13);
            assert_abs_diff_eq!(n.y, oy, epsilon = 1e-13);
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let state = PoseState {
            lateral: 0.0,
            depth: 0.4,
            camera_height: 1.0,
            pitch: -44f64.to_radians(),
            roll: 0.0,
        };
        // Pitching up hard at very close range pushes the ankle ray backward.
        let heights = JointHeights::new(1.9, 1.2, 0.6, 0.0).unwrap();
        assert!(matches!(
            forward_project(&state, &heights),
            Err(SolverError::BehindCamera)
        ));
    }

    #[test]
    fn cost_is_zero_at_ground_truth() {
        let state = PoseState {
            lateral: 0.3,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.1,
            roll: -0.05,
        };
        let heights = test_heights();
        let obs = forward_project(&state, &heights).unwrap();
        let (cost, residuals) =
            reprojection_cost(&state, &obs, &heights, &WeightConfig::default(), 0.01).unwrap();
        assert_abs_diff_eq!(cost, 0.0, epsilon = 1e-20);
        assert!(residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn cauchy_reduces_to_quadratic_for_large_scale() {
        // Single visible point with weight 1: as the scale grows the robust
        // cost approaches the plain squared norm.
        let heights = test_heights();
        let truth = PoseState {
            lateral: 0.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let obs = forward_project(&truth, &heights).unwrap();
        let single = obs.without(BodyPoint::Hip).unwrap();
        let single = single.without(BodyPoint::Knee).unwrap();
        let single = single.without(BodyPoint::Ankle).unwrap();
        let perturbed = PoseState {
            depth: 4.5,
            ..truth
        };
        let weights = WeightConfig {
            neck: 1.0,
            hip: 1.0,
            knee: 1.0,
            ankle: 1.0,
        };
        let (cost, residuals) =
            reprojection_cost(&perturbed, &single, &heights, &weights, 1e6).unwrap();
        assert_abs_diff_eq!(cost, residuals.norm_squared(), epsilon = 1e-12);
    }

    #[test]
    fn cost_matches_term_wise_oracle_when_perturbed() {
        let heights = test_heights();
        let truth = PoseState {
            lateral: 0.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let obs = forward_project(&truth, &heights).unwrap();
        let perturbed = PoseState {
            depth: 4.5,
            ..truth
        };
        let weights = WeightConfig::default();
        let scale = 0.01;
        let (cost, _) = reprojection_cost(&perturbed, &obs, &heights, &weights, scale).unwrap();

        // Term-wise recomputation with the independent projection oracle.
        let mut expected = 0.0;
        for p in BodyPoint::ALL {
            let n = obs.point(p).unwrap();
            let (px, py) = oracle_project(&perturbed, heights.get(p));
            let w = weights.get(p);
            let s = w * ((n.x - px).powi(2) + (n.y - py).powi(2));
            expected += scale * scale * (1.0 + s / (scale * scale)).ln();
        }
        assert_abs_diff_eq!(cost, expected, epsilon = 1e-14);
    }

    #[test]
    fn cauchy_identities() {
        let c = 0.01;
        assert_eq!(cauchy_rho(0.0, c), 0.0);
        for s in [1e-9, 1e-6, 1e-4, 0.01, 1.0, 100.0] {
            assert!(cauchy_rho(s, c) <= s);
        }
        // rho'(0) = 1: finite-difference check at the origin.
        let h = 1e-9;
        assert_abs_diff_eq!(cauchy_rho(h, c) / h, 1.0, epsilon = 1e-4);
    }

    fn finite_difference_jacobian(
        state: &PoseState,
        obs: &FourPointObservation,
        heights: &JointHeights,
        weights: &WeightConfig,
    ) -> DMatrix<f64> {
        let h = 1e-6;
        let x0 = state.to_vector();
        let rows = 2 * obs.visible_count();
        let mut jac = DMatrix::zeros(rows, 5);
        for col in 0..5 {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus[col] += h;
            minus[col] -= h;
            let (_, rp) = reprojection_cost(
                &PoseState::from_slice(plus.as_slice()),
                obs,
                heights,
                weights,
                0.01,
            )
            .unwrap();
            let (_, rm) = reprojection_cost(
                &PoseState::from_slice(minus.as_slice()),
                obs,
                heights,
                weights,
                0.01,
            )
            .unwrap();
            for row in 0..rows {
                jac[(row, col)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let heights = test_heights();
        let weights = WeightConfig::default();
        for _ in 0..200 {
            let state = PoseState {
                lateral: rng.gen_range(-3.0..3.0),
                depth: rng.gen_range(1.5..10.0),
                camera_height: rng.gen_range(0.25..1.15),
                pitch: rng.gen_range(-0.6..0.6),
                roll: rng.gen_range(-0.6..0.6),
            };
            let Ok(obs) = forward_project(&state, &heights) else {
                continue;
            };
            let analytic = analytic_jacobian(&state, &obs, &heights, &weights).unwrap();
            let numeric = finite_difference_jacobian(&state, &obs, &heights, &weights);
            for row in 0..analytic.nrows() {
                for col in 0..5 {
                    let err = (analytic[(row, col)] - numeric[(row, col)]).abs()
                        / numeric[(row, col)].abs().max(1.0);
                    assert!(
                        err < 1e-5,
                        "entry ({row}, {col}): analytic {} vs numeric {}",
                        analytic[(row, col)],
                        numeric[(row, col)]
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_lateral_column_at_level_view() {
        // Hand derivation: at identity rotation, every x-residual derivative
        // with respect to the lateral offset is -sqrt(w) / depth.
        let heights = test_heights();
        let weights = WeightConfig::default();
        let state = PoseState {
            lateral: 0.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let obs = forward_project(&state, &heights).unwrap();
        let jac = analytic_jacobian(&state, &obs, &heights, &weights).unwrap();
        for (i, p) in BodyPoint::ALL.iter().enumerate() {
            let expected = -weights.get(*p).sqrt() / state.depth;
            assert_abs_diff_eq!(jac[(2 * i, 0)], expected, epsilon = 1e-14);
            // Camera-height column of the y-residual rows has the same form.
            assert_abs_diff_eq!(jac[(2 * i + 1, 2)], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn initialization_is_exact_at_level_view() {
        let truth = PoseState {
            lateral: 0.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let heights = test_heights();
        let obs = forward_project(&truth, &heights).unwrap();
        let init = initialize_state(&obs, &heights, 0.5, &StateBounds::default()).unwrap();
        assert_abs_diff_eq!(init.depth, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(init.lateral, 0.0, epsilon = 1e-12);
        assert_eq!(init.camera_height, 0.5);
        assert_eq!((init.pitch, init.roll), (0.0, 0.0));
    }

    #[test]
    fn initialization_depth_formula() {
        // neck at (0, -0.25) and ankle at (0, 0.1): depth = 1.4 / 0.35 = 4.
        let obs = FourPointObservation::from_points(
            0,
            0.0,
            0,
            [
                Some(crate::camera::NormalizedPoint::new(0.0, -0.25)),
                None,
                None,
                Some(crate::camera::NormalizedPoint::new(0.0, 0.1)),
            ],
        )
        .unwrap();
        let init =
            initialize_state(&obs, &test_heights(), 0.5, &StateBounds::default()).unwrap();
        assert_abs_diff_eq!(init.depth, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn coincident_rows_are_degenerate() {
        let obs = FourPointObservation::from_points(
            0,
            0.0,
            0,
            [
                Some(crate::camera::NormalizedPoint::new(0.1, 0.0)),
                Some(crate::camera::NormalizedPoint::new(0.2, 0.0)),
                Some(crate::camera::NormalizedPoint::new(0.3, 0.0)),
                Some(crate::camera::NormalizedPoint::new(0.4, 0.0)),
            ],
        )
        .unwrap();
        assert!(matches!(
            initialize_state(&obs, &test_heights(), 0.5, &StateBounds::default()),
            Err(SolverError::DegenerateObservation)
        ));
    }

    fn random_state(rng: &mut ChaCha8Rng) -> PoseState {
        let bounds = StateBounds::default();
        loop {
            let state = PoseState {
                lateral: rng.gen_range(-4.0..4.0),
                depth: rng.gen_range(1.5..10.0),
                camera_height: rng.gen_range(
                    bounds.camera_height.shrunk(0.9).min..bounds.camera_height.shrunk(0.9).max,
                ),
                pitch: rng.gen_range(bounds.pitch.shrunk(0.9).min..bounds.pitch.shrunk(0.9).max),
                roll: rng.gen_range(bounds.roll.shrunk(0.9).min..bounds.roll.shrunk(0.9).max),
            };
            if let Ok(obs) = forward_project(&state, &test_heights()) {
                let in_view = obs
                    .visible_points()
                    .all(|(_, n)| n.x.abs() <= 2.0 && n.y.abs() <= 2.0);
                if in_view {
                    return state;
                }
            }
        }
    }

    #[test]
    fn noiseless_round_trip_recovers_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let heights = test_heights();
        let weights = WeightConfig::default();
        let config = SolverConfig::default();
        for _ in 0..50 {
            let truth = random_state(&mut rng);
            let obs = forward_project(&truth, &heights).unwrap();
            let result = solve_localization(&obs, &heights, &weights, &config).unwrap();
            assert!(result.converged, "truth {truth:?}");
            assert_abs_diff_eq!(result.state.lateral, truth.lateral, epsilon = 1e-3);
            assert_abs_diff_eq!(result.state.depth, truth.depth, epsilon = 1e-3);
            assert_abs_diff_eq!(
                result.state.camera_height,
                truth.camera_height,
                epsilon = 1e-3
            );
            let tol = 0.1f64.to_radians();
            assert_abs_diff_eq!(result.state.pitch, truth.pitch, epsilon = tol);
            assert_abs_diff_eq!(result.state.roll, truth.roll, epsilon = tol);
        }
    }

    #[test]
    fn three_point_solve_still_recovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let heights = test_heights();
        let weights = WeightConfig::default();
        let config = SolverConfig::default();
        for drop in [BodyPoint::Ankle, BodyPoint::Neck] {
            for _ in 0..20 {
                let truth = random_state(&mut rng);
                let obs = forward_project(&truth, &heights)
                    .unwrap()
                    .without(drop)
                    .unwrap();
                let result = solve_localization(&obs, &heights, &weights, &config).unwrap();
                assert!(result.converged, "truth {truth:?} without {drop:?}");
                assert_abs_diff_eq!(result.state.depth, truth.depth, epsilon = 1e-3);
                assert_abs_diff_eq!(result.state.lateral, truth.lateral, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn two_visible_points_are_rejected() {
        let truth = PoseState {
            lateral: 0.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let heights = test_heights();
        let obs = forward_project(&truth, &heights)
            .unwrap()
            .without(BodyPoint::Knee)
            .unwrap()
            .without(BodyPoint::Ankle)
            .unwrap();
        assert!(matches!(
            solve_localization(&obs, &heights, &WeightConfig::default(), &SolverConfig::default()),
            Err(SolverError::InsufficientObservations { visible: 2 })
        ));
    }

    #[test]
    fn ground_truth_observation_converges_immediately() {
        let truth = PoseState {
            lateral: 0.0,
            depth: 4.0,
            camera_height: 0.5,
            pitch: 0.0,
            roll: 0.0,
        };
        let heights = test_heights();
        let obs = forward_project(&truth, &heights).unwrap();
        // Level-view initialization is exact for this observation, so the
        // initial cost is already zero.
        let result =
            solve_localization(&obs, &heights, &WeightConfig::default(), &SolverConfig::default())
                .unwrap();
        assert!(result.converged);
        assert!(result.outer_alternations <= 1);
        assert_abs_diff_eq!(result.final_cost, 0.0, epsilon = 1e-20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rotation_is_orthonormal(pitch in -1.5f64..1.5, roll in -1.5f64..1.5) {
            let r = rotation_from_angles(pitch, roll);
            let should_be_identity = r.transpose() * r;
            for i in 0..3 {
                for j in 0..3 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((should_be_identity[(i, j)] - expected).abs() < 1e-12);
                }
            }
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotation_is_applied_as_inverse(
            pitch in -0.7f64..0.7,
            roll in -0.7f64..0.7,
            depth in 2.0f64..8.0,
        ) {
            // forward_project must apply R^{-1}: rotating its rays by R gives
            // the level-camera rays of the same body-frame points.
            let heights = test_heights();
            let state = PoseState { lateral: 0.4, depth, camera_height: 0.6, pitch, roll };
            let Ok(obs) = forward_project(&state, &heights) else { return Ok(()); };
            let r = rotation_from_angles(pitch, roll);
            for p in BodyPoint::ALL {
                let n = obs.point(p).unwrap();
                let rotated = r * Vector3::new(n.x, n.y, 1.0);
                let cp = Vector3::new(
                    state.lateral,
                    state.camera_height - heights.get(p),
                    state.depth,
                );
                // Rays are parallel iff the cross product vanishes.
                let cross = rotated.cross(&cp);
                prop_assert!(cross.norm() < 1e-9 * cp.norm() * rotated.norm().max(1.0));
            }
        }
    }
}
