//! Initialization-phase estimation of a person's joint heights from static
//! frames with known camera attitude and height.
//!
//! With the rotation known, cross-multiplying the projection equations by the
//! point depth turns the reprojection constraints into equations linear in
//! the per-frame location and the four shared heights, solvable in one shot
//! by singular value decomposition. The algebraic (cross-multiplied) error
//! differs from the reprojection error by a per-point depth factor; at
//! calibration range the bias is negligible and buys an exactly linear
//! problem.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::observation::{BodyPoint, FourPointObservation};
use crate::solver::{rotation_from_angles, JointHeights, SolverError, WeightConfig};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no calibration frames supplied")]
    NoFrames,
    #[error("calibration frame {frame_index} is missing the {point} point")]
    MissingPoint {
        frame_index: usize,
        point: &'static str,
    },
    #[error("calibration system is rank deficient (rank {rank} of {unknowns} unknowns)")]
    RankDeficient { rank: usize, unknowns: usize },
    #[error("recovered heights {heights:?} are not physically ordered")]
    NonPhysicalHeights { heights: [f64; 4] },
    #[error("known attitude and camera height must be finite")]
    InvalidKnownPose,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// The assembled linear system: one pair of rows per point per frame.
/// Unknown layout: per-frame (lateral, depth) pairs first, then the four
/// shared heights in body order.
#[derive(Debug, Clone)]
pub struct CalibrationSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub frame_count: usize,
}

/// Singular spectrum of a calibration (or any) system matrix.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
}

impl ConditionReport {
    pub fn of(matrix: &DMatrix<f64>) -> Self {
        let svd = matrix.clone().svd(false, false);
        let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
        singular_values.sort_by(|a, b| b.total_cmp(a));
        let smax = singular_values.first().copied().unwrap_or(0.0);
        let smin = singular_values.last().copied().unwrap_or(0.0);
        let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        Self {
            singular_values,
            condition_number,
        }
    }
}

impl CalibrationSystem {
    pub fn condition_report(&self) -> ConditionReport {
        ConditionReport::of(&self.matrix)
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationSolution {
    pub heights: JointHeights,
    /// One (lateral, depth) pair per calibration frame, in input order.
    pub per_frame_locations: Vec<(f64, f64)>,
    pub condition: ConditionReport,
}

/// Builds the stacked linear system for the given frames under a known
/// attitude (pitch, roll) and camera height. All four points must be visible
/// in every frame.
pub fn assemble_system(
    observations: &[FourPointObservation],
    known_attitude: (f64, f64),
    known_camera_height: f64,
    weights: &WeightConfig,
) -> Result<CalibrationSystem, CalibrationError> {
    if observations.is_empty() {
        return Err(CalibrationError::NoFrames);
    }
    let (pitch, roll) = known_attitude;
    if !pitch.is_finite() || !roll.is_finite() || !known_camera_height.is_finite() {
        return Err(CalibrationError::InvalidKnownPose);
    }
    weights.validate()?;

    let rotation = rotation_from_angles(pitch, roll);
    let rt = rotation.transpose();
    let (r1, r2, r3) = (
        rt.row(0).transpose(),
        rt.row(1).transpose(),
        rt.row(2).transpose(),
    );

    let frame_count = observations.len();
    let unknowns = 2 * frame_count + 4;
    let mut matrix = DMatrix::zeros(8 * frame_count, unknowns);
    let mut rhs = DVector::zeros(8 * frame_count);

    for (f, obs) in observations.iter().enumerate() {
        for p in BodyPoint::ALL {
            let n = obs.point(p).ok_or(CalibrationError::MissingPoint {
                frame_index: f,
                point: p.name(),
            })?;
            let w = crate::solver::WeightConfig::get(weights, p).sqrt();
            let row_base = 8 * f + 2 * p.index();
            // The ray in the level robot frame is
            //   cp = (lateral, h_C - h_p, depth)
            // and the projected coordinates satisfy
            //   n_x * (r3 . cp) - (r1 . cp) = 0,
            //   n_y * (r3 . cp) - (r2 . cp) = 0.
            // Expanding cp makes each constraint linear in (lateral, depth,
            // h_p) with the known h_C on the right-hand side.
            for (k, coeff_row) in [(0usize, n.x), (1usize, n.y)] {
                let a: Vector3<f64> = match k {
                    0 => &r3 * coeff_row - &r1,
                    _ => &r3 * coeff_row - &r2,
                };
                let row = row_base + k;
                matrix[(row, 2 * f)] = w * a.x;
                matrix[(row, 2 * f + 1)] = w * a.z;
                matrix[(row, 2 * frame_count + p.index())] = -w * a.y;
                rhs[row] = -w * a.y * known_camera_height;
            }
        }
    }

    Ok(CalibrationSystem {
        matrix,
        rhs,
        frame_count,
    })
}

/// Joint least-squares estimation of the four shared heights and each
/// frame's (lateral, depth), solved by SVD. The height ordering
/// `neck > hip > knee > ankle >= 0` is checked after the solve.
pub fn calibrate_heights(
    observations: &[FourPointObservation],
    known_attitude: (f64, f64),
    known_camera_height: f64,
    weights: &WeightConfig,
) -> Result<CalibrationSolution, CalibrationError> {
    let system = assemble_system(observations, known_attitude, known_camera_height, weights)?;
    let unknowns = system.matrix.ncols();

    let svd = system.matrix.clone().svd(true, true);
    let smax = svd
        .singular_values
        .iter()
        .fold(0.0_f64, |acc, s| acc.max(*s));
    let tol = smax * 1e-10;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < unknowns {
        return Err(CalibrationError::RankDeficient { rank, unknowns });
    }
    let solution = svd
        .solve(&system.rhs, tol)
        .map_err(|_| CalibrationError::RankDeficient { rank, unknowns })?;

    let h = [
        solution[2 * system.frame_count],
        solution[2 * system.frame_count + 1],
        solution[2 * system.frame_count + 2],
        solution[2 * system.frame_count + 3],
    ];
    let heights = JointHeights::new(h[0], h[1], h[2], h[3])
        .map_err(|_| CalibrationError::NonPhysicalHeights { heights: h })?;

    let per_frame_locations = (0..system.frame_count)
        .map(|f| (solution[2 * f], solution[2 * f + 1]))
        .collect();

    Ok(CalibrationSolution {
        heights,
        per_frame_locations,
        condition: system.condition_report(),
    })
}
