//! End-to-end per-frame localization over a detection file: reduce, solve,
//! pelvis. Frames that fail a precondition are reported with a skip reason,
//! never dropped.

use crate::camera::{CameraFramePoint, CameraModel};
use crate::evalkit::pelvis_location;
use crate::observation::{reduce_to_four_points, ObservationError, RawJointFrame};
use crate::solver::{solve_localization, JointHeights, PoseState, SolverConfig, SolverError, WeightConfig};

/// Why a frame produced no estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    NoVisiblePoints,
    InsufficientObservations,
    DegenerateObservation,
    NumericalFailure,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::NoVisiblePoints => "no_visible_points",
            SkipReason::InsufficientObservations => "insufficient_observations",
            SkipReason::DegenerateObservation => "degenerate_observation",
            SkipReason::NumericalFailure => "numerical_failure",
        }
    }
}

#[derive(Debug, Clone)]
pub enum EstimateOutcome {
    Solved {
        state: PoseState,
        pelvis: CameraFramePoint,
        distance: f64,
        cost: f64,
        converged: bool,
    },
    Skipped(SkipReason),
}

#[derive(Debug, Clone)]
pub struct FrameEstimate {
    pub frame_id: u64,
    pub timestamp: f64,
    pub person_id: u64,
    pub outcome: EstimateOutcome,
}

/// Runs the localization pipeline over detection frames in file order.
/// Camera or config errors you cannot recover from per-frame still bubble up
/// as solver errors inside the skip reason.
pub fn localize_frames(
    frames: &[RawJointFrame],
    camera: &CameraModel,
    heights: &JointHeights,
    weights: &WeightConfig,
    solver_config: &SolverConfig,
    confidence_threshold: f64,
) -> Vec<FrameEstimate> {
    frames
        .iter()
        .map(|frame| {
            let outcome = estimate_frame(
                frame,
                camera,
                heights,
                weights,
                solver_config,
                confidence_threshold,
            );
            FrameEstimate {
                frame_id: frame.frame_id,
                timestamp: frame.timestamp,
                person_id: frame.person_id,
                outcome,
            }
        })
        .collect()
}

fn estimate_frame(
    frame: &RawJointFrame,
    camera: &CameraModel,
    heights: &JointHeights,
    weights: &WeightConfig,
    solver_config: &SolverConfig,
    confidence_threshold: f64,
) -> EstimateOutcome {
    let obs = match reduce_to_four_points(frame, camera, confidence_threshold) {
        Ok(obs) => obs,
        Err(ObservationError::NoVisiblePoints { .. }) => {
            return EstimateOutcome::Skipped(SkipReason::NoVisiblePoints)
        }
        Err(_) => return EstimateOutcome::Skipped(SkipReason::NumericalFailure),
    };
    match solve_localization(&obs, heights, weights, solver_config) {
        Ok(result) => {
            let pelvis = pelvis_location(&result.state, heights);
            EstimateOutcome::Solved {
                state: result.state,
                pelvis,
                distance: pelvis.norm(),
                cost: result.final_cost,
                converged: result.converged,
            }
        }
        Err(SolverError::InsufficientObservations { .. }) => {
            EstimateOutcome::Skipped(SkipReason::InsufficientObservations)
        }
        Err(SolverError::DegenerateObservation) => {
            EstimateOutcome::Skipped(SkipReason::DegenerateObservation)
        }
        Err(_) => EstimateOutcome::Skipped(SkipReason::NumericalFailure),
    }
}
