//! Evaluation metrics, the pelvis location convention, ground-truth file
//! handling, and the synthetic scene generator.
//!
//! A person's 3D location is represented by the pelvis (hip center) in the
//! camera frame; their distance is its L2 norm. Sequences are scored by the
//! mean location/distance error and by the population variance of the
//! per-frame error series, which measures stability under ego-motion.

pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraFramePoint;
use crate::solver::{camera_point, JointHeights, PoseState};

/// Camera-frame pelvis position for a state: the hip point of the rigid
/// model.
pub fn pelvis_location(state: &PoseState, heights: &JointHeights) -> CameraFramePoint {
    camera_point(state, heights.hip)
}

/// A per-frame pelvis estimate (or full ground truth) in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationSample {
    pub frame_id: u64,
    pub person_id: u64,
    pub point: CameraFramePoint,
}

/// Ground truth for one frame: either a full camera-frame pelvis position or
/// a distance-only measurement (UWB-style).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruthSample {
    Location {
        frame_id: u64,
        person_id: u64,
        point: CameraFramePoint,
    },
    Distance {
        frame_id: u64,
        person_id: u64,
        distance: f64,
    },
}

impl TruthSample {
    fn key(&self) -> (u64, u64) {
        match *self {
            TruthSample::Location {
                frame_id,
                person_id,
                ..
            }
            | TruthSample::Distance {
                frame_id,
                person_id,
                ..
            } => (frame_id, person_id),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    frame: u64,
    person: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pelvis_xyz: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distance: Option<f64>,
}

/// Parses a JSON-lines ground-truth sidecar. Each record carries either
/// `pelvis_xyz` or `distance`.
pub fn parse_ground_truth(text: &str) -> Result<Vec<TruthSample>, EvalError> {
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TruthRecord = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let sample = match (record.pelvis_xyz, record.distance) {
            (Some([x, y, z]), None) => TruthSample::Location {
                frame_id: record.frame,
                person_id: record.person,
                point: CameraFramePoint::new(x, y, z),
            },
            (None, Some(distance)) => TruthSample::Distance {
                frame_id: record.frame,
                person_id: record.person,
                distance,
            },
            _ => {
                return Err(EvalError::Parse {
                    line: idx + 1,
                    message: "record must carry exactly one of pelvis_xyz or distance"
                        .to_string(),
                })
            }
        };
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<TruthSample>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_ground_truth(&text)
}

/// Serializes ground-truth samples back to the JSON-lines sidecar format.
pub fn ground_truth_lines(samples: &[TruthSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let record = match *s {
            TruthSample::Location {
                frame_id,
                person_id,
                point,
            } => TruthRecord {
                frame: frame_id,
                person: person_id,
                pelvis_xyz: Some([point.x, point.y, point.z]),
                distance: None,
            },
            TruthSample::Distance {
                frame_id,
                person_id,
                distance,
            } => TruthRecord {
                frame: frame_id,
                person: person_id,
                pelvis_xyz: None,
                distance: Some(distance),
            },
        };
        out.push_str(&serde_json::to_string(&record).expect("truth record serializes"));
        out.push('\n');
    }
    out
}

/// Error of one matched frame.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrameError {
    pub frame_id: u64,
    pub person_id: u64,
    /// Euclidean pelvis error, absent for distance-only ground truth.
    pub location_error: Option<f64>,
    /// Absolute camera-distance error.
    pub distance_error: f64,
}

/// Sequence metrics. Location metrics are absent when the ground truth is
/// distance-only. Variances are population variances (divide by N) of the
/// per-frame error series.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ale: Option<f64>,
    pub ade: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vle: Option<f64>,
    pub vde: f64,
    pub frame_count: usize,
    pub per_frame: Vec<FrameError>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no matched frames between estimates and ground truth")]
    NoMatchedFrames,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// Matches estimates to ground truth on (frame, person) and computes the
/// error metrics. Any distance-only truth record downgrades the report to
/// ADE/VDE only.
pub fn compute_metrics(
    estimates: &[LocationSample],
    truth: &[TruthSample],
) -> Result<MetricReport, EvalError> {
    let truth_by_key: BTreeMap<(u64, u64), &TruthSample> =
        truth.iter().map(|t| (t.key(), t)).collect();

    let mut per_frame = Vec::new();
    let mut location_complete = true;
    for est in estimates {
        let Some(gt) = truth_by_key.get(&(est.frame_id, est.person_id)) else {
            continue;
        };
        let est_distance = est.point.norm();
        match **gt {
            TruthSample::Location { point, .. } => {
                let dx = est.point.x - point.x;
                let dy = est.point.y - point.y;
                let dz = est.point.z - point.z;
                per_frame.push(FrameError {
                    frame_id: est.frame_id,
                    person_id: est.person_id,
                    location_error: Some((dx * dx + dy * dy + dz * dz).sqrt()),
                    distance_error: (est_distance - point.norm()).abs(),
                });
            }
            TruthSample::Distance { distance, .. } => {
                location_complete = false;
                per_frame.push(FrameError {
                    frame_id: est.frame_id,
                    person_id: est.person_id,
                    location_error: None,
                    distance_error: (est_distance - distance).abs(),
                });
            }
        }
    }
    if per_frame.is_empty() {
        return Err(EvalError::NoMatchedFrames);
    }

    let n = per_frame.len() as f64;
    let ade = per_frame.iter().map(|e| e.distance_error).sum::<f64>() / n;
    let vde = population_variance(per_frame.iter().map(|e| e.distance_error));
    let (ale, vle) = if location_complete {
        let ale = per_frame
            .iter()
            .map(|e| e.location_error.expect("complete"))
            .sum::<f64>()
            / n;
        let vle = population_variance(per_frame.iter().map(|e| e.location_error.expect("complete")));
        (Some(ale), Some(vle))
    } else {
        (None, None)
    };

    Ok(MetricReport {
        ale,
        ade,
        vle,
        vde,
        frame_count: per_frame.len(),
        per_frame,
    })
}
