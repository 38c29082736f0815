//! Frame ingestion: raw per-person 2D joint detections, reduction to the
//! four-point body model, and normalization onto the image plane.
//!
//! Detections enter through a JSON-lines file, one object per person per
//! frame. Left/right joint pairs are collapsed to their midpoint (the median
//! of two values), the neck falls back to the shoulder midpoint, and
//! everything is back-projected through the camera so downstream code never
//! sees pixels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraModel, NormalizedPoint, PixelPoint};

/// The four body points of the rigid model, ordered top to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BodyPoint {
    Neck,
    Hip,
    Knee,
    Ankle,
}

impl BodyPoint {
    pub const ALL: [BodyPoint; 4] = [
        BodyPoint::Neck,
        BodyPoint::Hip,
        BodyPoint::Knee,
        BodyPoint::Ankle,
    ];

    pub fn index(self) -> usize {
        match self {
            BodyPoint::Neck => 0,
            BodyPoint::Hip => 1,
            BodyPoint::Knee => 2,
            BodyPoint::Ankle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPoint::Neck => "neck",
            BodyPoint::Hip => "hip",
            BodyPoint::Knee => "knee",
            BodyPoint::Ankle => "ankle",
        }
    }
}

/// One person's joint detections in one frame, straight from the detector
/// file. Joint values are `[u, v, confidence]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawJointFrame {
    #[serde(rename = "frame")]
    pub frame_id: u64,
    #[serde(rename = "t")]
    pub timestamp: f64,
    #[serde(rename = "person")]
    pub person_id: u64,
    pub joints: BTreeMap<String, [f64; 3]>,
}

impl RawJointFrame {
    fn validate(&self, line: usize) -> Result<(), ObservationError> {
        for (name, [u, v, c]) in &self.joints {
            if !u.is_finite() || !v.is_finite() {
                return Err(ObservationError::Schema {
                    line,
                    message: format!("joint `{name}` has non-finite coordinates"),
                });
            }
            if !(0.0..=1.0).contains(c) {
                return Err(ObservationError::Schema {
                    line,
                    message: format!("joint `{name}` confidence {c} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }
}

/// Normalized-plane measurements of the four body points with per-point
/// visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct FourPointObservation {
    pub frame_id: u64,
    pub timestamp: f64,
    pub person_id: u64,
    points: [Option<NormalizedPoint>; 4],
}

impl FourPointObservation {
    pub fn from_points(
        frame_id: u64,
        timestamp: f64,
        person_id: u64,
        points: [Option<NormalizedPoint>; 4],
    ) -> Result<Self, ObservationError> {
        if points.iter().flatten().count() == 0 {
            return Err(ObservationError::NoVisiblePoints {
                frame_id,
                person_id,
            });
        }
        if points.iter().flatten().any(|n| !n.is_finite()) {
            return Err(ObservationError::Schema {
                line: 0,
                message: "visible points must carry finite coordinates".to_string(),
            });
        }
        Ok(Self {
            frame_id,
            timestamp,
            person_id,
            points,
        })
    }

    pub fn point(&self, p: BodyPoint) -> Option<NormalizedPoint> {
        self.points[p.index()]
    }

    pub fn visible(&self, p: BodyPoint) -> bool {
        self.points[p.index()].is_some()
    }

    pub fn visible_count(&self) -> usize {
        self.points.iter().flatten().count()
    }

    /// Iterates visible points in top-to-bottom body order.
    pub fn visible_points(&self) -> impl Iterator<Item = (BodyPoint, NormalizedPoint)> + '_ {
        BodyPoint::ALL
            .iter()
            .filter_map(|&p| self.points[p.index()].map(|n| (p, n)))
    }

    /// Returns a copy with one point removed, or an error if that would leave
    /// nothing visible.
    pub fn without(&self, p: BodyPoint) -> Result<Self, ObservationError> {
        let mut points = self.points;
        points[p.index()] = None;
        Self::from_points(self.frame_id, self.timestamp, self.person_id, points)
    }

    /// Validity flag for a physically upright observation: with all four
    /// points visible, their y coordinates must increase strictly top to
    /// bottom (y grows downward). Not a hard rejection; callers decide.
    pub fn upright_consistent(&self) -> bool {
        let ys: Vec<f64> = self.visible_points().map(|(_, n)| n.y).collect();
        ys.len() == 4 && ys.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("no visible points for person {person_id} in frame {frame_id}")]
    NoVisiblePoints { frame_id: u64, person_id: u64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Camera(#[from] CameraError),
}

fn joint(frame: &RawJointFrame, name: &str, threshold: f64) -> Option<PixelPoint> {
    frame
        .joints
        .get(name)
        .filter(|[_, _, c]| *c >= threshold)
        .map(|[u, v, _]| PixelPoint::new(*u, *v))
}

/// Midpoint of a left/right pair when both sides clear the confidence
/// threshold, the single confident side otherwise.
fn reduce_pair(
    frame: &RawJointFrame,
    left: &str,
    right: &str,
    threshold: f64,
) -> Option<PixelPoint> {
    match (joint(frame, left, threshold), joint(frame, right, threshold)) {
        (Some(l), Some(r)) => Some(PixelPoint::new((l.u + r.u) / 2.0, (l.v + r.v) / 2.0)),
        (Some(p), None) | (None, Some(p)) => Some(p),
        (None, None) => None,
    }
}

/// Reduces a raw joint frame to the four-point model and back-projects the
/// surviving pixels onto the normalized plane.
///
/// A point whose ray cannot be normalized (behind the camera, or a detection
/// outside the image) is marked invisible rather than failing the frame;
/// distortion divergence is propagated because it signals broken intrinsics.
pub fn reduce_to_four_points(
    frame: &RawJointFrame,
    camera: &CameraModel,
    confidence_threshold: f64,
) -> Result<FourPointObservation, ObservationError> {
    let neck_pixel = joint(frame, "neck", confidence_threshold).or_else(|| {
        match (
            joint(frame, "left_shoulder", confidence_threshold),
            joint(frame, "right_shoulder", confidence_threshold),
        ) {
            (Some(l), Some(r)) => Some(PixelPoint::new((l.u + r.u) / 2.0, (l.v + r.v) / 2.0)),
            _ => None,
        }
    });
    let pixels = [
        neck_pixel,
        reduce_pair(frame, "left_hip", "right_hip", confidence_threshold),
        reduce_pair(frame, "left_knee", "right_knee", confidence_threshold),
        reduce_pair(frame, "left_ankle", "right_ankle", confidence_threshold),
    ];

    let mut points = [None; 4];
    for (slot, pixel) in points.iter_mut().zip(pixels) {
        let Some(pixel) = pixel else { continue };
        *slot = match camera.back_project(pixel) {
            Ok(n) => Some(n),
            Err(CameraError::BehindCamera { .. }) | Err(CameraError::OutOfBounds { .. }) => None,
            Err(e) => return Err(e.into()),
        };
    }
    FourPointObservation::from_points(frame.frame_id, frame.timestamp, frame.person_id, points)
}

/// Loads a JSON-lines detection file, in file order. Blank lines are skipped;
/// anything else must parse as a [`RawJointFrame`].
pub fn load_frames(path: impl AsRef<Path>) -> Result<Vec<RawJointFrame>, ObservationError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ObservationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_frames(&text)
}

/// Parses JSON-lines detection records from a string. Line numbers in errors
/// are 1-based.
pub fn parse_frames(text: &str) -> Result<Vec<RawJointFrame>, ObservationError> {
    let mut frames = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let frame: RawJointFrame =
            serde_json::from_str(line).map_err(|e| ObservationError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        frame.validate(idx + 1)?;
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn camera() -> CameraModel {
        CameraModel::pinhole(640, 480, 500.0, 500.0, 320.0, 240.0, [0.0; 4]).unwrap()
    }

    fn frame_with(joints: &[(&str, [f64; 3])]) -> RawJointFrame {
        RawJointFrame {
            frame_id: 0,
            timestamp: 0.0,
            person_id: 0,
            joints: joints
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }

    #[test]
    fn pair_reduces_to_midpoint() {
        let frame = frame_with(&[
            ("left_hip", [100.0, 200.0, 0.9]),
            ("right_hip", [110.0, 210.0, 0.9]),
        ]);
        let obs = reduce_to_four_points(&frame, &camera(), 0.5).unwrap();
        let hip = obs.point(BodyPoint::Hip).unwrap();
        // Midpoint pixel (105, 205) normalized.
        assert_eq!(hip.x, (105.0 - 320.0) / 500.0);
        assert_eq!(hip.y, (205.0 - 240.0) / 500.0);
    }

    #[test]
    fn single_confident_side_is_used_alone() {
        let frame = frame_with(&[
            ("left_knee", [100.0, 300.0, 0.2]),
            ("right_knee", [110.0, 310.0, 0.9]),
            ("left_hip", [100.0, 200.0, 0.9]),
        ]);
        let obs = reduce_to_four_points(&frame, &camera(), 0.5).unwrap();
        let knee = obs.point(BodyPoint::Knee).unwrap();
        assert_eq!(knee.x, (110.0 - 320.0) / 500.0);
        assert_eq!(knee.y, (310.0 - 240.0) / 500.0);
    }

    #[test]
    fn all_below_threshold_is_no_visible_points() {
        let frame = frame_with(&[
            ("left_hip", [100.0, 200.0, 0.1]),
            ("right_knee", [110.0, 310.0, 0.2]),
        ]);
        assert!(matches!(
            reduce_to_four_points(&frame, &camera(), 0.5),
            Err(ObservationError::NoVisiblePoints { .. })
        ));
    }

    #[test]
    fn neck_falls_back_to_shoulder_midpoint() {
        let frame = frame_with(&[
            ("left_shoulder", [300.0, 100.0, 0.9]),
            ("right_shoulder", [340.0, 104.0, 0.9]),
        ]);
        let obs = reduce_to_four_points(&frame, &camera(), 0.5).unwrap();
        let neck = obs.point(BodyPoint::Neck).unwrap();
        assert_eq!(neck.x, 0.0);
        assert_eq!(neck.y, (102.0 - 240.0) / 500.0);
    }

    #[test]
    fn detection_outside_image_is_marked_invisible() {
        let frame = frame_with(&[
            ("left_hip", [100.0, 200.0, 0.9]),
            ("left_ankle", [-40.0, 620.0, 0.9]),
        ]);
        let obs = reduce_to_four_points(&frame, &camera(), 0.5).unwrap();
        assert!(obs.visible(BodyPoint::Hip));
        assert!(!obs.visible(BodyPoint::Ankle));
    }

    #[test]
    fn load_single_line_file() {
        let text = r#"{"frame": 3, "t": 0.1, "person": 1, "joints": {"left_hip": [100, 200, 0.9], "right_hip": [110, 210, 0.8]}}"#;
        let frames = parse_frames(text).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].frame_id, 3);
        assert_eq!(frames[0].joints.len(), 2);
    }

    #[test]
    fn empty_file_is_empty_sequence() {
        assert!(parse_frames("").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"frame\": 1, \"t\": 0.0, \"person\": 0, \"joints\": {}}\n\
                    {\"frame\": 2, \"t\": 0.1, \"person\": 0, \"joints\": {}}\n\
                    not json";
        let err = parse_frames(text).unwrap_err();
        match err {
            ObservationError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_frames(r#"{"frame": 1, "person": 0, "joints": {}}"#).unwrap_err();
        let message = err.to_string();
        assert!(message.contains('t'), "{message}");
    }

    #[test]
    fn upright_flag_requires_strict_ordering() {
        let mk = |ys: [f64; 4]| {
            FourPointObservation::from_points(
                0,
                0.0,
                0,
                ys.map(|y| Some(NormalizedPoint::new(0.0, y))),
            )
            .unwrap()
        };
        assert!(mk([-0.25, -0.125, 0.0, 0.1]).upright_consistent());
        assert!(!mk([-0.25, 0.1, 0.0, 0.1]).upright_consistent());
    }

    proptest! {
        #[test]
        fn pair_order_does_not_matter(
            lu in 0.0..640.0, lv in 0.0..480.0,
            ru in 0.0..640.0, rv in 0.0..480.0,
            lc in 0.0..1.0, rc in 0.0..1.0,
        ) {
            let a = frame_with(&[("left_hip", [lu, lv, lc]), ("right_hip", [ru, rv, rc])]);
            let b = frame_with(&[("left_hip", [ru, rv, rc]), ("right_hip", [lu, lv, lc])]);
            let cam = camera();
            let oa = reduce_to_four_points(&a, &cam, 0.5).ok().and_then(|o| o.point(BodyPoint::Hip));
            let ob = reduce_to_four_points(&b, &cam, 0.5).ok().and_then(|o| o.point(BodyPoint::Hip));
            prop_assert_eq!(oa, ob);
        }

        #[test]
        fn boosting_confidence_never_hides_points(
            confs in proptest::collection::vec(0.0f64..1.0, 6),
            scale in 1.0f64..3.0,
        ) {
            let names = ["left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle"];
            let base: Vec<(&str, [f64; 3])> = names
                .iter()
                .zip(&confs)
                .map(|(n, c)| (*n, [320.0, 240.0, *c]))
                .collect();
            let boosted: Vec<(&str, [f64; 3])> = names
                .iter()
                .zip(&confs)
                .map(|(n, c)| (*n, [320.0, 240.0, (c * scale).min(1.0)]))
                .collect();
            let cam = camera();
            let visible = |joints: &[(&str, [f64; 3])]| -> Vec<bool> {
                match reduce_to_four_points(&frame_with(joints), &cam, 0.5) {
                    Ok(o) => BodyPoint::ALL.iter().map(|&p| o.visible(p)).collect(),
                    Err(_) => vec![false; 4],
                }
            };
            for (before, after) in visible(&base).iter().zip(visible(&boosted)) {
                prop_assert!(!before || after);
            }
        }

        #[test]
        fn visibility_is_monotone_in_threshold(
            t_low in 0.0f64..1.0,
            t_high in 0.0f64..1.0,
            confs in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let (t_low, t_high) = if t_low <= t_high { (t_low, t_high) } else { (t_high, t_low) };
            let names = ["left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle"];
            let joints: Vec<(&str, [f64; 3])> = names
                .iter()
                .zip(&confs)
                .map(|(n, c)| (*n, [320.0, 240.0, *c]))
                .collect();
            let cam = camera();
            let frame = frame_with(&joints);
            let count = |t: f64| reduce_to_four_points(&frame, &cam, t).map_or(0, |o| o.visible_count());
            prop_assert!(count(t_high) <= count(t_low));
        }
    }
}
