//! Synthetic ego-motion scene generator: the ground-truth oracle behind the
//! round-trip tests and the end-to-end regression.
//!
//! Every frame evaluates a waypoint-walking person and sinusoidal (plus
//! optional random-walk) camera ego-motion, projects the four-point model
//! through the configured camera, synthesizes left/right joint detections
//! mirrored in pixel space around each projected center point, and adds
//! seeded Gaussian pixel noise. Output is bit-reproducible for a fixed seed:
//! per-frame noise comes from a counter-based stream keyed on the frame
//! index, so generation order (or parallelism) cannot change the result.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::camera::{CameraConfig, CameraError, CameraModel, PixelPoint};
use crate::evalkit::{pelvis_location, TruthSample};
use crate::observation::{BodyPoint, RawJointFrame};
use crate::solver::{rotation_from_angles, JointHeights, PoseState, StateBounds};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonSpec {
    /// (lateral, depth) waypoints on the virtual plane, walked at constant
    /// speed, bouncing back and forth when the path ends.
    pub waypoints: Vec<[f64; 2]>,
    /// Walking speed, m/s.
    pub speed: f64,
}

impl Default for PersonSpec {
    fn default() -> Self {
        Self {
            waypoints: vec![[0.0, 4.0]],
            speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoMotionSpec {
    pub pitch_amplitude_deg: f64,
    pub pitch_frequency_hz: f64,
    pub roll_amplitude_deg: f64,
    pub roll_frequency_hz: f64,
    /// Mean camera height, meters.
    pub height_mean: f64,
    pub height_amplitude: f64,
    pub height_frequency_hz: f64,
    /// Optional random-walk term added to pitch and roll, degrees per
    /// sqrt-second.
    pub random_walk_deg_per_sqrt_s: f64,
}

impl Default for EgoMotionSpec {
    fn default() -> Self {
        Self {
            pitch_amplitude_deg: 0.0,
            pitch_frequency_hz: 2.0,
            roll_amplitude_deg: 0.0,
            roll_frequency_hz: 1.7,
            height_mean: 0.5,
            height_amplitude: 0.0,
            height_frequency_hz: 2.3,
            random_walk_deg_per_sqrt_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointSpec {
    /// Lateral half-distance between synthesized left and right joints,
    /// meters.
    pub half_width: f64,
    /// Sinusoidal knee/ankle height perturbation that mimics walking-gait
    /// deformation of the rigid model.
    pub walking_deformation: bool,
    pub stride_frequency_hz: f64,
    pub deformation_amplitude: f64,
}

impl Default for JointSpec {
    fn default() -> Self {
        Self {
            half_width: 0.15,
            walking_deformation: false,
            stride_frequency_hz: 1.5,
            deformation_amplitude: 0.05,
        }
    }
}

fn default_camera() -> CameraConfig {
    CameraConfig {
        variant: "pinhole".to_string(),
        width: 1280,
        height: 720,
        fx: Some(500.0),
        fy: Some(500.0),
        cx: Some(640.0),
        cy: Some(360.0),
        distortion: None,
    }
}

fn default_heights() -> JointHeights {
    JointHeights {
        neck: 1.5,
        hip: 1.0,
        knee: 0.5,
        ankle: 0.1,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub duration: f64,
    pub frame_rate: f64,
    pub seed: u64,
    /// Gaussian pixel noise sigma added to every emitted joint coordinate.
    pub pixel_sigma: f64,
    pub person: PersonSpec,
    pub ego: EgoMotionSpec,
    pub joints: JointSpec,
    pub heights: JointHeights,
    pub camera: CameraConfig,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            frame_rate: 30.0,
            seed: 0,
            pixel_sigma: 0.0,
            person: PersonSpec::default(),
            ego: EgoMotionSpec::default(),
            joints: JointSpec::default(),
            heights: default_heights(),
            camera: default_camera(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("frame {frame}: {field} leaves the solver bounds")]
    StateOutOfBounds { frame: u64, field: &'static str },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// True per-frame state alongside the emitted observations.
#[derive(Debug, Clone, Copy)]
pub struct TrueState {
    pub frame_id: u64,
    pub timestamp: f64,
    pub state: PoseState,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub frames: Vec<RawJointFrame>,
    pub truth: Vec<TruthSample>,
    pub states: Vec<TrueState>,
}

/// Arc-length position along the ping-pong waypoint path.
fn person_position(waypoints: &[[f64; 2]], speed: f64, t: f64) -> (f64, f64) {
    if waypoints.len() == 1 {
        return (waypoints[0][0], waypoints[0][1]);
    }
    let seg_lengths: Vec<f64> = waypoints
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect();
    let total: f64 = seg_lengths.iter().sum();
    if total <= 0.0 {
        return (waypoints[0][0], waypoints[0][1]);
    }
    // Fold distance into [0, 2L) and mirror the second half.
    let mut s = (speed * t) % (2.0 * total);
    if s > total {
        s = 2.0 * total - s;
    }
    for (w, len) in waypoints.windows(2).zip(&seg_lengths) {
        if s <= *len || len == seg_lengths.last().unwrap() {
            let f = if *len > 0.0 { (s / len).min(1.0) } else { 0.0 };
            return (
                w[0][0] + f * (w[1][0] - w[0][0]),
                w[0][1] + f * (w[1][1] - w[0][1]),
            );
        }
        s -= len;
    }
    (waypoints[0][0], waypoints[0][1])
}

/// Projects a level-robot-frame point through the state's rotation and the
/// camera.
fn project_robot_point(
    camera: &CameraModel,
    state: &PoseState,
    point: nalgebra::Vector3<f64>,
) -> Option<PixelPoint> {
    let q = rotation_from_angles(state.pitch, state.roll).transpose() * point;
    if q.z <= 0.0 {
        return None;
    }
    camera
        .project_to_pixel(crate::camera::NormalizedPoint::new(q.x / q.z, q.y / q.z))
        .ok()
}

fn in_image(camera: &CameraModel, p: PixelPoint) -> bool {
    p.u >= 0.0
        && p.u <= f64::from(camera.width())
        && p.v >= 0.0
        && p.v <= f64::from(camera.height())
}

/// Generates the full scene. States are validated against `bounds` so a
/// mis-specified ego-motion fails loudly instead of producing unsolvable
/// frames.
pub fn generate_scene(
    config: &SyntheticSceneConfig,
    bounds: &StateBounds,
) -> Result<SyntheticScene, SynthError> {
    if config.frame_rate <= 0.0 || config.duration < 0.0 {
        return Err(SynthError::InvalidConfig(
            "duration must be nonnegative and frame_rate positive".to_string(),
        ));
    }
    if config.person.waypoints.is_empty() {
        return Err(SynthError::InvalidConfig(
            "at least one waypoint required".to_string(),
        ));
    }
    let camera = config.camera.build()?;
    let frame_count = (config.duration * config.frame_rate).round() as u64;

    // The random-walk series is sequential by nature; it gets its own stream,
    // generated up front, while per-frame pixel noise streams are keyed on
    // the frame index.
    let tau = 1.0 / config.frame_rate;
    let walk_sigma = config.ego.random_walk_deg_per_sqrt_s.to_radians() * tau.sqrt();
    let mut walk_rng = ChaCha8Rng::seed_from_u64(config.seed);
    walk_rng.set_stream(u64::MAX);
    let mut walk_pitch = 0.0;
    let mut walk_roll = 0.0;

    let mut frames = Vec::with_capacity(frame_count as usize);
    let mut truth = Vec::with_capacity(frame_count as usize);
    let mut states = Vec::with_capacity(frame_count as usize);

    for frame_id in 0..frame_count {
        let t = frame_id as f64 / config.frame_rate;
        if walk_sigma > 0.0 {
            walk_pitch += walk_sigma * walk_rng.sample::<f64, _>(rand_distr::StandardNormal);
            walk_roll += walk_sigma * walk_rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let (lateral, depth) = person_position(&config.person.waypoints, config.person.speed, t);
        let state = PoseState {
            lateral,
            depth,
            camera_height: config.ego.height_mean
                + config.ego.height_amplitude
                    * (2.0 * std::f64::consts::PI * config.ego.height_frequency_hz * t).sin(),
            pitch: config.ego.pitch_amplitude_deg.to_radians()
                * (2.0 * std::f64::consts::PI * config.ego.pitch_frequency_hz * t).sin()
                + walk_pitch,
            roll: config.ego.roll_amplitude_deg.to_radians()
                * (2.0 * std::f64::consts::PI * config.ego.roll_frequency_hz * t).sin()
                + walk_roll,
        };
        for (ok, field) in [
            (bounds.lateral.contains(state.lateral), "lateral"),
            (bounds.depth.contains(state.depth), "depth"),
            (
                bounds.camera_height.contains(state.camera_height),
                "camera_height",
            ),
            (bounds.pitch.contains(state.pitch), "pitch"),
            (bounds.roll.contains(state.roll), "roll"),
        ] {
            if !ok {
                return Err(SynthError::StateOutOfBounds {
                    frame: frame_id,
                    field,
                });
            }
        }

        let deform = if config.joints.walking_deformation {
            config.joints.deformation_amplitude
                * (2.0 * std::f64::consts::PI * config.joints.stride_frequency_hz * t).sin()
        } else {
            0.0
        };

        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(frame_id);
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if config.pixel_sigma > 0.0 {
                config.pixel_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
            } else {
                0.0
            }
        };

        let mut joints: BTreeMap<String, [f64; 3]> = BTreeMap::new();
        for p in BodyPoint::ALL {
            let height = match p {
                BodyPoint::Knee | BodyPoint::Ankle => config.heights.get(p) + deform,
                _ => config.heights.get(p),
            };
            let y = state.camera_height - height;
            let center =
                project_robot_point(&camera, &state, nalgebra::Vector3::new(lateral, y, depth));
            let left = project_robot_point(
                &camera,
                &state,
                nalgebra::Vector3::new(lateral - config.joints.half_width, y, depth),
            );
            let right = project_robot_point(
                &camera,
                &state,
                nalgebra::Vector3::new(lateral + config.joints.half_width, y, depth),
            );
            let (Some(center), Some(left), Some(right)) = (center, left, right) else {
                continue;
            };
            // Mirror the sides around the center projection so the midpoint
            // of the emitted pair reproduces the center pixel exactly.
            let du = (right.u - left.u) / 2.0;
            let dv = (right.v - left.v) / 2.0;
            let side = |sign: f64| PixelPoint::new(center.u + sign * du, center.v + sign * dv);
            if !in_image(&camera, side(-1.0)) || !in_image(&camera, side(1.0)) {
                continue;
            }
            let (left_name, right_name) = match p {
                BodyPoint::Neck => ("left_shoulder", "right_shoulder"),
                BodyPoint::Hip => ("left_hip", "right_hip"),
                BodyPoint::Knee => ("left_knee", "right_knee"),
                BodyPoint::Ankle => ("left_ankle", "right_ankle"),
            };
            let l = side(-1.0);
            let r = side(1.0);
            joints.insert(
                left_name.to_string(),
                [l.u + draw(&mut noise_rng), l.v + draw(&mut noise_rng), 1.0],
            );
            joints.insert(
                right_name.to_string(),
                [r.u + draw(&mut noise_rng), r.v + draw(&mut noise_rng), 1.0],
            );
        }

        frames.push(RawJointFrame {
            frame_id,
            timestamp: t,
            person_id: 0,
            joints,
        });
        truth.push(TruthSample::Location {
            frame_id,
            person_id: 0,
            point: pelvis_location(&state, &config.heights),
        });
        states.push(TrueState {
            frame_id,
            timestamp: t,
            state,
        });
    }

    Ok(SyntheticScene {
        frames,
        truth,
        states,
    })
}

/// JSON-lines serialization of the generated frames.
pub fn frames_lines(frames: &[RawJointFrame]) -> String {
    let mut out = String::new();
    for frame in frames {
        out.push_str(&serde_json::to_string(frame).expect("frame serializes"));
        out.push('\n');
    }
    out
}

/// CSV serialization of the true state series.
pub fn states_csv(states: &[TrueState]) -> String {
    let mut out = String::from("frame,t,X_F,Z_F,h_C,theta_deg,phi_deg\n");
    for s in states {
        out.push_str(&format!(
            "{},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            s.frame_id,
            s.timestamp,
            s.state.lateral,
            s.state.depth,
            s.state.camera_height,
            s.state.pitch.to_degrees(),
            s.state.roll.to_degrees(),
        ));
    }
    out
}
