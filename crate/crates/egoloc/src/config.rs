//! Run-level configuration: one file (TOML, with JSON accepted) holding every
//! tunable default. Angles live in degrees on disk and radians in code.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::solver::{Interval, SolverConfig, StateBounds, WeightConfig};
use crate::tracking::TrackingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSection {
    pub confidence_threshold: f64,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub lateral: [f64; 2],
    pub depth: [f64; 2],
    pub camera_height: [f64; 2],
    pub pitch_deg: [f64; 2],
    pub roll_deg: [f64; 2],
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            lateral: [-30.0, 30.0],
            depth: [0.3, 30.0],
            camera_height: [0.2, 1.2],
            pitch_deg: [-45.0, 45.0],
            roll_deg: [-45.0, 45.0],
        }
    }
}

impl BoundsSection {
    pub fn to_bounds(self) -> StateBounds {
        StateBounds {
            lateral: Interval::new(self.lateral[0], self.lateral[1]),
            depth: Interval::new(self.depth[0], self.depth[1]),
            camera_height: Interval::new(self.camera_height[0], self.camera_height[1]),
            pitch: Interval::new(
                self.pitch_deg[0].to_radians(),
                self.pitch_deg[1].to_radians(),
            ),
            roll: Interval::new(self.roll_deg[0].to_radians(), self.roll_deg[1].to_radians()),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub bounds: BoundsSection,
    pub cauchy_scale: f64,
    pub ftol: f64,
    pub xtol: f64,
    pub gtol: f64,
    pub max_inner_iterations: usize,
    pub max_outer_alternations: usize,
    pub initial_trust_radius: f64,
    pub initial_camera_height: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            bounds: BoundsSection::default(),
            cauchy_scale: d.cauchy_scale,
            ftol: d.ftol,
            xtol: d.xtol,
            gtol: d.gtol,
            max_inner_iterations: d.max_inner_iterations,
            max_outer_alternations: d.max_outer_alternations,
            initial_trust_radius: d.initial_trust_radius,
            initial_camera_height: d.initial_camera_height,
        }
    }
}

impl SolverSection {
    pub fn to_solver_config(self) -> SolverConfig {
        SolverConfig {
            bounds: self.bounds.to_bounds(),
            cauchy_scale: self.cauchy_scale,
            ftol: self.ftol,
            xtol: self.xtol,
            gtol: self.gtol,
            max_inner_iterations: self.max_inner_iterations,
            max_outer_alternations: self.max_outer_alternations,
            initial_trust_radius: self.initial_trust_radius,
            initial_camera_height: self.initial_camera_height,
        }
    }
}

/// Static pose used during the height-calibration phase (e.g. the robot
/// lying on the ground).
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub camera_height: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            pitch_deg: 0.0,
            roll_deg: 0.0,
            camera_height: 0.5,
        }
    }
}

/// Whole run configuration; every section and field is optional and falls
/// back to the documented default.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub observation: ObservationSection,
    pub weights: WeightConfig,
    pub solver: SolverSection,
    pub tracking: TrackingConfig,
    pub calibration: CalibrationSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Invalid {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        }
    }
}
