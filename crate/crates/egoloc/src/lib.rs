//! Joint estimation of camera attitude and 3D person location from
//! single-frame 2D body-keypoint observations.
//!
//! An upright person is modeled as four collinear points (neck, hip center,
//! knee center, ankle center) at calibrated heights above their footprint.
//! Fitting that rigid model to normalized-plane keypoint measurements
//! recovers both the person's location on the ground plane and the camera's
//! roll/pitch, which makes the estimate robust to the severe ego-motion of
//! legged or off-road robots.
//!
//! Modules follow the processing pipeline:
//!
//! - [`camera`]: pixel <-> normalized-plane conversion for pinhole, fisheye
//!   and equirectangular cameras;
//! - [`observation`]: detection-file ingestion and reduction to the
//!   four-point model;
//! - [`solver`]: the bounded robust nonlinear least-squares localization;
//! - [`calibration`]: linear joint-height estimation from static frames;
//! - [`tracking`]: Kalman tracks on the ground plane;
//! - [`evalkit`]: metrics, ground truth handling and the synthetic scene
//!   generator;
//! - [`pipeline`]: the per-frame reduce/solve/pelvis chain shared by the CLI
//!   and the tests;
//! - [`config`]: the run-level configuration file.

pub mod calibration;
pub mod camera;
pub mod config;
pub mod evalkit;
pub mod observation;
pub mod pipeline;
pub mod solver;
pub mod tracking;
