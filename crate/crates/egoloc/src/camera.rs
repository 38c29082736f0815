//! Camera projection models and normalized image plane conversions.
//!
//! All estimation downstream operates on the normalized image plane (the
//! z = 1 plane of the camera frame), so the camera model's only job is the
//! pixel <-> normalized conversion for each supported geometry. Camera frame
//! convention, shared by the whole crate: x right, y down, z forward; an
//! upright person's body axis points along -y when the camera is level.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Largest |x| or |y| accepted on the normalized plane. Rays closer to the
/// horizon than this (mostly an equirectangular concern) are rejected as
/// `BehindCamera`.
pub const MAX_NORMALIZED_COORD: f64 = 20.0;

const UNDISTORT_TOL: f64 = 1e-10;
const UNDISTORT_MAX_ITER: usize = 20;

/// Continuous pixel coordinates, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// A point on the normalized image plane (ray direction (x, y, 1)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A 3D point expressed in the camera frame (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFramePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraFramePoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Euclidean distance from the optical center.
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point behind camera (z = {z:.6})")]
    BehindCamera { z: f64 },
    #[error("pixel ({u:.2}, {v:.2}) outside {width}x{height} image")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("distortion inversion did not converge within {iterations} iterations")]
    DistortionDivergence { iterations: usize },
    #[error("invalid camera parameters: {0}")]
    InvalidParameters(String),
}

/// Camera geometry plus intrinsics. Distortion coefficients are
/// (k1, k2, p1, p2) for the pinhole radial-tangential model and
/// (k1, k2, k3, k4) for the Kannala-Brandt equidistant fisheye polynomial.
#[derive(Debug, Clone, PartialEq)]
pub enum CameraModel {
    Pinhole {
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 4],
    },
    FisheyeEquidistant {
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 4],
    },
    Equirectangular { width: u32, height: u32 },
}

impl CameraModel {
    pub fn pinhole(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 4],
    ) -> Result<Self, CameraError> {
        let cam = Self::Pinhole {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            distortion,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn fisheye(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 4],
    ) -> Result<Self, CameraError> {
        let cam = Self::FisheyeEquidistant {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            distortion,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn equirectangular(width: u32, height: u32) -> Result<Self, CameraError> {
        let cam = Self::Equirectangular { width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn width(&self) -> u32 {
        match *self {
            Self::Pinhole { width, .. }
            | Self::FisheyeEquidistant { width, .. }
            | Self::Equirectangular { width, .. } => width,
        }
    }

    pub fn height(&self) -> u32 {
        match *self {
            Self::Pinhole { height, .. }
            | Self::FisheyeEquidistant { height, .. }
            | Self::Equirectangular { height, .. } => height,
        }
    }

    fn validate(&self) -> Result<(), CameraError> {
        let (w, h) = (self.width(), self.height());
        if w < 1 || h < 1 {
            return Err(CameraError::InvalidParameters(format!(
                "image size {w}x{h} must be at least 1x1"
            )));
        }
        match *self {
            Self::Pinhole {
                width,
                height,
                fx,
                fy,
                cx,
                cy,
                distortion,
            }
            | Self::FisheyeEquidistant {
                width,
                height,
                fx,
                fy,
                cx,
                cy,
                distortion,
            } => {
                if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
                    return Err(CameraError::InvalidParameters(format!(
                        "focal lengths must be positive and finite, got fx={fx}, fy={fy}"
                    )));
                }
                if !(cx > 0.0 && cx < f64::from(width)) || !(cy > 0.0 && cy < f64::from(height)) {
                    return Err(CameraError::InvalidParameters(format!(
                        "principal point ({cx}, {cy}) must lie inside the {width}x{height} image"
                    )));
                }
                if distortion.iter().any(|k| !k.is_finite()) {
                    return Err(CameraError::InvalidParameters(
                        "distortion coefficients must be finite".to_string(),
                    ));
                }
            }
            Self::Equirectangular { .. } => {}
        }
        Ok(())
    }

    fn check_in_image(&self, pixel: PixelPoint) -> Result<(), CameraError> {
        let (w, h) = (f64::from(self.width()), f64::from(self.height()));
        if !pixel.u.is_finite()
            || !pixel.v.is_finite()
            || pixel.u < 0.0
            || pixel.u > w
            || pixel.v < 0.0
            || pixel.v > h
        {
            return Err(CameraError::OutOfBounds {
                u: pixel.u,
                v: pixel.v,
                width: self.width(),
                height: self.height(),
            });
        }
        Ok(())
    }

    /// Converts a pixel to the normalized image plane, inverting distortion
    /// where the model has any. The returned (x, y) is such that the ray
    /// (x, y, 1) reprojects to `pixel` under [`CameraModel::project_to_pixel`].
    pub fn back_project(&self, pixel: PixelPoint) -> Result<NormalizedPoint, CameraError> {
        self.back_project_with_limit(pixel, MAX_NORMALIZED_COORD)
    }

    /// Same as [`CameraModel::back_project`] with an explicit bound on the
    /// magnitude of the normalized coordinates.
    pub fn back_project_with_limit(
        &self,
        pixel: PixelPoint,
        max_coord: f64,
    ) -> Result<NormalizedPoint, CameraError> {
        self.check_in_image(pixel)?;
        let n = match *self {
            Self::Pinhole {
                fx,
                fy,
                cx,
                cy,
                distortion,
                ..
            } => {
                let xd = (pixel.u - cx) / fx;
                let yd = (pixel.v - cy) / fy;
                let (x, y) = undistort_radtan(xd, yd, &distortion)?;
                NormalizedPoint::new(x, y)
            }
            Self::FisheyeEquidistant {
                fx,
                fy,
                cx,
                cy,
                distortion,
                ..
            } => {
                let mx = (pixel.u - cx) / fx;
                let my = (pixel.v - cy) / fy;
                let theta_d = (mx * mx + my * my).sqrt();
                if theta_d < 1e-14 {
                    NormalizedPoint::new(0.0, 0.0)
                } else {
                    let theta = invert_equidistant(theta_d, &distortion)?;
                    if theta >= std::f64::consts::FRAC_PI_2 {
                        // Ray at or beyond 90 degrees from the axis never hits
                        // the z = 1 plane.
                        return Err(CameraError::BehindCamera {
                            z: theta.cos(),
                        });
                    }
                    let scale = theta.tan() / theta_d;
                    NormalizedPoint::new(mx * scale, my * scale)
                }
            }
            Self::Equirectangular { width, height } => {
                let w = f64::from(width);
                let h = f64::from(height);
                let lon = (pixel.u - w / 2.0) * (2.0 * std::f64::consts::PI / w);
                let lat = (pixel.v - h / 2.0) * (std::f64::consts::PI / h);
                let z = lat.cos() * lon.cos();
                if z <= 0.0 {
                    return Err(CameraError::BehindCamera { z });
                }
                NormalizedPoint::new(lon.tan(), lat.tan() / lon.cos())
            }
        };
        if !n.is_finite() || n.x.abs() > max_coord || n.y.abs() > max_coord {
            return Err(CameraError::BehindCamera { z: 0.0 });
        }
        Ok(n)
    }

    /// Forward projection from the normalized plane to pixels.
    pub fn project_to_pixel(&self, n: NormalizedPoint) -> Result<PixelPoint, CameraError> {
        if !n.is_finite() {
            return Err(CameraError::InvalidParameters(
                "normalized point must be finite".to_string(),
            ));
        }
        let pixel = match *self {
            Self::Pinhole {
                fx,
                fy,
                cx,
                cy,
                distortion,
                ..
            } => {
                let (xd, yd) = distort_radtan(n.x, n.y, &distortion);
                PixelPoint::new(fx * xd + cx, fy * yd + cy)
            }
            Self::FisheyeEquidistant {
                fx,
                fy,
                cx,
                cy,
                distortion,
                ..
            } => {
                let r = (n.x * n.x + n.y * n.y).sqrt();
                let scale = if r < 1e-14 {
                    1.0
                } else {
                    let theta = r.atan();
                    equidistant_poly(theta, &distortion) / r
                };
                PixelPoint::new(fx * n.x * scale + cx, fy * n.y * scale + cy)
            }
            Self::Equirectangular { width, height } => {
                let w = f64::from(width);
                let h = f64::from(height);
                let lon = n.x.atan();
                let lat = (n.y / (1.0 + n.x * n.x).sqrt()).atan();
                PixelPoint::new(
                    w / 2.0 + lon * (w / (2.0 * std::f64::consts::PI)),
                    h / 2.0 + lat * (h / std::f64::consts::PI),
                )
            }
        };
        self.check_in_image(pixel)?;
        Ok(pixel)
    }

    /// Loads a camera model from a JSON or TOML configuration file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CameraError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            CameraError::InvalidParameters(format!("cannot read {}: {e}", path.display()))
        })?;
        let config: CameraConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)
                .map_err(|e| CameraError::InvalidParameters(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| CameraError::InvalidParameters(format!("{}: {e}", path.display())))?
        };
        config.build()
    }
}

/// Projects a camera-frame point onto the normalized image plane. This is the
/// projection shared by every camera variant: estimation never leaves the
/// normalized plane.
pub fn project_camera_point(p: CameraFramePoint) -> Result<NormalizedPoint, CameraError> {
    if p.z <= 0.0 {
        return Err(CameraError::BehindCamera { z: p.z });
    }
    Ok(NormalizedPoint::new(p.x / p.z, p.y / p.z))
}

fn distort_radtan(x: f64, y: f64, k: &[f64; 4]) -> (f64, f64) {
    let [k1, k2, p1, p2] = *k;
    let r2 = x * x + y * y;
    let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
    let xy = x * y;
    (
        x * radial + 2.0 * p1 * xy + p2 * (r2 + 2.0 * x * x),
        y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * xy,
    )
}

/// Fixed-point inversion of the radial-tangential distortion.
fn undistort_radtan(xd: f64, yd: f64, k: &[f64; 4]) -> Result<(f64, f64), CameraError> {
    let [k1, k2, p1, p2] = *k;
    let mut x = xd;
    let mut y = yd;
    for _ in 0..UNDISTORT_MAX_ITER {
        let r2 = x * x + y * y;
        let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
        let xy = x * y;
        let dx = 2.0 * p1 * xy + p2 * (r2 + 2.0 * x * x);
        let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * xy;
        let x_new = (xd - dx) / radial;
        let y_new = (yd - dy) / radial;
        let delta = (x_new - x).abs().max((y_new - y).abs());
        x = x_new;
        y = y_new;
        if delta < UNDISTORT_TOL {
            return Ok((x, y));
        }
    }
    Err(CameraError::DistortionDivergence {
        iterations: UNDISTORT_MAX_ITER,
    })
}

fn equidistant_poly(theta: f64, k: &[f64; 4]) -> f64 {
    let t2 = theta * theta;
    theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))
}

/// Solves theta from theta_d = theta * (1 + k1 theta^2 + ...) by fixed point.
fn invert_equidistant(theta_d: f64, k: &[f64; 4]) -> Result<f64, CameraError> {
    let mut theta = theta_d;
    for _ in 0..UNDISTORT_MAX_ITER {
        let t2 = theta * theta;
        let poly = 1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3])));
        if poly <= 0.0 {
            return Err(CameraError::DistortionDivergence {
                iterations: UNDISTORT_MAX_ITER,
            });
        }
        let theta_new = theta_d / poly;
        let delta = (theta_new - theta).abs();
        theta = theta_new;
        if delta < UNDISTORT_TOL {
            return Ok(theta);
        }
    }
    Err(CameraError::DistortionDivergence {
        iterations: UNDISTORT_MAX_ITER,
    })
}

/// On-disk camera description. Unknown fields are rejected so a typo in a
/// config file fails loudly instead of silently using a default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub variant: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub fx: Option<f64>,
    #[serde(default)]
    pub fy: Option<f64>,
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    #[serde(default)]
    pub distortion: Option<Vec<f64>>,
}

impl CameraConfig {
    pub fn build(&self) -> Result<CameraModel, CameraError> {
        let intrinsics = || -> Result<(f64, f64, f64, f64), CameraError> {
            match (self.fx, self.fy, self.cx, self.cy) {
                (Some(fx), Some(fy), Some(cx), Some(cy)) => Ok((fx, fy, cx, cy)),
                _ => Err(CameraError::InvalidParameters(format!(
                    "variant `{}` requires fx, fy, cx and cy",
                    self.variant
                ))),
            }
        };
        let distortion = || -> Result<[f64; 4], CameraError> {
            match &self.distortion {
                None => Ok([0.0; 4]),
                Some(d) if d.len() == 4 => Ok([d[0], d[1], d[2], d[3]]),
                Some(d) => Err(CameraError::InvalidParameters(format!(
                    "expected 4 distortion coefficients, got {}",
                    d.len()
                ))),
            }
        };
        match self.variant.as_str() {
            "pinhole" => {
                let (fx, fy, cx, cy) = intrinsics()?;
                CameraModel::pinhole(self.width, self.height, fx, fy, cx, cy, distortion()?)
            }
            "fisheye" => {
                let (fx, fy, cx, cy) = intrinsics()?;
                CameraModel::fisheye(self.width, self.height, fx, fy, cx, cy, distortion()?)
            }
            "equirectangular" => {
                if self.fx.is_some()
                    || self.fy.is_some()
                    || self.cx.is_some()
                    || self.cy.is_some()
                    || self.distortion.is_some()
                {
                    return Err(CameraError::InvalidParameters(
                        "equirectangular cameras take no intrinsics beyond width/height"
                            .to_string(),
                    ));
                }
                CameraModel::equirectangular(self.width, self.height)
            }
            other => Err(CameraError::InvalidParameters(format!(
                "unknown camera variant `{other}`"
            ))),
        }
    }
}
