//! Camera geometry: intrinsics, rigid poses, depth hypothesis planes and
//! the per-pixel homography warp used by plane sweeping.
//!
//! Pose convention, stated once: poses map world to camera with points as
//! column vectors, `X_cam = R * X_world + t`. Pixels are `(u, v)` with `u`
//! along width. Warps are dehomogenized by the third coordinate.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Skewless pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Argument(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl RigidPose {
    /// Validates orthonormality (`R^T R = I` and `det R = 1` to 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::Argument(format!(
                "rotation is not orthonormal (max deviation {dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Argument(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(RigidPose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// World point into this camera's frame.
    pub fn world_to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera-frame point back to world.
    pub fn camera_to_world(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Hypothesis spacing rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Inverse,
}

/// Ordered depth planes `d_1 < ... < d_D`, shared by lifting, warping and
/// pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypothesisSet {
    values: Vec<f64>,
    spacing: Spacing,
}

impl DepthHypothesisSet {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Index of the hypothesis closest to `depth` (lower index on ties).
    pub fn nearest_index(&self, depth: f64) -> usize {
        let mut best = 0;
        let mut best_abs = f64::INFINITY;
        for (i, &v) in self.values.iter().enumerate() {
            let a = (v - depth).abs();
            if a < best_abs {
                best_abs = a;
                best = i;
            }
        }
        best
    }
}

/// Build `count` depth planes over `[d_min, d_max]`, endpoints included.
/// `Linear` spaces uniformly in depth, `Inverse` uniformly in 1/depth.
pub fn build_hypotheses(
    d_min: f64,
    d_max: f64,
    count: usize,
    spacing: Spacing,
) -> Result<DepthHypothesisSet> {
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::Argument(format!(
            "need 0 < d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    if count < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 hypotheses, got {count}"
        )));
    }
    let n = count as f64;
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 / (n - 1.0);
        let d = match spacing {
            Spacing::Linear => d_min + t * (d_max - d_min),
            Spacing::Inverse => {
                let inv = (1.0 / d_min) + t * ((1.0 / d_max) - (1.0 / d_min));
                1.0 / inv
            }
        };
        values.push(d);
    }
    // Pin endpoints exactly regardless of rounding.
    values[0] = d_min;
    values[count - 1] = d_max;
    Ok(DepthHypothesisSet { values, spacing })
}

/// Pinhole projection of a camera-frame point to pixel coordinates.
pub fn project(k: &Intrinsics, x: Vector3<f64>) -> Result<(f64, f64)> {
    if x.z <= 0.0 {
        return Err(Error::BehindCamera { z: x.z });
    }
    Ok((k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy))
}

/// Pixel plus depth back to a camera-frame point: `d * K^-1 * (u, v, 1)`.
/// The returned z component equals `d` exactly.
pub fn backproject(k: &Intrinsics, pixel: (f64, f64), d: f64) -> Result<Vector3<f64>> {
    if d <= 0.0 {
        return Err(Error::Argument(format!("depth must be positive, got {d}")));
    }
    let (u, v) = pixel;
    Ok(Vector3::new(
        (u - k.cx) / k.fx * d,
        (v - k.cy) / k.fy * d,
        d,
    ))
}

/// Homography warp of a reference pixel at hypothesized depth `d` into a
/// second camera: `Ki * (R * (K0^-1 * p * d) + t)`, dehomogenized by the
/// third coordinate. Returns `None` when the transformed point falls at or
/// behind the target camera; callers substitute zero-valued samples.
pub fn warp_pixel(
    k0: &Intrinsics,
    ki: &Intrinsics,
    pose: &RigidPose,
    pixel: (f64, f64),
    d: f64,
) -> Result<Option<(f64, f64)>> {
    let x0 = backproject(k0, pixel, d)?;
    let xi = pose.rotation * x0 + pose.translation;
    if xi.z <= 0.0 {
        return Ok(None);
    }
    Ok(Some((
        ki.fx * xi.x / xi.z + ki.cx,
        ki.fy * xi.y / xi.z + ki.cy,
    )))
}

/// Transform that maps points expressed in camera `a`'s frame into camera
/// `b`'s frame, both poses being world-to-camera.
pub fn relative_pose(a: &RigidPose, b: &RigidPose) -> RigidPose {
    let rotation = b.rotation * a.rotation.transpose();
    let translation = b.translation - rotation * a.translation;
    RigidPose {
        rotation,
        translation,
    }
}
