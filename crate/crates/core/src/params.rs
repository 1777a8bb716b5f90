//! The 63-value fitting state `[pose(45), shape(10), quat(4), scale(1), translation(3)]`
//! and its typed views.

use std::ops::Range;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::wrap_axis_angle;

/// Articulated joints carrying a pose rotation (the wrist is not articulated).
pub const NUM_ARTICULATED: usize = 15;
/// Kinematic bones: wrist plus the articulated joints.
pub const NUM_BONES: usize = 16;
pub const POSE_DIM: usize = 3 * NUM_ARTICULATED;
pub const SHAPE_DIM: usize = 10;
pub const PARAM_DIM: usize = POSE_DIM + SHAPE_DIM + 4 + 1 + 3;

pub const POSE: Range<usize> = 0..45;
pub const SHAPE: Range<usize> = 45..55;
pub const QUAT: Range<usize> = 55..59;
pub const SCALE: usize = 59;
pub const TRANSLATION: Range<usize> = 60..63;

/// Upper bound on shape coefficients.
pub const SHAPE_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams(pub [f64; POSE_DIM]);

impl PoseParams {
    /// Builds a pose, wrapping each joint rotation to magnitude at most pi.
    pub fn new(theta: [f64; POSE_DIM]) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose parameters".into()));
        }
        let mut out = theta;
        for j in 0..NUM_ARTICULATED {
            let r = Vector3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
            let w = wrap_axis_angle(&r);
            out[3 * j..3 * j + 3].copy_from_slice(w.as_slice());
        }
        Ok(Self(out))
    }

    pub fn joint(&self, j: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * j], self.0[3 * j + 1], self.0[3 * j + 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams(pub [f64; SHAPE_DIM]);

impl ShapeParams {
    /// Builds shape coefficients, clamping each to `[-5, 5]`.
    pub fn new(beta: [f64; SHAPE_DIM]) -> Result<Self> {
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shape parameters".into()));
        }
        Ok(Self(beta.map(|b| b.clamp(-SHAPE_CLAMP, SHAPE_CLAMP))))
    }
}

/// Global similarity transform of the mesh plus the pinhole focal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    /// `(w, x, y, z)`; normalized when used.
    pub quat: [f64; 4],
    pub scale: f64,
    pub translation: [f64; 3],
    /// Pixels. Intrinsic, not part of the fitting state.
    pub focal: f64,
}

/// Flat 63-value mesh parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MeshParams(pub [f64; PARAM_DIM]);

impl TryFrom<Vec<f64>> for MeshParams {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<MeshParams> for Vec<f64> {
    fn from(h: MeshParams) -> Self {
        h.0.to_vec()
    }
}

impl Default for MeshParams {
    /// Zero pose and shape, identity rotation, unit scale, zero translation.
    fn default() -> Self {
        let mut h = [0.0; PARAM_DIM];
        h[QUAT.start] = 1.0;
        h[SCALE] = 1.0;
        Self(h)
    }
}

impl MeshParams {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; PARAM_DIM] = v.try_into().map_err(|_| Error::Dimension {
            what: "mesh parameters".into(),
            expected: PARAM_DIM,
            found: v.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn from_parts(pose: &PoseParams, shape: &ShapeParams, camera: &CameraParams) -> Self {
        let mut h = [0.0; PARAM_DIM];
        h[POSE].copy_from_slice(&pose.0);
        h[SHAPE].copy_from_slice(&shape.0);
        h[QUAT].copy_from_slice(&camera.quat);
        h[SCALE] = camera.scale;
        h[TRANSLATION].copy_from_slice(&camera.translation);
        Self(h)
    }

    /// Splits into typed parts; `focal` completes the camera.
    pub fn decompose(&self, focal: f64) -> Result<(PoseParams, ShapeParams, CameraParams)> {
        self.check_finite()?;
        let pose = PoseParams::new(self.0[POSE].try_into().unwrap())?;
        let shape = ShapeParams::new(self.0[SHAPE].try_into().unwrap())?;
        Ok((pose, shape, self.camera(focal)))
    }

    pub fn camera(&self, focal: f64) -> CameraParams {
        CameraParams {
            quat: self.quat(),
            scale: self.scale(),
            translation: self.translation(),
            focal,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mesh parameter {i}")));
        }
        Ok(())
    }

    pub fn pose(&self) -> &[f64] {
        &self.0[POSE]
    }

    pub fn pose_mut(&mut self) -> &mut [f64] {
        &mut self.0[POSE]
    }

    pub fn shape(&self) -> &[f64] {
        &self.0[SHAPE]
    }

    pub fn shape_mut(&mut self) -> &mut [f64] {
        &mut self.0[SHAPE]
    }

    pub fn quat(&self) -> [f64; 4] {
        self.0[QUAT].try_into().unwrap()
    }

    pub fn set_quat(&mut self, q: [f64; 4]) {
        self.0[QUAT].copy_from_slice(&q);
    }

    pub fn scale(&self) -> f64 {
        self.0[SCALE]
    }

    pub fn set_scale(&mut self, s: f64) {
        self.0[SCALE] = s;
    }

    pub fn translation(&self) -> [f64; 3] {
        self.0[TRANSLATION].try_into().unwrap()
    }

    pub fn set_translation(&mut self, t: [f64; 3]) {
        self.0[TRANSLATION].copy_from_slice(&t);
    }

    /// Rescales the quaternion block to unit length.
    pub fn normalize_quat(&mut self) {
        let q = crate::rotation::normalize_quat(&self.quat());
        self.set_quat(q);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}
