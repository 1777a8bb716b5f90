//! Pinhole projection. Meshes are already in the camera frame (the global
//! rotation, scale and translation are applied by mesh synthesis), so the
//! image plane carries the only remaining intrinsic, the focal length.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const DEFAULT_FOCAL: f64 = 280.0;

/// Image geometry; the principal point is the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for ImagePlane {
    fn default() -> Self {
        Self {
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            focal: DEFAULT_FOCAL,
        }
    }
}

impl ImagePlane {
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// `u = f X / Z + cx`, `v = f Y / Z + cy`; no depth check.
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.focal * p.x / p.z + self.width as f64 / 2.0,
            self.focal * p.y / p.z + self.height as f64 / 2.0,
        )
    }

    /// Camera-frame point at depth `z` that projects to `uv`.
    pub fn unproject_point(&self, uv: &Vector2<f64>, z: f64) -> Vector3<f64> {
        let c = self.center();
        Vector3::new((uv.x - c.x) * z / self.focal, (uv.y - c.y) * z / self.focal, z)
    }

    /// Pulls a pixel-space gradient back to the camera-frame point.
    pub fn project_vjp(&self, p: &Vector3<f64>, g: &Vector2<f64>) -> Vector3<f64> {
        let iz = 1.0 / p.z;
        let f = self.focal * iz;
        Vector3::new(f * g.x, f * g.y, -f * iz * (p.x * g.x + p.y * g.y))
    }

    /// Pushes a camera-frame tangent forward to pixel space.
    pub fn project_jvp(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> Vector2<f64> {
        let iz = 1.0 / p.z;
        let f = self.focal * iz;
        Vector2::new(f * (d.x - p.x * iz * d.z), f * (d.y - p.y * iz * d.z))
    }
}

/// Fails with the offending indices when any point has non-positive depth.
pub fn check_depths(points: &[Vector3<f64>]) -> Result<()> {
    let bad: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| !(p.z > 0.0))
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::behind_camera(bad))
    }
}

/// Projects camera-frame points to pixels.
pub fn project(points: &[Vector3<f64>], plane: &ImagePlane) -> Result<Vec<Vector2<f64>>> {
    check_depths(points)?;
    Ok(points.iter().map(|p| plane.project_point(p)).collect())
}
