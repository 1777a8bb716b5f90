//! 21-joint skeletons and the linear skeleton regressor.
//!
//! Joint order: wrist, then thumb, index, middle, ring and pinky with four
//! joints each (MCP, PIP, DIP, tip).

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::assets::{HandModelAssets, NUM_JOINTS};
use crate::model::HandMesh;

/// Joint index of the middle-finger MCP, the normalization root.
pub const ROOT_JOINT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton3D(pub [Vector3<f64>; NUM_JOINTS]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton2D(pub [Vector2<f64>; NUM_JOINTS]);

impl Skeleton3D {
    pub fn zeros() -> Self {
        Self([Vector3::zeros(); NUM_JOINTS])
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 3 * NUM_JOINTS);
        Self(std::array::from_fn(|j| Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])))
    }

    pub fn to_flat(&self) -> [f64; 3 * NUM_JOINTS] {
        let mut out = [0.0; 3 * NUM_JOINTS];
        for (j, p) in self.0.iter().enumerate() {
            out[3 * j..3 * j + 3].copy_from_slice(p.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Self(self.0.map(|p| p + t))
    }

    /// Mean Euclidean joint distance.
    pub fn mean_error(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / NUM_JOINTS as f64
    }

    /// Mean joint distance after moving both roots to the origin.
    pub fn root_aligned_error(&self, other: &Self) -> f64 {
        let ra = self.0[ROOT_JOINT];
        let rb = other.0[ROOT_JOINT];
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| ((a - ra) - (b - rb)).norm())
            .sum::<f64>()
            / NUM_JOINTS as f64
    }
}

impl Skeleton2D {
    pub fn zeros() -> Self {
        Self([Vector2::zeros(); NUM_JOINTS])
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 2 * NUM_JOINTS);
        Self(std::array::from_fn(|j| Vector2::new(v[2 * j], v[2 * j + 1])))
    }

    pub fn to_flat(&self) -> [f64; 2 * NUM_JOINTS] {
        let mut out = [0.0; 2 * NUM_JOINTS];
        for (j, p) in self.0.iter().enumerate() {
            out[2 * j] = p.x;
            out[2 * j + 1] = p.y;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }

    /// Mean Euclidean joint distance.
    pub fn mean_error(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / NUM_JOINTS as f64
    }
}

impl Serialize for Skeleton3D {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<[f64; 3]> = self.0.iter().map(|p| [p.x, p.y, p.z]).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Skeleton3D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<[f64; 3]>::deserialize(d)?;
        if rows.len() != NUM_JOINTS {
            return Err(serde::de::Error::invalid_length(rows.len(), &"21 joints"));
        }
        Ok(Self(std::array::from_fn(|j| Vector3::from(rows[j]))))
    }
}

impl Serialize for Skeleton2D {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<[f64; 2]> = self.0.iter().map(|p| [p.x, p.y]).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Skeleton2D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<[f64; 2]>::deserialize(d)?;
        if rows.len() != NUM_JOINTS {
            return Err(serde::de::Error::invalid_length(rows.len(), &"21 joints"));
        }
        Ok(Self(std::array::from_fn(|j| Vector2::from(rows[j]))))
    }
}

/// Applies the per-axis skeleton regressor to arbitrary per-vertex vectors.
pub fn regress_points(points: &[Vector3<f64>], assets: &HandModelAssets) -> Skeleton3D {
    let reg = &assets.derived().skel_reg;
    Skeleton3D(std::array::from_fn(|j| {
        Vector3::from_fn(|axis, _| reg[axis][j].iter().map(|&(i, w)| w * points[i][axis]).sum())
    }))
}

/// `joints[k][j] = Σ_i M_k[i, j] · v_i[k]`.
pub fn regress_skeleton(v: &HandMesh, assets: &HandModelAssets) -> Skeleton3D {
    regress_points(&v.vertices, assets)
}

/// Transpose of the regressor: accumulates a joint-space gradient onto
/// per-vertex gradients.
pub fn regress_skeleton_vjp(g: &Skeleton3D, assets: &HandModelAssets, out: &mut [Vector3<f64>]) {
    let reg = &assets.derived().skel_reg;
    for (axis, per_joint) in reg.iter().enumerate() {
        for (j, entries) in per_joint.iter().enumerate() {
            let gj = g.0[j][axis];
            if gj == 0.0 {
                continue;
            }
            for &(i, w) in entries {
                out[i][axis] += w * gj;
            }
        }
    }
}
