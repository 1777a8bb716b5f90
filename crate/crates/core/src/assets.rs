//! Hand model assets and the `HNDA1` container format.
//!
//! File layout: the ASCII line `HNDA1`, one line of compact JSON describing
//! every array (name, shape, byte offset into the payload), then the payload
//! of little-endian `f32` values in row-major order. Arrays appear in the
//! order template vertices, faces, shape basis, skinning weights, rest joint
//! regressor, kinematic parents, skeleton regressor, mean pose, followed by
//! the optional pose-corrective block. Integer data (faces, parents) is stored
//! as exactly representable floats; the root parent is `-1`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{NUM_BONES, POSE_DIM, SHAPE_DIM};

pub const NUM_VERTICES: usize = 778;
pub const NUM_FACES: usize = 1538;
pub const NUM_JOINTS: usize = 21;
pub const ASSET_MAGIC: &str = "HNDA1";

const SUM_TOLERANCE: f64 = 1e-6;

/// Raw asset arrays, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetData {
    pub template_vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// `shape_basis[k][i]` is the displacement of vertex `i` for one unit of
    /// shape coefficient `k`.
    pub shape_basis: Vec<Vec<Vector3<f64>>>,
    pub skinning_weights: Vec<[f64; NUM_BONES]>,
    /// `16 x 778`, row-major.
    pub rest_joint_regressor: Vec<f64>,
    /// Parent bone of each bone; `None` for the wrist root.
    pub kinematic_parents: [Option<usize>; NUM_BONES],
    /// One `778 x 21` row-major matrix per coordinate axis.
    pub skeleton_regressor: [Vec<f64>; 3],
    pub mean_pose: [f64; POSE_DIM],
    /// Reserved for converted models (`778 x 3 x 135`); read and kept but not
    /// applied during synthesis.
    pub pose_correctives: Option<Vec<f64>>,
}

/// Validated assets plus lookup structures derived from them.
#[derive(Debug, Clone)]
pub struct HandModelAssets {
    data: AssetData,
    derived: Derived,
}

#[derive(Debug, Clone)]
pub(crate) struct Derived {
    /// Non-zero skinning weights per vertex.
    pub skin: Vec<Vec<(usize, f64)>>,
    /// Non-zero rest joint regressor entries per bone.
    pub rest_reg: Vec<Vec<(usize, f64)>>,
    /// Per axis, per joint: non-zero skeleton regressor entries.
    pub skel_reg: [Vec<Vec<(usize, f64)>>; 3],
    /// Vertices referenced by the skeleton regressor.
    pub skel_support: Vec<usize>,
    /// Rest joint displacement per unit of each shape coefficient.
    pub shape_joint_basis: Vec<[Vector3<f64>; NUM_BONES]>,
    /// Bones ordered parents-first.
    pub order: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    pub faces: Arc<[[u32; 3]]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    num_vertices: usize,
    num_faces: usize,
    num_shape: usize,
    num_bones: usize,
    num_joints: usize,
    pose_dim: usize,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn dim_check(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            what: what.into(),
            expected,
            found,
        });
    }
    Ok(())
}

impl HandModelAssets {
    /// Validates raw arrays and builds the derived lookup tables.
    pub fn new(data: AssetData) -> Result<Self> {
        validate(&data)?;
        let derived = Derived::build(&data)?;
        Ok(Self { data, derived })
    }

    pub fn data(&self) -> &AssetData {
        &self.data
    }

    pub(crate) fn derived(&self) -> &Derived {
        &self.derived
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.data.template_vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.data.faces
    }

    /// Faces as a shared handle, for meshes derived from these assets.
    pub fn shared_faces(&self) -> Arc<[[u32; 3]]> {
        self.derived.faces.clone()
    }

    pub fn mean_pose(&self) -> &[f64; POSE_DIM] {
        &self.data.mean_pose
    }

    pub fn parents(&self) -> &[Option<usize>; NUM_BONES] {
        &self.data.kinematic_parents
    }

    /// One-ring vertex adjacency derived from the faces.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.derived.neighbors
    }

    /// Writes the assets in `HNDA1` format.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = &self.data;
        let mut arrays: Vec<(&str, Vec<usize>, Vec<f32>)> = vec![
            (
                "template_vertices",
                vec![NUM_VERTICES, 3],
                d.template_vertices
                    .iter()
                    .flat_map(|v| v.iter().map(|&x| x as f32).collect::<Vec<_>>())
                    .collect(),
            ),
            (
                "faces",
                vec![NUM_FACES, 3],
                d.faces.iter().flatten().map(|&i| i as f32).collect(),
            ),
            (
                "shape_basis",
                vec![SHAPE_DIM, NUM_VERTICES, 3],
                d.shape_basis
                    .iter()
                    .flatten()
                    .flat_map(|v| v.iter().map(|&x| x as f32).collect::<Vec<_>>())
                    .collect(),
            ),
            (
                "skinning_weights",
                vec![NUM_VERTICES, NUM_BONES],
                d.skinning_weights.iter().flatten().map(|&x| x as f32).collect(),
            ),
            (
                "rest_joint_regressor",
                vec![NUM_BONES, NUM_VERTICES],
                d.rest_joint_regressor.iter().map(|&x| x as f32).collect(),
            ),
            (
                "kinematic_parents",
                vec![NUM_BONES],
                d.kinematic_parents
                    .iter()
                    .map(|p| p.map_or(-1.0, |p| p as f32))
                    .collect(),
            ),
            (
                "skeleton_regressor",
                vec![3, NUM_VERTICES, NUM_JOINTS],
                d.skeleton_regressor.iter().flatten().map(|&x| x as f32).collect(),
            ),
            (
                "mean_pose",
                vec![POSE_DIM],
                d.mean_pose.iter().map(|&x| x as f32).collect(),
            ),
        ];
        if let Some(pc) = &d.pose_correctives {
            arrays.push((
                "pose_correctives",
                vec![NUM_VERTICES, 3, 9 * (NUM_BONES - 1)],
                pc.iter().map(|&x| x as f32).collect(),
            ));
        }
        let mut offset = 0;
        let mut entries = Vec::new();
        for (name, shape, values) in &arrays {
            entries.push(ArrayEntry {
                name: name.to_string(),
                shape: shape.clone(),
                offset,
            });
            offset += values.len() * 4;
        }
        let header = Header {
            num_vertices: NUM_VERTICES,
            num_faces: NUM_FACES,
            num_shape: SHAPE_DIM,
            num_bones: NUM_BONES,
            num_joints: NUM_JOINTS,
            pose_dim: POSE_DIM,
            arrays: entries,
        };
        let mut out = Vec::with_capacity(offset + 1024);
        out.extend_from_slice(ASSET_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header).unwrap().as_bytes());
        out.push(b'\n');
        for (_, _, values) in &arrays {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "asset file",
            reason,
        };
        let magic_end = ASSET_MAGIC.len();
        if bytes.len() < magic_end + 1 || &bytes[..magic_end] != ASSET_MAGIC.as_bytes() {
            return Err(bad("missing HNDA1 magic".into()));
        }
        if bytes[magic_end] != b'\n' {
            return Err(bad("magic not followed by newline".into()));
        }
        let rest = &bytes[magic_end + 1..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])?;
        let payload = &rest[nl + 1..];

        dim_check("vertex count", NUM_VERTICES, header.num_vertices)?;
        dim_check("face count", NUM_FACES, header.num_faces)?;
        dim_check("shape dimension", SHAPE_DIM, header.num_shape)?;
        dim_check("bone count", NUM_BONES, header.num_bones)?;
        dim_check("skeleton joint count", NUM_JOINTS, header.num_joints)?;
        dim_check("pose dimension", POSE_DIM, header.pose_dim)?;

        let read = |name: &str, expected: &[usize]| -> Result<Option<Vec<f64>>> {
            let Some(entry) = header.arrays.iter().find(|a| a.name == name) else {
                return Ok(None);
            };
            if entry.shape.len() != expected.len() {
                return Err(Error::Dimension {
                    what: format!("rank of {name}"),
                    expected: expected.len(),
                    found: entry.shape.len(),
                });
            }
            for (e, f) in expected.iter().zip(&entry.shape) {
                dim_check(name, *e, *f)?;
            }
            let count: usize = expected.iter().product();
            let end = entry.offset + count * 4;
            if end > payload.len() {
                return Err(Error::Format {
                    what: "asset file",
                    reason: format!("array {name} runs past end of payload"),
                });
            }
            Ok(Some(
                payload[entry.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
            ))
        };
        let required = |name: &str, expected: &[usize]| -> Result<Vec<f64>> {
            read(name, expected)?.ok_or_else(|| Error::Format {
                what: "asset file",
                reason: format!("missing array {name}"),
            })
        };

        let tv = required("template_vertices", &[NUM_VERTICES, 3])?;
        let faces_raw = required("faces", &[NUM_FACES, 3])?;
        let basis = required("shape_basis", &[SHAPE_DIM, NUM_VERTICES, 3])?;
        let skin = required("skinning_weights", &[NUM_VERTICES, NUM_BONES])?;
        let rest_reg = required("rest_joint_regressor", &[NUM_BONES, NUM_VERTICES])?;
        let parents_raw = required("kinematic_parents", &[NUM_BONES])?;
        let skel = required("skeleton_regressor", &[3, NUM_VERTICES, NUM_JOINTS])?;
        let mean = required("mean_pose", &[POSE_DIM])?;
        let correctives = read(
            "pose_correctives",
            &[NUM_VERTICES, 3, 9 * (NUM_BONES - 1)],
        )?;

        let vec3s = |v: &[f64]| -> Vec<Vector3<f64>> {
            v.chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect()
        };
        let mut faces = Vec::with_capacity(NUM_FACES);
        for c in faces_raw.chunks_exact(3) {
            let mut f = [0u32; 3];
            for (k, &x) in c.iter().enumerate() {
                if x < 0.0 || x.fract() != 0.0 || x >= NUM_VERTICES as f64 {
                    return Err(Error::InvalidAssets(format!(
                        "face index {x} out of range [0, {NUM_VERTICES})"
                    )));
                }
                f[k] = x as u32;
            }
            faces.push(f);
        }
        let mut parents = [None; NUM_BONES];
        for (k, &p) in parents_raw.iter().enumerate() {
            parents[k] = if p < 0.0 {
                None
            } else if p.fract() == 0.0 && (p as usize) < NUM_BONES {
                Some(p as usize)
            } else {
                return Err(Error::InvalidAssets(format!("bad parent index {p} for bone {k}")));
            };
        }
        let data = AssetData {
            template_vertices: vec3s(&tv),
            faces,
            shape_basis: basis
                .chunks_exact(NUM_VERTICES * 3)
                .map(vec3s)
                .collect(),
            skinning_weights: skin
                .chunks_exact(NUM_BONES)
                .map(|c| c.try_into().unwrap())
                .collect(),
            rest_joint_regressor: rest_reg,
            kinematic_parents: parents,
            skeleton_regressor: [
                skel[..NUM_VERTICES * NUM_JOINTS].to_vec(),
                skel[NUM_VERTICES * NUM_JOINTS..2 * NUM_VERTICES * NUM_JOINTS].to_vec(),
                skel[2 * NUM_VERTICES * NUM_JOINTS..].to_vec(),
            ],
            mean_pose: mean.try_into().unwrap(),
            pose_correctives: correctives,
        };
        Self::new(data)
    }
}

/// Reads and validates an `HNDA1` asset file.
pub fn load_model_assets(path: impl AsRef<Path>) -> Result<HandModelAssets> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HandModelAssets::from_bytes(&bytes)
}

fn validate(d: &AssetData) -> Result<()> {
    dim_check("template vertices", NUM_VERTICES, d.template_vertices.len())?;
    dim_check("faces", NUM_FACES, d.faces.len())?;
    dim_check("shape basis", SHAPE_DIM, d.shape_basis.len())?;
    for b in &d.shape_basis {
        dim_check("shape basis vertices", NUM_VERTICES, b.len())?;
    }
    dim_check("skinning weights", NUM_VERTICES, d.skinning_weights.len())?;
    dim_check(
        "rest joint regressor",
        NUM_BONES * NUM_VERTICES,
        d.rest_joint_regressor.len(),
    )?;
    for m in &d.skeleton_regressor {
        dim_check("skeleton regressor", NUM_VERTICES * NUM_JOINTS, m.len())?;
    }
    if let Some(pc) = &d.pose_correctives {
        dim_check("pose correctives", NUM_VERTICES * 3 * 9 * (NUM_BONES - 1), pc.len())?;
    }

    let finite = d.template_vertices.iter().all(|v| v.iter().all(|x| x.is_finite()))
        && d.shape_basis.iter().flatten().all(|v| v.iter().all(|x| x.is_finite()))
        && d.rest_joint_regressor.iter().all(|x| x.is_finite())
        && d.skeleton_regressor.iter().flatten().all(|x| x.is_finite())
        && d.mean_pose.iter().all(|x| x.is_finite());
    if !finite {
        return Err(Error::NonFinite("asset arrays".into()));
    }

    for f in &d.faces {
        if f.iter().any(|&i| i as usize >= NUM_VERTICES) {
            return Err(Error::InvalidAssets(format!("face {f:?} has out-of-range index")));
        }
    }

    for (i, row) in d.skinning_weights.iter().enumerate() {
        if row.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidAssets(format!(
                "negative or non-finite skinning weight on vertex {i}"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidAssets(format!(
                "skinning weights of vertex {i} sum to {s}"
            )));
        }
    }

    // kinematic tree: exactly one root (the wrist, bone 0), no cycles
    if d.kinematic_parents[0].is_some() {
        return Err(Error::InvalidAssets("bone 0 (wrist) must be the root".into()));
    }
    for k in 1..NUM_BONES {
        let mut cur = k;
        let mut steps = 0;
        while let Some(p) = d.kinematic_parents[cur] {
            if p >= NUM_BONES {
                return Err(Error::InvalidAssets(format!("bone {cur} has parent {p}")));
            }
            cur = p;
            steps += 1;
            if steps > NUM_BONES {
                return Err(Error::InvalidAssets(format!(
                    "kinematic tree has a cycle through bone {k}"
                )));
            }
        }
        if cur != 0 {
            return Err(Error::InvalidAssets(format!(
                "bone {k} is not connected to the wrist root"
            )));
        }
    }

    for (axis, m) in d.skeleton_regressor.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            let s: f64 = (0..NUM_VERTICES).map(|i| m[i * NUM_JOINTS + j]).sum();
            if (s - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidAssets(format!(
                    "skeleton regressor axis {axis} column {j} sums to {s}"
                )));
            }
        }
    }
    Ok(())
}

impl Derived {
    fn build(d: &AssetData) -> Result<Self> {
        let skin = d
            .skinning_weights
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(k, &w)| (k, w))
                    .collect()
            })
            .collect();
        let rest_reg: Vec<Vec<(usize, f64)>> = (0..NUM_BONES)
            .map(|k| {
                (0..NUM_VERTICES)
                    .filter_map(|i| {
                        let w = d.rest_joint_regressor[k * NUM_VERTICES + i];
                        (w != 0.0).then_some((i, w))
                    })
                    .collect()
            })
            .collect();
        let skel_reg: [Vec<Vec<(usize, f64)>>; 3] = std::array::from_fn(|axis| {
            let m = &d.skeleton_regressor[axis];
            (0..NUM_JOINTS)
                .map(|j| {
                    (0..NUM_VERTICES)
                        .filter_map(|i| {
                            let w = m[i * NUM_JOINTS + j];
                            (w != 0.0).then_some((i, w))
                        })
                        .collect()
                })
                .collect()
        });
        let skel_support: Vec<usize> = skel_reg
            .iter()
            .flatten()
            .flatten()
            .map(|&(i, _)| i)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let shape_joint_basis = d
            .shape_basis
            .iter()
            .map(|b| {
                std::array::from_fn(|k| {
                    rest_reg[k]
                        .iter()
                        .fold(Vector3::zeros(), |acc, &(i, w)| acc + b[i] * w)
                })
            })
            .collect();

        let mut order = vec![0];
        let mut head = 0;
        while head < order.len() {
            let p = order[head];
            head += 1;
            for k in 0..NUM_BONES {
                if d.kinematic_parents[k] == Some(p) {
                    order.push(k);
                }
            }
        }
        if order.len() != NUM_BONES {
            return Err(Error::InvalidAssets("kinematic tree does not span all bones".into()));
        }

        let mut sets = vec![BTreeSet::new(); NUM_VERTICES];
        for f in &d.faces {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        sets[f[a] as usize].insert(f[b] as usize);
                    }
                }
            }
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();

        Ok(Self {
            skin,
            rest_reg,
            skel_reg,
            skel_support,
            shape_joint_basis,
            order,
            neighbors,
            faces: d.faces.clone().into(),
        })
    }
}
