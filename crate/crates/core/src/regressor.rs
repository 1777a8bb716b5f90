//! Iterative linear mesh-parameter regressor and 2D pose refiner.
//!
//! Parameters enter the regressor in an encoded form whose camera scale and
//! translation are offsets from a visible default (`c_s = 1`,
//! `c_t = (0, 0, DEFAULT_DEPTH)`), so `h(0)` encodes to zero outside pose and
//! rotation. 2D joints are divided by the image size on input and multiplied
//! back on output. Features are divided by `sqrt(D)` so that a fixed
//! per-weight step moves the output by a similar amount whatever `D` is.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::assets::{HandModelAssets, NUM_JOINTS};
use crate::camera::{ImagePlane, IMAGE_SIZE};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::heatmap::Heatmaps;
use crate::image::{RgbImage, SoftMask};
use crate::model::{synthesize, SKELETON_DIM};
use crate::params::{MeshParams, PARAM_DIM, POSE, QUAT, SCALE, TRANSLATION};
use crate::skeleton::{Skeleton2D, Skeleton3D};

/// Regression iterations per estimate.
pub const INNER_ITERATIONS: usize = 3;
/// Depth of the initial mesh, model units.
pub const DEFAULT_DEPTH: f64 = 2.5;
pub const J2D_DIM: usize = 2 * NUM_JOINTS;
/// Allowed distance of evidence joints outside the image, pixels.
pub const J2D_SLACK: f64 = 32.0;
pub const WEIGHTS_MAGIC: &str = "HNDW1";

/// Image evidence: a feature vector and 2D joints in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence2D {
    pub feature: Vec<f64>,
    pub j2d: Skeleton2D,
    pub heatmaps: Option<Heatmaps>,
}

impl Evidence2D {
    pub fn new(feature: Vec<f64>, j2d: Skeleton2D, heatmaps: Option<Heatmaps>, plane: &ImagePlane) -> Result<Self> {
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evidence feature".into()));
        }
        let (w, h) = (plane.width as f64, plane.height as f64);
        for (k, p) in j2d.0.iter().enumerate() {
            let inside = p.x >= -J2D_SLACK && p.x <= w + J2D_SLACK && p.y >= -J2D_SLACK && p.y <= h + J2D_SLACK;
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "evidence joint {k} at ({:.2}, {:.2}) is outside the image",
                    p.x, p.y
                )));
            }
        }
        if let Some(hm) = &heatmaps {
            if hm.data.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidArgument("heatmaps must be nonnegative".into()));
            }
        }
        Ok(Self { feature, j2d, heatmaps })
    }

    /// Evidence whose feature is the descriptor of the whole image.
    pub fn from_image(x: &RgbImage, j2d: Skeleton2D, desc: &dyn Descriptor, plane: &ImagePlane) -> Result<Self> {
        let feature = desc.compute(x, &SoftMask::ones(x.width, x.height));
        Self::new(feature, j2d, None, plane)
    }
}

/// `(D + 42 + 63) x 63` regressor and `(42 + D + 63 + 63) x 42` refiner
/// matrices with their biases, stored input-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressorWeights {
    d: usize,
    data: Vec<f64>,
}

/// Header of the weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub feature_dim: usize,
    pub j3d_shape: [usize; 2],
    pub ref_shape: [usize; 2],
    pub seed: u64,
    pub epochs: usize,
}

impl LinearRegressorWeights {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            d: feature_dim,
            data: vec![0.0; Self::len_for(feature_dim)],
        }
    }

    /// Zero regressor; the refiner passes its 2D joint input through.
    pub fn pass_through(feature_dim: usize) -> Self {
        let mut w = Self::zeros(feature_dim);
        for k in 0..J2D_DIM {
            w.ref_weights_mut()[k * J2D_DIM + k] = 1.0;
        }
        w
    }

    pub fn from_vec(feature_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::len_for(feature_dim) {
            return Err(Error::Dimension {
                what: "regressor weights".into(),
                expected: Self::len_for(feature_dim),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regressor weights".into()));
        }
        Ok(Self { d: feature_dim, data })
    }

    pub fn j3d_input_dim(feature_dim: usize) -> usize {
        feature_dim + J2D_DIM + PARAM_DIM
    }

    pub fn ref_input_dim(feature_dim: usize) -> usize {
        J2D_DIM + feature_dim + PARAM_DIM + SKELETON_DIM
    }

    fn len_for(d: usize) -> usize {
        (Self::j3d_input_dim(d) + 1) * PARAM_DIM + (Self::ref_input_dim(d) + 1) * J2D_DIM
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    /// `(rows, cols)` of the regressor matrix.
    pub fn j3d_shape(&self) -> (usize, usize) {
        (Self::j3d_input_dim(self.d), PARAM_DIM)
    }

    /// `(rows, cols)` of the refiner matrix.
    pub fn ref_shape(&self) -> (usize, usize) {
        (Self::ref_input_dim(self.d), J2D_DIM)
    }

    fn offsets(&self) -> [usize; 4] {
        let a = Self::j3d_input_dim(self.d) * PARAM_DIM;
        let b = a + PARAM_DIM;
        let c = b + Self::ref_input_dim(self.d) * J2D_DIM;
        [a, b, c, c + J2D_DIM]
    }

    pub fn j3d_weights(&self) -> &[f64] {
        &self.data[..self.offsets()[0]]
    }

    pub fn j3d_bias(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[0]..o[1]]
    }

    pub fn ref_weights(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[1]..o[2]]
    }

    pub fn ref_bias(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[2]..o[3]]
    }

    pub fn j3d_weights_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[..o[0]]
    }

    pub fn j3d_bias_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[0]..o[1]]
    }

    pub fn ref_weights_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[1]..o[2]]
    }

    pub fn ref_bias_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[2]..o[3]]
    }

    /// All entries: regressor matrix, regressor bias, refiner matrix,
    /// refiner bias.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rounds every entry to `f32`, the precision of the file format.
    pub fn quantize(&mut self) {
        self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    pub fn to_bytes(&self, seed: u64, epochs: usize) -> Vec<u8> {
        let (j3, rf) = (self.j3d_shape(), self.ref_shape());
        let header = WeightsHeader {
            feature_dim: self.d,
            j3d_shape: [j3.0, j3.1],
            ref_shape: [rf.0, rf.1],
            seed,
            epochs,
        };
        let mut out = format!("{WEIGHTS_MAGIC}\n{}\n", serde_json::to_string(&header).unwrap()).into_bytes();
        out.reserve(4 * self.data.len());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, WeightsHeader)> {
        let bad = |reason: &str| Error::Format {
            what: "weights file",
            reason: reason.into(),
        };
        let mut reader = BufReader::new(bytes);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|_| bad("unreadable magic"))?;
        if line.trim_end() != WEIGHTS_MAGIC {
            return Err(bad("bad magic"));
        }
        line.clear();
        reader.read_line(&mut line).map_err(|_| bad("unreadable header"))?;
        let header: WeightsHeader = serde_json::from_str(line.trim_end())?;
        let expected = Self::zeros(header.feature_dim);
        let (j3, rf) = (expected.j3d_shape(), expected.ref_shape());
        if header.j3d_shape != [j3.0, j3.1] || header.ref_shape != [rf.0, rf.1] {
            return Err(bad("matrix shapes disagree with the feature dimension"));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(|_| bad("unreadable payload"))?;
        if payload.len() != 4 * expected.data.len() {
            return Err(Error::Dimension {
                what: "weights payload bytes".into(),
                expected: 4 * expected.data.len(),
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((Self::from_vec(header.feature_dim, data)?, header))
    }

    pub fn write(&self, path: impl AsRef<Path>, seed: u64, epochs: usize) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes(seed, epochs)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, WeightsHeader)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const DEPTH: usize = TRANSLATION.end - 1;

/// Regressor-side encoding of `h`: `ln c_s` and `ln(t_z / DEFAULT_DEPTH)`
/// replace scale and depth, so additive updates keep both positive.
/// Requires `c_s > 0` and `t_z > 0`.
pub fn encode_params(h: &MeshParams) -> [f64; PARAM_DIM] {
    let mut e = h.0;
    e[SCALE] = h.0[SCALE].ln();
    e[DEPTH] = (h.0[DEPTH] / DEFAULT_DEPTH).ln();
    e
}

pub fn decode_params(e: &[f64; PARAM_DIM]) -> MeshParams {
    let mut h = *e;
    h[SCALE] = e[SCALE].exp();
    h[DEPTH] = DEFAULT_DEPTH * e[DEPTH].exp();
    MeshParams(h)
}

/// Pulls a gradient with respect to decoded parameters back to the
/// encoding.
pub fn decode_vjp(e: &[f64; PARAM_DIM], g: &mut [f64]) {
    g[SCALE] *= e[SCALE].exp();
    g[DEPTH] *= DEFAULT_DEPTH * e[DEPTH].exp();
}

/// Mean pose, zero shape, identity rotation, default scale and depth.
pub fn initial_params(assets: &HandModelAssets) -> MeshParams {
    let mut e = [0.0; PARAM_DIM];
    e[POSE].copy_from_slice(assets.mean_pose());
    e[QUAT.start] = 1.0;
    decode_params(&e)
}

/// `out = b + Wᵀ x` for an input-major `W`.
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = b.len();
    debug_assert_eq!(w.len(), x.len() * n);
    let mut out = b.to_vec();
    for (row, &xi) in w.chunks_exact(n).zip(x) {
        if xi != 0.0 {
            for (o, wi) in out.iter_mut().zip(row) {
                *o += wi * xi;
            }
        }
    }
    out
}

pub(crate) fn normalized_j2d(j: &Skeleton2D) -> [f64; J2D_DIM] {
    j.to_flat().map(|v| v / IMAGE_SIZE as f64)
}

pub(crate) fn denormalized_j2d(v: &[f64]) -> Skeleton2D {
    let px: Vec<f64> = v.iter().map(|x| x * IMAGE_SIZE as f64).collect();
    Skeleton2D::from_flat(&px)
}

/// Camera-frame skeleton shifted by the default depth.
pub(crate) fn centered_j3d(j: &Skeleton3D) -> [f64; SKELETON_DIM] {
    j.translated(&Vector3::new(0.0, 0.0, -DEFAULT_DEPTH)).to_flat()
}

pub(crate) fn scaled_feature(feature: &[f64]) -> Vec<f64> {
    let s = 1.0 / (feature.len().max(1) as f64).sqrt();
    feature.iter().map(|v| v * s).collect()
}

pub(crate) fn j3d_input(feature: &[f64], j2d: &[f64], h_enc: &[f64]) -> Vec<f64> {
    [&scaled_feature(feature), j2d, h_enc].concat()
}

pub(crate) fn ref_input(j2d: &[f64], feature: &[f64], h_enc: &[f64], j3d: &[f64]) -> Vec<f64> {
    [j2d, &scaled_feature(feature), h_enc, j3d].concat()
}

fn check_feature(z: &Evidence2D, w: &LinearRegressorWeights) -> Result<()> {
    if z.feature.len() != w.feature_dim() {
        return Err(Error::Dimension {
            what: "evidence feature".into(),
            expected: w.feature_dim(),
            found: z.feature.len(),
        });
    }
    Ok(())
}

/// Offset of the encoded parameters for the current estimate.
pub fn regress_step(z: &Evidence2D, h: &MeshParams, w: &LinearRegressorWeights) -> Result<[f64; PARAM_DIM]> {
    check_feature(z, w)?;
    let x = j3d_input(&z.feature, &normalized_j2d(&z.j2d), &encode_params(h));
    let out = affine(w.j3d_weights(), w.j3d_bias(), &x);
    Ok(out.try_into().unwrap())
}

/// Refined absolute 2D joints in pixels.
pub fn refine_2d(
    j2d: &Skeleton2D,
    feature: &[f64],
    h: &MeshParams,
    j3d: &Skeleton3D,
    w: &LinearRegressorWeights,
) -> Result<Skeleton2D> {
    if feature.len() != w.feature_dim() {
        return Err(Error::Dimension {
            what: "refiner feature".into(),
            expected: w.feature_dim(),
            found: feature.len(),
        });
    }
    let x = ref_input(&normalized_j2d(j2d), feature, &encode_params(h), &centered_j3d(j3d));
    Ok(denormalized_j2d(&affine(w.ref_weights(), w.ref_bias(), &x)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmeStep {
    pub params: MeshParams,
    pub j2d: Skeleton2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmeOutput {
    pub params: MeshParams,
    pub j2d: Skeleton2D,
    /// `INNER_ITERATIONS + 1` entries starting at `h(0)` and the evidence
    /// joints.
    pub trajectory: Vec<HmeStep>,
}

/// Alternates regression of `h` and refinement of the 2D joints.
pub fn run_hme(z: &Evidence2D, w: &LinearRegressorWeights, assets: &HandModelAssets) -> Result<HmeOutput> {
    check_feature(z, w)?;
    let mut h = initial_params(assets);
    let mut e = encode_params(&h);
    let mut j2d = z.j2d;
    let mut trajectory = vec![HmeStep { params: h, j2d }];
    for t in 0..INNER_ITERATIONS {
        let fail = |what: &str| Error::NonFinite(format!("{what} at regression iteration {t}"));
        let step = Evidence2D {
            feature: z.feature.clone(),
            j2d,
            heatmaps: None,
        };
        let de = regress_step(&step, &h, w)?;
        e.iter_mut().zip(&de).for_each(|(a, d)| *a += d);
        h = decode_params(&e);
        h.check_finite().map_err(|_| fail("mesh parameters"))?;
        let syn = synthesize(&h, assets).map_err(|e| Error::InvalidArgument(format!("iteration {t}: {e}")))?;
        let j3d = syn.skeleton(assets);
        if !j3d.is_finite() {
            return Err(fail("skeleton"));
        }
        j2d = refine_2d(&j2d, &z.feature, &h, &j3d, w)?;
        if !j2d.is_finite() {
            return Err(fail("2D joints"));
        }
        trajectory.push(HmeStep { params: h, j2d });
    }
    Ok(HmeOutput { params: h, j2d, trajectory })
}
