//! Loss terms, skeleton normalization and the per-instance shape-loss gate.
//!
//! Losses are per-instance sums. Skeleton normalization works in image space:
//! `x, y` are pixel coordinates and `z` is camera depth in model units.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::assets::{HandModelAssets, NUM_JOINTS, NUM_VERTICES};
use crate::camera::ImagePlane;
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::{RgbImage, SoftMask};
use crate::model::Synthesis;
use crate::raster::{soft_render, SoftRasterConfig};
use crate::skeleton::{regress_skeleton_vjp, Skeleton2D, Skeleton3D, ROOT_JOINT};

/// Shape-loss gate threshold: mean per-joint 2D error, pixels.
pub const DEFAULT_TAU: f64 = 15.0;
/// Bounding-box enlargement factor of the normalization scale.
pub const BBOX_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationContext {
    pub root_index: usize,
    /// `1.5 x` the larger side of the tight 2D joint bounding box, pixels.
    pub g: f64,
    /// Camera depth of the root joint.
    pub z_root: f64,
    pub focal: f64,
    /// Root joint in image space; both normalized skeletons are centered on
    /// it.
    pub root: [f64; 3],
}

impl NormalizationContext {
    pub fn new(root: Vector3<f64>, g: f64, z_root: f64, focal: f64) -> Result<Self> {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::DegenerateNormalization(format!("bounding box scale g = {g}")));
        }
        if !(z_root > 0.0) || !(focal > 0.0) {
            return Err(Error::DegenerateNormalization(format!(
                "root depth {z_root} and focal {focal} must be positive"
            )));
        }
        Ok(Self {
            root_index: ROOT_JOINT,
            g,
            z_root,
            focal,
            root: root.into(),
        })
    }

    /// Context of a camera-frame skeleton.
    pub fn from_skeleton(j: &Skeleton3D, plane: &ImagePlane) -> Result<Self> {
        let img = image_space(j, plane)?;
        let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
        for p in &img.0 {
            lo = lo.inf(&p.xy());
            hi = hi.sup(&p.xy());
        }
        let side = (hi - lo).max();
        Self::new(img.0[ROOT_JOINT], BBOX_FACTOR * side, j.0[ROOT_JOINT].z, plane.focal)
    }

    pub fn scales(&self) -> Vector3<f64> {
        Vector3::new(self.g, self.g, self.z_root * self.g / self.focal)
    }

    fn check(&self) -> Result<()> {
        Self::new(self.root.into(), self.g, self.z_root, self.focal).map(|_| ())
    }
}

/// Camera-frame skeleton to `(u, v, z)`: pixels plus depth.
pub fn image_space(j: &Skeleton3D, plane: &ImagePlane) -> Result<Skeleton3D> {
    crate::camera::check_depths(&j.0)?;
    Ok(Skeleton3D(j.0.map(|p| {
        let uv = plane.project_point(&p);
        Vector3::new(uv.x, uv.y, p.z)
    })))
}

/// `pred` scaled about the camera center until its root has the depth of the
/// context root, then moved so the roots coincide. Scaling about the camera
/// center leaves the projection unchanged, so this is `pred` with its
/// unobservable depth and position replaced by those of the reference: the
/// form in which estimated skeletons are compared.
pub fn reanchor_skeleton(pred: &Skeleton3D, ctx: &NormalizationContext, plane: &ImagePlane) -> Result<Skeleton3D> {
    ctx.check()?;
    let img = anchored_image(&image_space(pred, plane)?, ctx);
    let out = Skeleton3D(img.0.map(|p| plane.unproject_point(&p.xy(), p.z)));
    crate::camera::check_depths(&out.0)?;
    Ok(out)
}

/// Image-space skeleton with its root moved to the context root in the image
/// plane and its depths scaled by `z_root / root depth`.
fn anchored_image(img: &Skeleton3D, ctx: &NormalizationContext) -> Skeleton3D {
    let root = img.0[ctx.root_index];
    let r = ctx.z_root / root.z;
    let (du, dv) = (ctx.root[0] - root.x, ctx.root[1] - root.y);
    Skeleton3D(img.0.map(|p| Vector3::new(p.x + du, p.y + dv, p.z * r)))
}

/// Mean per-joint distance between `gt` and the re-anchored `pred`.
pub fn joint_error(pred: &Skeleton3D, gt: &Skeleton3D, ctx: &NormalizationContext, plane: &ImagePlane) -> Result<f64> {
    let a = reanchor_skeleton(pred, ctx, plane)?;
    Ok(a.0.iter().zip(&gt.0).map(|(p, q)| (p - q).norm()).sum::<f64>() / NUM_JOINTS as f64)
}

/// Pulls an image-space gradient back to the camera frame.
pub fn image_space_vjp(j: &Skeleton3D, g: &Skeleton3D, plane: &ImagePlane) -> Skeleton3D {
    Skeleton3D(std::array::from_fn(|k| {
        let mut out = plane.project_vjp(&j.0[k], &g.0[k].xy());
        out.z += g.0[k].z;
        out
    }))
}

/// `(j - root) / (g, g, z_root g / c_f)` per joint.
pub fn normalize_skeleton(j: &Skeleton3D, ctx: &NormalizationContext) -> Result<Skeleton3D> {
    ctx.check()?;
    let root = Vector3::from(ctx.root);
    let s = ctx.scales();
    Ok(Skeleton3D(j.0.map(|p| (p - root).component_div(&s))))
}

/// Exact inverse of [`normalize_skeleton`].
pub fn denormalize_skeleton(jn: &Skeleton3D, ctx: &NormalizationContext) -> Result<Skeleton3D> {
    ctx.check()?;
    let root = Vector3::from(ctx.root);
    let s = ctx.scales();
    Ok(Skeleton3D(jn.0.map(|p| p.component_mul(&s) + root)))
}

/// Squared distance between normalized skeletons (image space) and its
/// gradient with respect to `pred`. The prediction is normalized about its own
/// root: it is anchored as in [`reanchor_skeleton`] first, so the loss ignores
/// the root position and any depth-compensated change of size.
pub fn loss_art(pred: &Skeleton3D, gt: &Skeleton3D, ctx: &NormalizationContext) -> Result<(f64, Skeleton3D)> {
    ctx.check()?;
    let z_pred = pred.0[ctx.root_index].z;
    if !(z_pred > 0.0) {
        return Err(Error::DegenerateNormalization(format!("predicted root depth {z_pred}")));
    }
    let r = ctx.z_root / z_pred;
    let np = normalize_skeleton(&anchored_image(pred, ctx), ctx)?;
    let ng = normalize_skeleton(gt, ctx)?;
    let s = ctx.scales();
    let mut loss = 0.0;
    let mut grad = Skeleton3D::zeros();
    let mut root = Vector3::zeros();
    for k in 0..NUM_JOINTS {
        let d = np.0[k] - ng.0[k];
        loss += d.norm_squared();
        let g = (d * 2.0).component_div(&s);
        grad.0[k] = Vector3::new(g.x, g.y, g.z * r);
        root.x -= g.x;
        root.y -= g.y;
        root.z -= g.z * pred.0[k].z * r / z_pred;
    }
    grad.0[ctx.root_index] += root;
    Ok((loss, grad))
}

/// Squared pixel difference and its gradient with respect to `pred`.
pub fn loss_sh(pred: &SoftMask, gt: &SoftMask) -> (f64, Vec<f64>) {
    assert_eq!(pred.data.len(), gt.data.len());
    let mut loss = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| {
            let d = p - g;
            loss += d * d;
            2.0 * d
        })
        .collect();
    (loss, grad)
}

/// Uniform graph Laplacian: vertex minus the mean of its one-ring.
pub fn uniform_laplacian(v: &[Vector3<f64>], neighbors: &[Vec<usize>]) -> Vec<Vector3<f64>> {
    v.iter()
        .zip(neighbors)
        .map(|(p, n)| {
            if n.is_empty() {
                return *p;
            }
            p - n.iter().map(|&j| v[j]).sum::<Vector3<f64>>() / n.len() as f64
        })
        .collect()
}

/// `Σ_i |δ(v)_i - δ(rest)_i|²` and its gradient with respect to `v` (the
/// gradient with respect to `rest` is its negation).
pub fn loss_lap(v: &[Vector3<f64>], rest: &[Vector3<f64>], neighbors: &[Vec<usize>]) -> (f64, Vec<Vector3<f64>>) {
    let diff: Vec<Vector3<f64>> = v.iter().zip(rest).map(|(a, b)| a - b).collect();
    let e = uniform_laplacian(&diff, neighbors);
    let loss = e.iter().map(|x| x.norm_squared()).sum();
    let mut grad: Vec<Vector3<f64>> = e.iter().map(|x| x * 2.0).collect();
    for (i, n) in neighbors.iter().enumerate() {
        if n.is_empty() {
            continue;
        }
        let share = e[i] * (2.0 / n.len() as f64);
        for &j in n {
            grad[j] -= share;
        }
    }
    (loss, grad)
}

/// `|desc(x, 1) - desc(x, m)|²` and its gradient with respect to `m`.
pub fn loss_feat(desc: &dyn Descriptor, x: &RgbImage, m: &SoftMask) -> (f64, Vec<f64>) {
    let full = desc.compute(x, &SoftMask::ones(x.width, x.height));
    let masked = desc.compute(x, m);
    let mut loss = 0.0;
    let g: Vec<f64> = full
        .iter()
        .zip(&masked)
        .map(|(a, b)| {
            let d = b - a;
            loss += d * d;
            2.0 * d
        })
        .collect();
    (loss, desc.mask_vjp(x, m, &g))
}

/// 1 when the mean per-joint 2D error is strictly below `tau` pixels.
pub fn lambda_schedule(pred: &Skeleton2D, gt: &Skeleton2D, tau: f64) -> f64 {
    if pred.mean_error(gt) < tau {
        1.0
    } else {
        0.0
    }
}

/// Per-term multipliers; every term has weight 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub art: f64,
    pub lap: f64,
    pub feat: f64,
    pub sh: f64,
    pub refine: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            art: 1.0,
            lap: 1.0,
            feat: 1.0,
            sh: 1.0,
            refine: 1.0,
            tau: DEFAULT_TAU,
        }
    }
}

/// Values of the individual terms of one training instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub art: f64,
    pub lap: f64,
    pub feat: f64,
    pub sh: f64,
    pub refine: f64,
    pub lambda: f64,
}

/// `L_Art + L_Lap + L_Feat + λ L_Sh + L_Ref`, each scaled by its weight.
pub fn loss_total(t: &LossTerms, w: &LossWeights) -> f64 {
    w.art * t.art + w.lap * t.lap + w.feat * t.feat + t.lambda * w.sh * t.sh + w.refine * t.refine
}

/// Projects a camera-frame skeleton to pixels.
pub fn project_skeleton(j: &Skeleton3D, plane: &ImagePlane) -> Result<Skeleton2D> {
    crate::camera::check_depths(&j.0)?;
    Ok(Skeleton2D(j.0.map(|p| plane.project_point(&p))))
}

/// Gradients of mesh-level terms, to be pulled back to `h` with
/// [`Synthesis::vjp`].
#[derive(Debug, Clone)]
pub struct MeshGradient {
    pub final_mesh: Vec<Vector3<f64>>,
    pub posed: Vec<Vector3<f64>>,
    pub rest: Vec<Vector3<f64>>,
}

impl Default for MeshGradient {
    fn default() -> Self {
        Self {
            final_mesh: vec![Vector3::zeros(); NUM_VERTICES],
            posed: vec![Vector3::zeros(); NUM_VERTICES],
            rest: vec![Vector3::zeros(); NUM_VERTICES],
        }
    }
}

impl MeshGradient {
    fn add_final(&mut self, g: &[Vector3<f64>], w: f64) {
        for (a, b) in self.final_mesh.iter_mut().zip(g) {
            *a += b * w;
        }
    }

    pub fn to_params(&self, syn: &Synthesis, assets: &HandModelAssets) -> [f64; crate::params::PARAM_DIM] {
        syn.vjp(Some(&self.final_mesh), Some(&self.posed), Some(&self.rest), assets)
    }
}

/// `L_Art` of a synthesized mesh; accumulates `weight x` its gradient.
pub fn art_term(
    syn: &Synthesis,
    assets: &HandModelAssets,
    gt: &Skeleton3D,
    ctx: &NormalizationContext,
    plane: &ImagePlane,
    weight: f64,
    grad: &mut MeshGradient,
) -> Result<f64> {
    let pred = syn.skeleton(assets);
    let pred_img = image_space(&pred, plane)?;
    let gt_img = image_space(gt, plane)?;
    let (loss, g_img) = loss_art(&pred_img, &gt_img, ctx)?;
    if weight != 0.0 {
        let mut g = image_space_vjp(&pred, &g_img, plane);
        g.0.iter_mut().for_each(|p| *p *= weight);
        regress_skeleton_vjp(&g, assets, &mut grad.final_mesh);
    }
    Ok(loss)
}

/// `L_Lap` between the posed (pre-camera) mesh and the shape-blended rest
/// mesh.
pub fn lap_term(syn: &Synthesis, assets: &HandModelAssets, weight: f64, grad: &mut MeshGradient) -> f64 {
    let (loss, g) = loss_lap(&syn.posed, &syn.rest.vertices, assets.neighbors());
    if weight != 0.0 {
        for ((gu, gx), gi) in grad.posed.iter_mut().zip(grad.rest.iter_mut()).zip(&g) {
            *gu += gi * weight;
            *gx -= gi * weight;
        }
    }
    loss
}

/// `L_Sh` of the soft silhouette against `gt`.
pub fn sh_term(
    syn: &Synthesis,
    plane: &ImagePlane,
    raster: &SoftRasterConfig,
    gt: &SoftMask,
    weight: f64,
    grad: &mut MeshGradient,
) -> Result<f64> {
    let render = soft_render(&syn.mesh, plane, raster)?;
    let (loss, gm) = loss_sh(&render.mask, gt);
    if weight != 0.0 {
        grad.add_final(&render.backward(&gm), weight);
    }
    Ok(loss)
}

/// Feature consistency between the image and the image masked by the mesh's
/// own soft silhouette.
pub fn feat_term(
    syn: &Synthesis,
    plane: &ImagePlane,
    raster: &SoftRasterConfig,
    desc: &dyn Descriptor,
    x: &RgbImage,
    weight: f64,
    grad: &mut MeshGradient,
) -> Result<f64> {
    let render = soft_render(&syn.mesh, plane, raster)?;
    let (loss, gm) = loss_feat(desc, x, &render.mask);
    if weight != 0.0 {
        grad.add_final(&render.backward(&gm), weight);
    }
    Ok(loss)
}

/// `Σ_k |proj(j_k) - target_k|²` over the regressed skeleton.
pub fn joint2d_term(
    syn: &Synthesis,
    assets: &HandModelAssets,
    target: &Skeleton2D,
    plane: &ImagePlane,
    weight: f64,
    grad: &mut MeshGradient,
) -> Result<f64> {
    let j = syn.skeleton(assets);
    let proj = project_skeleton(&j, plane)?;
    let mut loss = 0.0;
    let mut g = Skeleton3D::zeros();
    for k in 0..NUM_JOINTS {
        let d = proj.0[k] - target.0[k];
        loss += d.norm_squared();
        g.0[k] = plane.project_vjp(&j.0[k], &(d * (2.0 * weight)));
    }
    if weight != 0.0 {
        regress_skeleton_vjp(&g, assets, &mut grad.final_mesh);
    }
    Ok(loss)
}
