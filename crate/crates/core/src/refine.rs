//! Test-time refinement of a regressed mesh against its own 2D evidence.
//!
//! The objective is the squared pixel distance between the projected joints
//! and the refined 2D joints, plus the gated feature consistency of the
//! mesh's own soft silhouette, plus the Laplacian regularizer. The gate is
//! decided once from the starting estimate so that every step minimizes the
//! same function.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assets::{HandModelAssets, NUM_JOINTS};
use crate::camera::ImagePlane;
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::losses::{feat_term, joint2d_term, lambda_schedule, lap_term, project_skeleton, MeshGradient, DEFAULT_TAU};
use crate::model::synthesize;
use crate::params::{MeshParams, PARAM_DIM};
use crate::raster::SoftRasterConfig;
use crate::regressor::Evidence2D;
use crate::skeleton::Skeleton2D;

pub const DEFAULT_REFINE_ITERATIONS: usize = 50;
pub const DEFAULT_REFINE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `h -= γ g`.
    Plain,
    /// `h -= (H + I / γ)⁻¹ g` with `H` the Gauss-Newton matrix of the joint
    /// term. Directions the joints do not constrain take the plain step;
    /// stiff ones, such as translation, take a Newton step.
    DampedGaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub gamma: f64,
    pub raster: SoftRasterConfig,
    /// Gate threshold on the mean 2D joint error against the evidence, pixels.
    pub tau: f64,
    pub step_rule: StepRule,
    /// Halve a step that raises the objective. Steps that put the mesh
    /// behind the camera are always halved.
    pub reject_increase: bool,
    /// Step halvings tried before an iteration gives up and keeps `h`.
    pub max_halvings: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_REFINE_ITERATIONS,
            gamma: DEFAULT_REFINE_STEP,
            raster: SoftRasterConfig { sigma: 1.0, cutoff: 5.0 },
            tau: DEFAULT_TAU,
            step_rule: StepRule::DampedGaussNewton,
            reject_increase: true,
            max_halvings: 20,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("refinement step must be positive, got {}", self.gamma)));
        }
        if !(self.raster.sigma > 0.0) || !(self.raster.cutoff > 0.0) {
            return Err(Error::InvalidArgument("raster sigma and cutoff must be positive".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidArgument("tau must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Objective terms at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RefineTerms {
    pub iteration: usize,
    pub total: f64,
    pub joint: f64,
    pub feat: f64,
    pub lap: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub params: MeshParams,
    /// Row `i` holds the objective after `i` iterations.
    pub trace: Vec<RefineTerms>,
    /// Weight of the feature term for the whole run.
    pub lambda: f64,
}

/// Writes a trace as CSV with a header row.
pub fn write_trace_csv(trace: &[RefineTerms], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for row in trace {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Problem<'a> {
    x: &'a RgbImage,
    target: &'a Skeleton2D,
    lambda: f64,
    cfg: &'a RefineConfig,
    assets: &'a HandModelAssets,
    desc: &'a dyn Descriptor,
    plane: &'a ImagePlane,
}

impl Problem<'_> {
    fn terms(&self, h: &MeshParams, grad: Option<&mut [f64; PARAM_DIM]>, gn: Option<&mut DMatrix<f64>>) -> Result<RefineTerms> {
        let syn = synthesize(h, self.assets)?;
        let w = if grad.is_some() { 1.0 } else { 0.0 };
        let mut mg = MeshGradient::default();
        let joint = joint2d_term(&syn, self.assets, self.target, self.plane, w, &mut mg)?;
        let feat = if self.lambda > 0.0 {
            feat_term(&syn, self.plane, &self.cfg.raster, self.desc, self.x, w * self.lambda, &mut mg)?
        } else {
            0.0
        };
        let lap = lap_term(&syn, self.assets, w, &mut mg);
        let total = joint + self.lambda * feat + lap;
        if !total.is_finite() {
            return Err(Error::NonFinite("refinement objective".into()));
        }
        if let Some(g) = grad {
            *g = mg.to_params(&syn, self.assets);
        }
        if let Some(m) = gn {
            let j = syn.skeleton(self.assets);
            let jac = syn.skeleton_jacobian(self.assets);
            let proj = DMatrix::from_fn(2 * NUM_JOINTS, PARAM_DIM, |r, k| {
                self.plane.project_jvp(&j.0[r / 2], &jac[k].0[r / 2])[r % 2]
            });
            *m = proj.tr_mul(&proj) * 2.0;
        }
        Ok(RefineTerms {
            iteration: 0,
            total,
            joint,
            feat,
            lap,
        })
    }
}

/// Refines `h0` by descending the objective. `z.j2d` is the 2D target, which
/// at test time is the refined 2D pose of the regression loop.
///
/// A step that puts the mesh behind the camera, leaves the valid parameter
/// range (non-positive scale, zero quaternion), or that raises the objective
/// when `reject_increase` is set, is retried at half length. A non-finite
/// objective ends the run at the last finite iterate.
pub fn testing_refine(
    x: &RgbImage,
    z: &Evidence2D,
    h0: &MeshParams,
    cfg: &RefineConfig,
    assets: &HandModelAssets,
    desc: &dyn Descriptor,
    plane: &ImagePlane,
) -> Result<RefineOutput> {
    cfg.validate()?;
    h0.check_finite()?;
    let mut h = *h0;
    let start = synthesize(h0, assets)?.skeleton(assets);
    let lambda = lambda_schedule(&project_skeleton(&start, plane)?, &z.j2d, cfg.tau);
    let problem = Problem {
        x,
        target: &z.j2d,
        lambda,
        cfg,
        assets,
        desc,
        plane,
    };

    let mut grad = [0.0; PARAM_DIM];
    let mut gn = DMatrix::zeros(PARAM_DIM, PARAM_DIM);
    let damped = cfg.step_rule == StepRule::DampedGaussNewton;
    let mut current = problem.terms(&h, Some(&mut grad), damped.then_some(&mut gn))?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(current);

    for it in 1..=cfg.iterations {
        let dir = step(&grad, damped.then_some(&gn), cfg.gamma);
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=cfg.max_halvings {
            let mut cand = h;
            cand.0.iter_mut().zip(&dir).for_each(|(p, d)| *p += scale * d);
            cand.normalize_quat();
            match problem.terms(&cand, None, None) {
                Ok(t) if !cfg.reject_increase || t.total <= current.total => {
                    accepted = Some(cand);
                    break;
                }
                Ok(_) | Err(Error::BehindCamera { .. }) | Err(Error::InvalidArgument(_)) => scale *= 0.5,
                Err(Error::NonFinite(_)) => break,
                Err(e) => return Err(e),
            }
        }
        let Some(next) = accepted else {
            log::debug!("refinement stalled at iteration {it}");
            trace.push(RefineTerms { iteration: it, ..current });
            continue;
        };
        match problem.terms(&next, Some(&mut grad), damped.then_some(&mut gn)) {
            Ok(t) => {
                h = next;
                current = RefineTerms { iteration: it, ..t };
                trace.push(current);
            }
            Err(Error::NonFinite(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(RefineOutput { params: h, trace, lambda })
}

fn step(grad: &[f64; PARAM_DIM], gn: Option<&DMatrix<f64>>, gamma: f64) -> [f64; PARAM_DIM] {
    let plain = grad.map(|g| -gamma * g);
    let Some(gn) = gn else { return plain };
    let a = gn + DMatrix::identity(PARAM_DIM, PARAM_DIM) / gamma;
    match a.cholesky() {
        Some(c) => {
            let d = c.solve(&DVector::from_column_slice(grad));
            std::array::from_fn(|k| -d[k])
        }
        None => plain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::GridDescriptor;
    use crate::synth::{generate_dataset, AugmentConfig, SynthRecord};
    use crate::toy::gen_toy_model;

    fn record(seed: u64) -> (HandModelAssets, SynthRecord) {
        let assets = gen_toy_model(0);
        let r = generate_dataset(&assets, &AugmentConfig::default(), 1, seed, &ImagePlane::default())
            .unwrap()
            .remove(0);
        (assets, r)
    }

    fn evidence(r: &SynthRecord, desc: &GridDescriptor) -> Evidence2D {
        Evidence2D::from_image(&r.image, r.gt.j2d, desc, &ImagePlane::default()).unwrap()
    }

    fn perturbed(h: &MeshParams, amount: f64) -> MeshParams {
        let mut p = *h;
        for (k, v) in p.pose_mut().iter_mut().enumerate() {
            *v += amount * ((k * 7 % 5) as f64 - 2.0) / 2.0;
        }
        let mut t = p.translation();
        t[0] += amount * 0.3;
        p.set_translation(t);
        p
    }

    #[test]
    fn zero_iterations_return_the_start() {
        let (assets, r) = record(1);
        let desc = GridDescriptor::default();
        let h0 = perturbed(&r.gt.params, 0.1);
        let cfg = RefineConfig { iterations: 0, ..Default::default() };
        let out = testing_refine(&r.image, &evidence(&r, &desc), &h0, &cfg, &assets, &desc, &ImagePlane::default()).unwrap();
        assert_eq!(out.params, h0);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn ground_truth_start_has_zero_joint_term() {
        let (assets, r) = record(2);
        let desc = GridDescriptor::default();
        let cfg = RefineConfig { iterations: 3, ..Default::default() };
        let out = testing_refine(&r.image, &evidence(&r, &desc), &r.gt.params, &cfg, &assets, &desc, &ImagePlane::default()).unwrap();
        assert!(out.trace[0].joint < 1e-18, "{}", out.trace[0].joint);
        assert_eq!(out.lambda, 1.0);
        assert!(out.trace.iter().all(|t| t.total <= out.trace[0].total + 1e-9));
    }

    #[test]
    fn small_steps_do_not_increase_the_objective() {
        let (assets, r) = record(3);
        let desc = GridDescriptor::default();
        let h0 = perturbed(&r.gt.params, 0.05);
        let cfg = RefineConfig {
            iterations: 10,
            gamma: 1e-4,
            reject_increase: false,
            ..Default::default()
        };
        let out = testing_refine(&r.image, &evidence(&r, &desc), &h0, &cfg, &assets, &desc, &ImagePlane::default()).unwrap();
        assert_eq!(out.trace.len(), 11);
        for w in out.trace.windows(2) {
            assert!(w[1].total <= w[0].total, "{} -> {}", w[0].total, w[1].total);
        }
    }

    #[test]
    fn joint_term_ignores_depth_compensated_scaling() {
        let (assets, r) = record(4);
        let plane = ImagePlane::default();
        let desc = GridDescriptor::default();
        let problem = Problem {
            x: &r.image,
            target: &r.gt.j2d,
            lambda: 0.0,
            cfg: &RefineConfig::default(),
            assets: &assets,
            desc: &desc,
            plane: &plane,
        };
        let h0 = perturbed(&r.gt.params, 0.1);
        let base = problem.terms(&h0, None, None).unwrap().joint;
        for k in [0.8, 1.1, 1.5] {
            let mut h = h0;
            h.set_scale(h0.scale() * k);
            h.set_translation(h0.translation().map(|t| t * k));
            let j = problem.terms(&h, None, None).unwrap().joint;
            assert!((j - base).abs() <= 1e-6 * base, "{k}: {base} vs {j}");
        }
    }

    #[test]
    fn refinement_recovers_a_perturbed_pose() {
        let (assets, r) = record(5);
        let plane = ImagePlane::default();
        let desc = GridDescriptor::default();
        let h0 = perturbed(&r.gt.params, 0.1);
        let out = testing_refine(&r.image, &evidence(&r, &desc), &h0, &RefineConfig::default(), &assets, &desc, &plane).unwrap();
        let err = |h: &MeshParams| synthesize(h, &assets).unwrap().skeleton(&assets).mean_error(&r.gt.skeleton);
        let (before, after) = (err(&h0), err(&out.params));
        assert!(after < 0.5 * before, "{before} -> {after}");
        assert_eq!(out.trace.len(), DEFAULT_REFINE_ITERATIONS + 1);
        assert!(out.trace.last().unwrap().total < out.trace[0].total);
    }

    #[test]
    fn trace_is_written_as_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = [RefineTerms { iteration: 0, total: 3.0, joint: 1.0, feat: 2.0, lap: 0.0 }];
        write_trace_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iteration,total,joint,feat,lap\n0,3.0,1.0,2.0,0.0\n");
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let cfg = RefineConfig { gamma: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
