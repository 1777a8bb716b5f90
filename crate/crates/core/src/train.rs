//! Joint training of the mesh regressor and the 2D refiner with Adam.
//!
//! Each instance runs the regression loop from `h(0)`, then back-propagates
//! `L_Art + L_Lap + L_Feat + λ L_Sh + L_Ref` through all iterations into
//! both weight matrices. `L_Ref` is measured in pixels and summed over
//! iterations. The fixed descriptor makes `L_Feat` a
//! constant of the instance.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::assets::HandModelAssets;
use crate::camera::ImagePlane;
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::SoftMask;
use crate::losses::{
    art_term, lambda_schedule, lap_term, loss_feat, loss_total, project_skeleton, sh_term, LossTerms,
    LossWeights, MeshGradient, NormalizationContext,
};
use crate::model::{synthesize, Synthesis, SKELETON_DIM};
use crate::params::PARAM_DIM;
use crate::raster::SoftRasterConfig;
use crate::regressor::{
    affine, centered_j3d, decode_params, decode_vjp, encode_params, initial_params, j3d_input, normalized_j2d, ref_input,
    Evidence2D, LinearRegressorWeights, INNER_ITERATIONS, J2D_DIM,
};
use crate::skeleton::{regress_skeleton_vjp, Skeleton2D, Skeleton3D};
use crate::synth::{augment_epoch_hook, AugmentConfig, Backgrounds, SynthRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub inner_iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub raster: SoftRasterConfig,
    /// Self-generated records; `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Upper bound on the number of augmented records kept.
    pub max_augmented: usize,
    /// Stops gradients between the two heads: the refiner loss trains only
    /// the refiner and the mesh losses train only the regressor.
    pub detach_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            inner_iterations: INNER_ITERATIONS,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            weights: LossWeights::default(),
            raster: SoftRasterConfig { sigma: 1.0, cutoff: 5.0 },
            augment: Some(AugmentConfig::default()),
            max_augmented: 500,
            detach_heads: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.adam.learning_rate > 0.0) || !(self.adam.epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.inner_iterations < 1 {
            return bad("inner_iterations must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.raster.sigma > 0.0) || !(self.raster.cutoff > 0.0) {
            return bad("raster sigma and cutoff must be positive");
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One supervised instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub evidence: Evidence2D,
    /// Camera frame.
    pub skeleton: Skeleton3D,
    pub mask: SoftMask,
    pub j2d: Skeleton2D,
    pub context: NormalizationContext,
    /// `L_Feat` of the ground-truth mask.
    pub feat: f64,
}

impl TrainSample {
    /// Evidence from the image descriptor and the ground-truth 2D joints.
    pub fn from_record(r: &SynthRecord, desc: &dyn Descriptor, plane: &ImagePlane) -> Result<Self> {
        let evidence = Evidence2D::from_image(&r.image, r.gt.j2d, desc, plane)?;
        let (feat, _) = loss_feat(desc, &r.image, &r.mask);
        Ok(Self {
            evidence,
            skeleton: r.gt.skeleton,
            mask: r.mask.clone(),
            j2d: r.gt.j2d,
            context: r.gt.context,
            feat,
        })
    }
}

/// Loss, gate and weight gradient of one instance.
#[derive(Debug, Clone)]
pub struct InstanceGradient {
    pub terms: LossTerms,
    pub total: f64,
    pub grad: Vec<f64>,
    /// Final regressed parameters.
    pub params: crate::params::MeshParams,
}

const PX: f64 = crate::camera::IMAGE_SIZE as f64;

struct Iteration {
    /// Encoded parameters after the update.
    h: [f64; PARAM_DIM],
    in_j3d: Vec<f64>,
    in_ref: Vec<f64>,
    syn: Synthesis,
    j2d: Vec<f64>,
}

/// Forward and reverse pass of the regression loop for one instance.
pub fn instance_gradient(
    w: &LinearRegressorWeights,
    s: &TrainSample,
    cfg: &TrainConfig,
    assets: &HandModelAssets,
    plane: &ImagePlane,
) -> Result<InstanceGradient> {
    let d = w.feature_dim();
    if s.evidence.feature.len() != d {
        return Err(Error::Dimension {
            what: "training feature".into(),
            expected: d,
            found: s.evidence.feature.len(),
        });
    }
    let feature = &s.evidence.feature;
    let gt2 = normalized_j2d(&s.j2d);
    let lw = &cfg.weights;

    let mut h = encode_params(&initial_params(assets));
    let mut j2d = normalized_j2d(&s.evidence.j2d).to_vec();
    let mut iters: Vec<Iteration> = Vec::with_capacity(cfg.inner_iterations);
    let mut l_ref = 0.0;
    for _ in 0..cfg.inner_iterations {
        let in_j3d = j3d_input(feature, &j2d, &h);
        let dh = affine(w.j3d_weights(), w.j3d_bias(), &in_j3d);
        h.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
        let syn = synthesize(&decode_params(&h), assets)?;
        let j3d = syn.skeleton(assets);
        let in_ref = ref_input(&j2d, feature, &h, &centered_j3d(&j3d));
        j2d = affine(w.ref_weights(), w.ref_bias(), &in_ref);
        l_ref += j2d.iter().zip(&gt2).map(|(a, b)| (PX * (a - b)).powi(2)).sum::<f64>();
        iters.push(Iteration {
            h,
            in_j3d,
            in_ref,
            syn,
            j2d: j2d.clone(),
        });
    }

    let last = &iters.last().unwrap().syn;
    let mut mesh_grad = MeshGradient::default();
    let art = art_term(last, assets, &s.skeleton, &s.context, plane, lw.art, &mut mesh_grad)?;
    let lap = lap_term(last, assets, lw.lap, &mut mesh_grad);
    let pred2 = project_skeleton(&last.skeleton(assets), plane)?;
    let lambda = lambda_schedule(&pred2, &s.j2d, lw.tau);
    let sh = if lambda > 0.0 {
        sh_term(last, plane, &cfg.raster, &s.mask, lambda * lw.sh, &mut mesh_grad)?
    } else {
        0.0
    };
    let terms = LossTerms {
        art,
        lap,
        feat: s.feat,
        sh,
        refine: l_ref,
        lambda,
    };

    let (n_j3d, n_ref) = (LinearRegressorWeights::j3d_input_dim(d), LinearRegressorWeights::ref_input_dim(d));
    let mut grad = vec![0.0; w.as_slice().len()];
    let (g_j3d_w, rest) = grad.split_at_mut(n_j3d * PARAM_DIM);
    let (g_j3d_b, rest) = rest.split_at_mut(PARAM_DIM);
    let (g_ref_w, g_ref_b) = rest.split_at_mut(n_ref * J2D_DIM);

    let mut g_h: Vec<f64> = mesh_grad.to_params(last, assets).to_vec();
    decode_vjp(&iters.last().unwrap().h, &mut g_h);
    let mut g_j = vec![0.0; J2D_DIM];
    for it in iters.iter().rev() {
        for ((g, a), b) in g_j.iter_mut().zip(&it.j2d).zip(&gt2) {
            *g += 2.0 * lw.refine * PX * PX * (a - b);
        }
        outer_add(g_ref_w, &it.in_ref, &g_j);
        g_ref_b.iter_mut().zip(&g_j).for_each(|(a, b)| *a += b);
        let mut g_j_prev = vec![0.0; J2D_DIM];
        if !cfg.detach_heads {
            let g_in = mat_vec(w.ref_weights(), &g_j, n_ref);
            g_j_prev.copy_from_slice(&g_in[..J2D_DIM]);
            let h_at = J2D_DIM + d;
            g_h.iter_mut().zip(&g_in[h_at..h_at + PARAM_DIM]).for_each(|(a, b)| *a += b);
            let g_skel = Skeleton3D::from_flat(&g_in[h_at + PARAM_DIM..h_at + PARAM_DIM + SKELETON_DIM]);
            let mut g_mesh = vec![nalgebra::Vector3::zeros(); crate::assets::NUM_VERTICES];
            regress_skeleton_vjp(&g_skel, assets, &mut g_mesh);
            let mut g_skel_h = it.syn.vjp(Some(&g_mesh), None, None, assets);
            decode_vjp(&it.h, &mut g_skel_h);
            g_h.iter_mut().zip(&g_skel_h).for_each(|(a, b)| *a += b);
        }

        outer_add(g_j3d_w, &it.in_j3d, &g_h);
        g_j3d_b.iter_mut().zip(&g_h).for_each(|(a, b)| *a += b);
        let g_in = mat_vec(w.j3d_weights(), &g_h, n_j3d);
        if !cfg.detach_heads {
            g_j_prev.iter_mut().zip(&g_in[d..d + J2D_DIM]).for_each(|(a, b)| *a += b);
        }
        g_h.iter_mut().zip(&g_in[d + J2D_DIM..]).for_each(|(a, b)| *a += b);
        g_j = g_j_prev;
    }

    Ok(InstanceGradient {
        total: loss_total(&terms, lw),
        terms,
        grad,
        params: decode_params(&h),
    })
}

/// `W[i][o] += x[i] g[o]` for an input-major `W`.
fn outer_add(w: &mut [f64], x: &[f64], g: &[f64]) {
    for (row, &xi) in w.chunks_exact_mut(g.len()).zip(x) {
        if xi != 0.0 {
            row.iter_mut().zip(g).for_each(|(a, b)| *a += xi * b);
        }
    }
}

/// `W g` for an input-major `W` with `rows` inputs.
fn mat_vec(w: &[f64], g: &[f64], rows: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| w[i * g.len()..(i + 1) * g.len()].iter().zip(g).map(|(a, b)| a * b).sum())
        .collect()
}

/// Per-epoch means over the instances visited in that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub terms: LossTerms,
    /// Fraction of instances with the shape loss enabled.
    pub lambda_fraction: f64,
    pub samples: usize,
    /// Instances whose prediction could not be scored (behind the camera).
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: LinearRegressorWeights,
    pub trace: Vec<EpochStats>,
    pub augmented: usize,
}

/// Everything augmentation needs besides its configuration.
pub struct AugmentContext<'a> {
    pub descriptor: &'a dyn Descriptor,
    pub backgrounds: Backgrounds,
}

/// Minimizes the summed instance losses with Adam over mini-batches. The
/// result is rounded to `f32`, the precision of the weights file.
pub fn train(
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    assets: &HandModelAssets,
    plane: &ImagePlane,
    augment: Option<&AugmentContext>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let Some(first) = dataset.first() else {
        return Err(Error::InvalidArgument("training set is empty".into()));
    };
    let d = first.evidence.feature.len();
    let mut samples = dataset.to_vec();
    let mut w = LinearRegressorWeights::pass_through(d);
    let mut adam = Adam::new(cfg.adam, w.as_slice().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut augmented = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let (mut loss, mut visited, mut skipped) = (0.0, 0usize, 0usize);
        let mut seeds = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Option<InstanceGradient>> = batch
                .par_iter()
                .map(|&i| match instance_gradient(&w, &samples[i], cfg, assets, plane) {
                    Ok(g) => Ok(Some(g)),
                    Err(Error::BehindCamera { .. }) | Err(Error::InvalidArgument(_)) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; w.as_slice().len()];
            let mut used = 0;
            for r in results.iter() {
                let Some(r) = r else {
                    skipped += 1;
                    continue;
                };
                if !r.total.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                grad.iter_mut().zip(&r.grad).for_each(|(a, g)| *a += g);
                loss += r.total;
                sum.art += r.terms.art;
                sum.lap += r.terms.lap;
                sum.feat += r.terms.feat;
                sum.sh += r.terms.sh;
                sum.refine += r.terms.refine;
                sum.lambda += r.terms.lambda;
                used += 1;
                if b == 0 {
                    seeds.push(r.params);
                }
            }
            visited += used;
            if used == 0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g /= used as f64);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(w.as_mut_slice(), &grad);
        }
        if skipped > 0 {
            warn!("epoch {epoch}: {skipped} instance(s) skipped");
        }
        let n = visited.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: loss / n,
            terms: LossTerms {
                art: sum.art / n,
                lap: sum.lap / n,
                feat: sum.feat / n,
                sh: sum.sh / n,
                refine: sum.refine / n,
                lambda: sum.lambda / n,
            },
            lambda_fraction: sum.lambda / n,
            samples: visited,
            skipped,
        };
        if !stats.loss.is_finite() || visited == 0 {
            return Err(Error::Diverged { epoch });
        }
        info!(
            "epoch {epoch}: loss {:.4} art {:.4} ref {:.4} sh {:.1} lambda {:.3} n {}",
            stats.loss, stats.terms.art, stats.terms.refine, stats.terms.sh, stats.lambda_fraction, samples.len()
        );
        trace.push(stats);

        if let (Some(acfg), Some(ctx)) = (&cfg.augment, augment) {
            let room = cfg.max_augmented - augmented;
            if room > 0 {
                seeds.truncate(room.div_ceil(acfg.per_seed));
                let records = augment_epoch_hook(epoch, &seeds, acfg, assets, &ctx.backgrounds, plane)?;
                for r in records.iter().take(room) {
                    samples.push(TrainSample::from_record(r, ctx.descriptor, plane)?);
                    augmented += 1;
                }
            }
        }
    }
    w.quantize();
    Ok(TrainOutput {
        weights: w,
        trace,
        augmented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::GridDescriptor;
    use crate::synth::generate_dataset;
    use crate::toy::gen_toy_model;
    use rand::Rng;

    fn samples(n: usize, seed: u64) -> (HandModelAssets, Vec<TrainSample>) {
        let assets = gen_toy_model(0);
        let plane = ImagePlane::default();
        let recs = generate_dataset(&assets, &AugmentConfig::default(), n, seed, &plane).unwrap();
        let desc = GridDescriptor::default();
        let s = recs.iter().map(|r| TrainSample::from_record(r, &desc, &plane).unwrap()).collect();
        (assets, s)
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 1,
            augment: None,
            ..Default::default()
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let (assets, s) = samples(1, 3);
        let plane = ImagePlane::default();
        let cfg = TrainConfig {
            detach_heads: false,
            ..small_cfg(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = LinearRegressorWeights::pass_through(s[0].evidence.feature.len());
        w.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
        let g = instance_gradient(&w, &s[0], &cfg, &assets, &plane).unwrap();
        let n = w.as_slice().len();
        let (n1, n2) = (
            LinearRegressorWeights::j3d_input_dim(1024) * 63,
            LinearRegressorWeights::ref_input_dim(1024) * 42,
        );
        // Biases and the non-feature rows carry the largest gradients.
        let mut picks: Vec<usize> = (0..10).map(|_| rng.random_range(0..n)).collect();
        picks.extend((0..5).map(|_| n1 + rng.random_range(0..63)));
        picks.extend((0..5).map(|_| n1 + 63 + n2 + rng.random_range(0..42)));
        for &k in &picks {
            let eps = 1e-6;
            let mut wp = w.clone();
            wp.as_mut_slice()[k] += eps;
            let mut wm = w.clone();
            wm.as_mut_slice()[k] -= eps;
            let lp = instance_gradient(&wp, &s[0], &cfg, &assets, &plane).unwrap();
            let lm = instance_gradient(&wm, &s[0], &cfg, &assets, &plane).unwrap();
            assert_eq!(lp.terms.lambda, lm.terms.lambda);
            let fd = (lp.total - lm.total) / (2.0 * eps);
            let err = (fd - g.grad[k]).abs() / fd.abs().max(g.grad[k].abs()).max(1e-6);
            assert!(err <= 1e-2, "entry {k}: fd {fd} analytic {}", g.grad[k]);
        }
    }

    #[test]
    fn loss_decreases_on_one_sample() {
        let (assets, s) = samples(1, 4);
        let out = train(&s, &small_cfg(30), &assets, &ImagePlane::default(), None).unwrap();
        let first = out.trace[0].loss;
        let last = out.trace.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (assets, s) = samples(4, 5);
        let mut cfg = small_cfg(3);
        cfg.batch_size = 2;
        let a = train(&s, &cfg, &assets, &ImagePlane::default(), None).unwrap();
        let b = train(&s, &cfg, &assets, &ImagePlane::default(), None).unwrap();
        assert_eq!(a.weights.to_bytes(0, 3), b.weights.to_bytes(0, 3));
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let assets = gen_toy_model(0);
        assert!(train(&[], &small_cfg(1), &assets, &ImagePlane::default(), None).is_err());
    }
}
