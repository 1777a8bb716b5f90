use std::fs;
use std::path::{Path, PathBuf};

use handmesh::camera::ImagePlane;
use handmesh::descriptor::GridDescriptor;
use handmesh::image::{RgbImage, SoftMask};
use handmesh::losses::{project_skeleton, reanchor_skeleton, NormalizationContext};
use handmesh::metrics::{
    compute_seg_metrics, pair_errors, pck_auc_from_errors, threshold_grid, EvalReport, SegMetrics, DEFAULT_PCK_RANGE,
    DEFAULT_PCK_STEPS,
};
use handmesh::params::MeshParams;
use handmesh::raster::{rasterize_hard, render_shaded};
use handmesh::refine::{testing_refine, write_trace_csv, RefineConfig, DEFAULT_REFINE_ITERATIONS, DEFAULT_REFINE_STEP};
use handmesh::regressor::{run_hme, Evidence2D, LinearRegressorWeights};
use handmesh::synth::{
    frame_params, generate_dataset, read_dataset, read_ground_truth, read_manifest, record_rng, write_dataset,
    AugmentConfig, Backgrounds, GroundTruth, ManifestEntry, MANIFEST,
};
use handmesh::train::{train as train_model, AugmentContext, TrainConfig, TrainSample};
use handmesh::{gen_toy_model as toy_model, load_model_assets, synthesize_mesh, HandMesh, HandModelAssets};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::CliError;
use crate::{EvalArgs, FitArgs, GenToyModelArgs, RenderArgs, RenderMode, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

const OVERLAY_ALBEDO: [f64; 3] = [0.35, 0.6, 0.9];
const RENDER_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
const CANONICAL_COVERAGE: f64 = 0.6;

fn need<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| CliError::missing(flag))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| handmesh::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| handmesh::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn light() -> Vector3<f64> {
    Vector3::new(0.3, -0.4, -1.0).normalize()
}

pub fn gen_toy_model(a: GenToyModelArgs) -> Result<()> {
    let out = need(a.out, "out")?;
    let assets = toy_model(a.seed.unwrap_or(0));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    assets.write(&out)?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let assets = load_model_assets(need(a.assets, "assets")?)?;
    let out = need(a.out, "out")?;
    let plane = ImagePlane::default();
    let cfg = AugmentConfig {
        background_dir: a.backgrounds,
        ..Default::default()
    };
    let records = generate_dataset(&assets, &cfg, a.count.unwrap_or(500), a.seed.unwrap_or(0), &plane)?;
    write_dataset(&out, &records)?;
    log::info!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn samples_from(dir: &Path, plane: &ImagePlane) -> Result<Vec<TrainSample>> {
    let desc = GridDescriptor::default();
    let records = read_dataset(dir)?;
    Ok(records
        .par_iter()
        .map(|r| TrainSample::from_record(r, &desc, plane))
        .collect::<handmesh::Result<_>>()?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let assets = load_model_assets(need(a.assets, "assets")?)?;
    let data = need(a.data, "data")?;
    let out = need(a.out_weights, "out-weights")?;
    let plane = ImagePlane::default();
    let seed = a.seed.unwrap_or(0);
    let defaults = TrainConfig::default();
    let augment = (!a.no_augment.unwrap_or(false)).then(|| AugmentConfig {
        start_epoch: a.augment_after.unwrap_or(AugmentConfig::default().start_epoch),
        background_dir: a.backgrounds.clone(),
        seed,
        ..Default::default()
    });
    let mut cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        max_augmented: a.max_augmented.unwrap_or(defaults.max_augmented),
        seed,
        augment,
        ..defaults
    };
    cfg.adam.learning_rate = a.lr.unwrap_or(cfg.adam.learning_rate);
    cfg.validate()?;

    let samples = samples_from(&data, &plane)?;
    let desc = GridDescriptor::default();
    let ctx = match &cfg.augment {
        Some(aug) => Some(AugmentContext {
            descriptor: &desc,
            backgrounds: Backgrounds::from_config(aug, &plane)?,
        }),
        None => None,
    };
    let result = train_model(&samples, &cfg, &assets, &plane, ctx.as_ref())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    result.weights.write(&out, seed, cfg.epochs)?;
    if let Some(trace) = a.trace {
        write_file(&trace, &serde_json::to_vec_pretty(&result.trace).map_err(CliError::internal)?)?;
    }
    log::info!("trained {} epochs, {} augmented records", cfg.epochs, result.augmented);
    Ok(())
}

/// Dataset directory of a manifest path or of the directory itself.
fn dataset_dir(p: &Path) -> PathBuf {
    if p.file_name().is_some_and(|n| n == MANIFEST) || p.is_file() {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        p.to_path_buf()
    }
}

struct Fitted {
    gt: GroundTruth,
    mask: SoftMask,
    overlay: RgbImage,
    trace: Option<Vec<handmesh::refine::RefineTerms>>,
}

pub fn fit(a: FitArgs) -> Result<()> {
    let assets = load_model_assets(need(a.assets, "assets")?)?;
    let (weights, _) = LinearRegressorWeights::read(need(a.weights, "weights")?)?;
    let input = dataset_dir(&need(a.input_manifest, "input-manifest")?);
    let out = need(a.out, "out")?;
    let refine = RefineConfig {
        iterations: a.refine_iters.unwrap_or(DEFAULT_REFINE_ITERATIONS),
        gamma: a.refine_step.unwrap_or(DEFAULT_REFINE_STEP),
        tau: a.tau.unwrap_or(RefineConfig::default().tau),
        ..Default::default()
    };
    refine.validate()?;
    let noise = a.keypoint_noise.unwrap_or(0.0);
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(CliError::new("invalid-argument", "keypoint-noise must be a non-negative number"));
    }
    let seed = a.seed.unwrap_or(0);
    let plane = ImagePlane::default();
    let desc = GridDescriptor::default();

    let entries = read_manifest(&input)?;
    let fitted: Vec<Fitted> = entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let record = handmesh::synth::load_record(&input, entry)?;
            let mut j2d = record.gt.j2d;
            if noise > 0.0 {
                let mut rng = record_rng(seed, i as u64);
                let n = Normal::new(0.0, noise).map_err(|e| CliError::new("invalid-argument", e.to_string()))?;
                for p in &mut j2d.0 {
                    *p += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
                }
            }
            let z = Evidence2D::from_image(&record.image, j2d, &desc, &plane)?;
            let hme = run_hme(&z, &weights, &assets).map_err(|e| at_record(entry, e))?;
            let (params, trace) = if refine.iterations > 0 {
                let zr = Evidence2D { j2d: hme.j2d, ..z };
                let r = testing_refine(&record.image, &zr, &hme.params, &refine, &assets, &desc, &plane)
                    .map_err(|e| at_record(entry, e))?;
                (r.params, Some(r.trace))
            } else {
                (hme.params, None)
            };
            let mesh = synthesize_mesh(&params, &assets).map_err(|e| at_record(entry, e))?;
            prediction(&params, &mesh, &record.image, &assets, &plane, trace).map_err(|e| at_record(entry, e))
        })
        .collect::<Result<_>>()?;

    create_dir(&out)?;
    let mut manifest = String::new();
    for (entry, f) in entries.iter().zip(&fitted) {
        let e = ManifestEntry {
            id: entry.id.clone(),
            image: format!("img/{}.ppm", entry.id),
            mask: format!("mask/{}.pgm", entry.id),
            gt: format!("gt/{}.json", entry.id),
        };
        write_file(&out.join(&e.image), &f.overlay.to_ppm())?;
        write_file(&out.join(&e.mask), &f.mask.to_pgm())?;
        write_file(&out.join(&e.gt), &serde_json::to_vec_pretty(&f.gt).map_err(CliError::internal)?)?;
        if let (Some(dir), Some(trace)) = (&a.trace_dir, &f.trace) {
            create_dir(dir)?;
            write_trace_csv(trace, dir.join(format!("{}.csv", entry.id)))?;
        }
        manifest.push_str(&serde_json::to_string(&e).map_err(CliError::internal)?);
        manifest.push('\n');
    }
    write_file(&out.join(MANIFEST), manifest.as_bytes())?;
    Ok(())
}

fn at_record(entry: &ManifestEntry, e: handmesh::Error) -> CliError {
    let mut c = CliError::from(e);
    c.message = format!("record {}: {}", entry.id, c.message);
    c
}

fn prediction(
    params: &MeshParams,
    mesh: &HandMesh,
    image: &RgbImage,
    assets: &HandModelAssets,
    plane: &ImagePlane,
    trace: Option<Vec<handmesh::refine::RefineTerms>>,
) -> handmesh::Result<Fitted> {
    let skeleton = handmesh::regress_skeleton(mesh, assets);
    let j2d = project_skeleton(&skeleton, plane)?;
    let context = NormalizationContext::from_skeleton(&skeleton, plane)?;
    Ok(Fitted {
        gt: GroundTruth {
            params: *params,
            skeleton,
            j2d,
            context,
        },
        mask: rasterize_hard(mesh, plane)?,
        overlay: render_shaded(mesh, plane, OVERLAY_ALBEDO, &light(), image)?,
        trace,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ParamsFile {
    Flat(MeshParams),
    Record { params: MeshParams },
}

pub fn render(a: RenderArgs) -> Result<()> {
    let assets = load_model_assets(need(a.assets, "assets")?)?;
    let path = need(a.params, "params")?;
    let mode = need(a.mode, "mode")?;
    let out = need(a.out, "out")?;
    let plane = ImagePlane::default();
    let text = fs::read(&path).map_err(|e| handmesh::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let h = match serde_json::from_slice::<ParamsFile>(&text) {
        Ok(ParamsFile::Flat(h) | ParamsFile::Record { params: h }) => h,
        Err(_) => {
            return Err(CliError::new(
                "format",
                format!("{}: expected 63 numbers or an object with a params array", path.display()),
            ))
        }
    };
    let bytes = match mode {
        RenderMode::Mask => rasterize_hard(&synthesize_mesh(&h, &assets)?, &plane)?.to_pgm(),
        RenderMode::Shaded => shaded(&h, &assets, &plane)?.to_ppm(),
        RenderMode::Canonical => shaded(&canonical(&h, &assets, &plane)?, &assets, &plane)?.to_ppm(),
    };
    write_file(&out, &bytes)
}

fn shaded(h: &MeshParams, assets: &HandModelAssets, plane: &ImagePlane) -> handmesh::Result<RgbImage> {
    let bg = RgbImage::filled(plane.width, plane.height, RENDER_BACKGROUND);
    render_shaded(&synthesize_mesh(h, assets)?, plane, OVERLAY_ALBEDO, &light(), &bg)
}

/// Mean pose, identity rotation, unit scale and the shape of `h`, centered
/// in view.
pub fn canonical(h: &MeshParams, assets: &HandModelAssets, plane: &ImagePlane) -> handmesh::Result<MeshParams> {
    let mut c = MeshParams::default();
    c.pose_mut().copy_from_slice(assets.mean_pose());
    c.shape_mut().copy_from_slice(h.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    frame_params(&c, [CANONICAL_COVERAGE; 2], 0.0, assets, plane, &mut rng)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pred_dir = dataset_dir(&need(a.pred, "pred")?);
    let gt_dir = dataset_dir(&need(a.gt, "gt")?);
    let report_path = need(a.report, "report")?;
    let thresholds = threshold_grid(
        a.pck_min.unwrap_or(DEFAULT_PCK_RANGE[0]),
        a.pck_max.unwrap_or(DEFAULT_PCK_RANGE[1]),
        a.pck_steps.unwrap_or(DEFAULT_PCK_STEPS),
    )?;
    let plane = ImagePlane::default();
    let pred = read_manifest(&pred_dir)?;
    let gt = read_manifest(&gt_dir)?;
    let pred_ids: Vec<&str> = pred.iter().map(|e| e.id.as_str()).collect();
    let gt_ids: Vec<&str> = gt.iter().map(|e| e.id.as_str()).collect();
    if pred_ids != gt_ids {
        return Err(CliError::new(
            "invalid-argument",
            format!("prediction and ground-truth manifests list different records ({} vs {})", pred.len(), gt.len()),
        ));
    }
    let pairs: Vec<_> = pred
        .par_iter()
        .zip(&gt)
        .map(|(p, g)| {
            let pg = read_ground_truth(pred_dir.join(&p.gt))?;
            let gg = read_ground_truth(gt_dir.join(&g.gt))?;
            let anchored = reanchor_skeleton(&pg.skeleton, &gg.context, &plane).map_err(|e| at_record(p, e))?;
            let pm = SoftMask::read_pgm(pred_dir.join(&p.mask))?;
            let gm = SoftMask::read_pgm(gt_dir.join(&g.mask))?;
            let seg = compute_seg_metrics(&pm, &gm).map_err(|e| at_record(p, e))?;
            Ok((anchored, gg.skeleton, seg))
        })
        .collect::<Result<_>>()?;
    let (anchored, truth): (Vec<_>, Vec<_>) = pairs.iter().map(|(a, g, _)| (*a, *g)).unzip();
    let errors = pair_errors(&anchored, &truth)?;
    let curve = pck_auc_from_errors(&errors, &thresholds)?;
    let seg = SegMetrics::mean(&pairs.iter().map(|p| p.2).collect::<Vec<_>>())?;
    let report = EvalReport {
        samples: pairs.len(),
        mean_joint_error: errors.iter().sum::<f64>() / errors.len() as f64,
        pck: curve.pck,
        auc: curve.auc,
        seg,
    };
    report.check_consistency()?;
    let json = report.to_json()?;
    write_file(&report_path, json.as_bytes())?;
    print!("{json}");
    Ok(())
}
