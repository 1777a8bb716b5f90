//! Synthetic training records: perturbed mesh parameters rendered to an RGB
//! image, a binary mask and a skeleton.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assets::HandModelAssets;
use crate::camera::ImagePlane;
use crate::error::{Error, Result};
use crate::image::{RgbImage, SoftMask};
use crate::losses::{project_skeleton, NormalizationContext};
use crate::model::synthesize_mesh;
use crate::params::{MeshParams, POSE, SCALE, SHAPE};
use crate::raster::{rasterize_hard, render_shaded};
use crate::regressor::{initial_params, DEFAULT_DEPTH};
use crate::rotation::euler_zyx_quat;
use crate::skeleton::{regress_skeleton, Skeleton2D, Skeleton3D};

/// Attempts at placing a mesh in front of the camera before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Shape coefficients are drawn from `U[-r, r]`; 0 keeps the seed's.
    pub shape_range: f64,
    /// Upper end of the per-axis Euler angle range `[0, r]`.
    pub rotation_range: f64,
    pub per_seed: usize,
    pub start_epoch: usize,
    /// Camera scale range.
    pub scale_range: [f64; 2],
    /// When set, the translation is redrawn so the larger side of the
    /// projected mesh covers this fraction range of the image.
    pub coverage: Option<[f64; 2]>,
    /// Fraction of the free margin used for random lateral placement.
    pub offset_fraction: f64,
    /// Directory of PPM backgrounds; procedural noise when absent.
    pub background_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shape_range: 3.0,
            rotation_range: TAU,
            per_seed: 3,
            start_epoch: 20,
            scale_range: [0.9, 1.1],
            coverage: Some([0.2, 0.8]),
            offset_fraction: 0.8,
            background_dir: None,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.per_seed < 1 {
            return bad("per_seed must be at least 1");
        }
        if !(self.shape_range >= 0.0) || !(self.rotation_range >= 0.0) {
            return bad("shape and rotation ranges must be nonnegative");
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad("scale range must be positive and ordered");
        }
        if let Some([c0, c1]) = self.coverage {
            if !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
                return bad("coverage range must lie in (0, 1] and be ordered");
            }
        }
        if !(0.0..=1.0).contains(&self.offset_fraction) {
            return bad("offset fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// New shape and camera around a seed pose. The translation keeps the
/// seed's unless `cfg.coverage` is set; use [`frame_params`] to place it.
pub fn perturb_seed(h_seed: &MeshParams, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> MeshParams {
    let mut h = *h_seed;
    if cfg.shape_range > 0.0 {
        for s in h.shape_mut() {
            *s = rng.random_range(-cfg.shape_range..=cfg.shape_range);
        }
    }
    let r = cfg.rotation_range;
    let (a, b, g) = (uniform(rng, 0.0, r), uniform(rng, 0.0, r), uniform(rng, 0.0, r));
    h.set_quat(euler_zyx_quat(a, b, g));
    h.set_scale(uniform(rng, cfg.scale_range[0], cfg.scale_range[1]));
    h
}

/// Redraws `c_t` so the mesh is in front of the camera and its larger
/// projected side spans a random fraction of the image within `coverage`.
pub fn frame_params(
    h: &MeshParams,
    coverage: [f64; 2],
    offset_fraction: f64,
    assets: &HandModelAssets,
    plane: &ImagePlane,
    rng: &mut ChaCha8Rng,
) -> Result<MeshParams> {
    let mut centered = *h;
    centered.set_translation([0.0; 3]);
    let v = synthesize_mesh(&centered, assets)?.vertices;
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in &v {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let center = (hi + lo) * 0.5;
    let side = plane.width.min(plane.height) as f64;
    let frac = uniform(rng, coverage[0], coverage[1]);
    // Sized at the depth of the nearest vertex, which bounds the projection.
    let near = plane.focal * ext.x.max(ext.y) / (frac * side);
    let z = near + center.z - lo.z;
    if !(near > 0.0) {
        return Err(Error::behind_camera(vec![0]));
    }
    let margin = |n: usize, e: f64| ((n as f64 - plane.focal * e / near) * 0.5).max(0.0) * offset_fraction;
    let (mx, my) = (margin(plane.width, ext.x), margin(plane.height, ext.y));
    let du = uniform(rng, -mx, mx);
    let dv = uniform(rng, -my, my);
    let mut out = *h;
    out.set_translation([
        -center.x + du * z / plane.focal,
        -center.y + dv * z / plane.focal,
        z - center.z,
    ]);
    Ok(out)
}

/// Ground truth stored next to each rendered record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: MeshParams,
    /// Camera frame, model units.
    pub skeleton: Skeleton3D,
    /// Pixels.
    pub j2d: Skeleton2D,
    pub context: NormalizationContext,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub image: RgbImage,
    pub mask: SoftMask,
    pub gt: GroundTruth,
}

/// Renders `h` over `background` with a random skin tone and light.
pub fn generate_record(
    h: &MeshParams,
    assets: &HandModelAssets,
    background: &RgbImage,
    plane: &ImagePlane,
    rng: &mut ChaCha8Rng,
) -> Result<SynthRecord> {
    let mesh = synthesize_mesh(h, assets)?;
    crate::camera::check_depths(&mesh.vertices)?;
    let r = rng.random_range(0.55..0.95);
    let g = r * rng.random_range(0.6..0.8);
    let b = g * rng.random_range(0.7..0.9);
    let light = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), -1.0).normalize();
    let image = render_shaded(&mesh, plane, [r, g, b], &light, background)?;
    let mask = rasterize_hard(&mesh, plane)?;
    let skeleton = regress_skeleton(&mesh, assets);
    let j2d = project_skeleton(&skeleton, plane)?;
    let context = NormalizationContext::from_skeleton(&skeleton, plane)?;
    Ok(SynthRecord {
        image,
        mask,
        gt: GroundTruth {
            params: *h,
            skeleton,
            j2d,
            context,
        },
    })
}

/// Smooth random color field with fine grain.
pub fn procedural_background(plane: &ImagePlane, rng: &mut ChaCha8Rng) -> RgbImage {
    const GRID: usize = 8;
    let knots: Vec<[f64; 3]> = (0..(GRID + 1) * (GRID + 1))
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    let (w, h) = (plane.width, plane.height);
    let mut img = RgbImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        let fy = y as f64 / h as f64 * GRID as f64;
        let (gy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / w as f64 * GRID as f64;
            let (gx, tx) = (fx.floor() as usize, fx.fract());
            let k = |i: usize, j: usize| knots[(gy + j) * (GRID + 1) + gx + i];
            let grain = rng.random_range(-0.04..0.04);
            img.data[y * w + x] = std::array::from_fn(|c| {
                let top = k(0, 0)[c] * (1.0 - tx) + k(1, 0)[c] * tx;
                let bottom = k(0, 1)[c] * (1.0 - tx) + k(1, 1)[c] * tx;
                (top * (1.0 - ty) + bottom * ty + grain).clamp(0.0, 1.0)
            });
        }
    }
    img
}

/// Background images loaded once and sampled per record.
#[derive(Debug, Clone, Default)]
pub struct Backgrounds {
    images: Vec<RgbImage>,
}

impl Backgrounds {
    /// All `*.ppm` files of `dir` in name order; each must match the plane.
    pub fn load(dir: impl AsRef<Path>, plane: &ImagePlane) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| {
                let img = RgbImage::read_ppm(p)?;
                if (img.width, img.height) != (plane.width, plane.height) {
                    return Err(Error::InvalidArgument(format!(
                        "background {} is {}x{}, expected {}x{}",
                        p.display(),
                        img.width,
                        img.height,
                        plane.width,
                        plane.height
                    )));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::InvalidArgument(format!("no .ppm backgrounds in {}", dir.display())));
        }
        Ok(Self { images })
    }

    pub fn from_config(cfg: &AugmentConfig, plane: &ImagePlane) -> Result<Self> {
        match &cfg.background_dir {
            Some(dir) => Self::load(dir, plane),
            None => Ok(Self::default()),
        }
    }

    pub fn sample(&self, plane: &ImagePlane, rng: &mut ChaCha8Rng) -> RgbImage {
        if self.images.is_empty() {
            procedural_background(plane, rng)
        } else {
            self.images[rng.random_range(0..self.images.len())].clone()
        }
    }
}

/// Perturbs, places and renders one record, redrawing the placement when
/// the mesh ends up behind the camera.
pub fn sample_record(
    h_seed: &MeshParams,
    cfg: &AugmentConfig,
    assets: &HandModelAssets,
    backgrounds: &Backgrounds,
    plane: &ImagePlane,
    rng: &mut ChaCha8Rng,
) -> Result<SynthRecord> {
    let h = perturb_seed(h_seed, cfg, rng);
    let background = backgrounds.sample(plane, rng);
    let mut last = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let placed = match cfg.coverage {
            Some(c) => frame_params(&h, c, cfg.offset_fraction, assets, plane, rng),
            None => Ok(h),
        };
        match placed.and_then(|p| generate_record(&p, assets, &background, plane, rng)) {
            Ok(r) => return Ok(r),
            Err(e @ Error::BehindCamera { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

/// Independent generator for record `index`; serial and parallel runs draw
/// identical streams.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `per_seed` records per seed prediction from `start_epoch` on.
pub fn augment_epoch_hook(
    epoch: usize,
    seeds: &[MeshParams],
    cfg: &AugmentConfig,
    assets: &HandModelAssets,
    backgrounds: &Backgrounds,
    plane: &ImagePlane,
) -> Result<Vec<SynthRecord>> {
    if epoch < cfg.start_epoch {
        return Ok(Vec::new());
    }
    let stream = (epoch as u64) << 32;
    (0..seeds.len() * cfg.per_seed)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(cfg.seed ^ 0x5eed_a11e, stream + i as u64);
            sample_record(&seeds[i / cfg.per_seed], cfg, assets, backgrounds, plane, &mut rng)
        })
        .collect()
}

/// Per-entry articulation spread around the mean pose for dataset seeds,
/// radians.
pub const SEED_POSE_RANGE: f64 = 0.35;

/// Seed parameters of a standalone dataset: the mean pose with a random
/// articulation, default camera.
pub fn dataset_seed(assets: &HandModelAssets, rng: &mut ChaCha8Rng) -> MeshParams {
    let mut h = initial_params(assets);
    for p in &mut h.0[POSE] {
        *p += rng.random_range(-SEED_POSE_RANGE..SEED_POSE_RANGE);
    }
    debug_assert_eq!(h.0[SCALE], 1.0);
    debug_assert_eq!(h.translation()[2], DEFAULT_DEPTH);
    debug_assert!(h.0[SHAPE].iter().all(|&s| s == 0.0));
    h
}

/// `count` records from independent per-record streams of `seed`.
pub fn generate_dataset(
    assets: &HandModelAssets,
    cfg: &AugmentConfig,
    count: usize,
    seed: u64,
    plane: &ImagePlane,
) -> Result<Vec<SynthRecord>> {
    cfg.validate()?;
    let backgrounds = Backgrounds::from_config(cfg, plane)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(seed, i as u64);
            let h = dataset_seed(assets, &mut rng);
            sample_record(&h, cfg, assets, &backgrounds, plane, &mut rng)
        })
        .collect()
}

/// One line of `manifest.jsonl`; paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub gt: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes records in order under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, records: &[SynthRecord]) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    for sub in ["img", "mask", "gt"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = Vec::with_capacity(records.len());
    let mut lines = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let id = format!("{i:06}");
        let entry = ManifestEntry {
            image: format!("img/{id}.ppm"),
            mask: format!("mask/{id}.pgm"),
            gt: format!("gt/{id}.json"),
            id,
        };
        write_file(&dir.join(&entry.image), &r.image.to_ppm())?;
        write_file(&dir.join(&entry.mask), &r.mask.to_pgm())?;
        write_file(&dir.join(&entry.gt), &serde_json::to_vec_pretty(&r.gt)?)?;
        writeln!(lines, "{}", serde_json::to_string(&entry)?).unwrap();
        manifest.push(entry);
    }
    write_file(&dir.join(MANIFEST), &lines)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_record(dir: impl AsRef<Path>, entry: &ManifestEntry) -> Result<SynthRecord> {
    let dir = dir.as_ref();
    Ok(SynthRecord {
        image: RgbImage::read_ppm(dir.join(&entry.image))?,
        mask: SoftMask::read_pgm(dir.join(&entry.mask))?,
        gt: read_ground_truth(dir.join(&entry.gt))?,
    })
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SynthRecord>> {
    let dir = dir.as_ref();
    read_manifest(dir)?.iter().map(|e| load_record(dir, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::gen_toy_model;

    fn degenerate() -> AugmentConfig {
        AugmentConfig {
            shape_range: 0.0,
            scale_range: [1.0, 1.0],
            coverage: None,
            ..Default::default()
        }
    }

    #[test]
    fn default_augmentation_constants() {
        let c = AugmentConfig::default();
        assert_eq!((c.shape_range, c.rotation_range, c.per_seed, c.start_epoch), (3.0, TAU, 3, 20));
    }

    #[test]
    fn degenerate_ranges_change_only_the_rotation() {
        let assets = gen_toy_model(0);
        let mut rng = record_rng(1, 0);
        let mut seed = dataset_seed(&assets, &mut rng);
        seed.shape_mut()[2] = 0.7;
        let h = perturb_seed(&seed, &degenerate(), &mut rng);
        for k in 0..crate::params::PARAM_DIM {
            if !crate::params::QUAT.contains(&k) {
                assert_eq!(h.0[k], seed.0[k], "entry {k}");
            }
        }
        assert_ne!(h.quat(), seed.quat());
    }

    #[test]
    fn pose_is_never_perturbed() {
        let assets = gen_toy_model(0);
        let mut rng = record_rng(2, 0);
        for _ in 0..50 {
            let seed = dataset_seed(&assets, &mut rng);
            let h = perturb_seed(&seed, &AugmentConfig::default(), &mut rng);
            assert_eq!(h.pose(), seed.pose());
        }
    }

    #[test]
    fn shape_samples_fill_the_range() {
        let cfg = AugmentConfig::default();
        let seed = MeshParams::default();
        let mut rng = record_rng(3, 0);
        let samples: Vec<MeshParams> = (0..10_000).map(|_| perturb_seed(&seed, &cfg, &mut rng)).collect();
        for d in 0..crate::params::SHAPE_DIM {
            let vals: Vec<f64> = samples.iter().map(|h| h.shape()[d]).collect();
            let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(lo >= -3.0 && hi <= 3.0 && lo < -2.9 && hi > 2.9);
            assert!(mean.abs() < 0.1);
        }
    }

    #[test]
    fn rotations_reach_every_octant() {
        let cfg = AugmentConfig::default();
        let mut rng = record_rng(4, 0);
        let mut hits = [0usize; 8];
        let probe = Vector3::new(1.0, 1.0, 1.0).normalize();
        for _ in 0..1000 {
            let h = perturb_seed(&MeshParams::default(), &cfg, &mut rng);
            let p = crate::rotation::quat_to_matrix(&h.quat()) * probe;
            hits[(p.x > 0.0) as usize | ((p.y > 0.0) as usize) << 1 | ((p.z > 0.0) as usize) << 2] += 1;
        }
        assert!(hits.iter().all(|&n| n >= 1), "{hits:?}");
    }

    #[test]
    fn hook_respects_the_start_epoch() {
        let assets = gen_toy_model(0);
        let cfg = AugmentConfig::default();
        let plane = ImagePlane::default();
        let bg = Backgrounds::default();
        let seeds = vec![initial_params(&assets); 4];
        assert!(augment_epoch_hook(19, &seeds, &cfg, &assets, &bg, &plane).unwrap().is_empty());
        assert_eq!(augment_epoch_hook(20, &seeds, &cfg, &assets, &bg, &plane).unwrap().len(), 12);
        assert!(augment_epoch_hook(20, &[], &cfg, &assets, &bg, &plane).unwrap().is_empty());
    }

    #[test]
    fn placement_covers_the_requested_fraction() {
        let assets = gen_toy_model(0);
        let plane = ImagePlane::default();
        let cfg = AugmentConfig::default();
        for i in 0..20 {
            let mut rng = record_rng(5, i);
            let h = dataset_seed(&assets, &mut rng);
            let r = sample_record(&h, &cfg, &assets, &Backgrounds::default(), &plane, &mut rng).unwrap();
            let fg = r.mask.threshold(0.5);
            let rows: Vec<usize> = (0..plane.height).filter(|y| (0..plane.width).any(|x| fg[y * plane.width + x])).collect();
            let cols: Vec<usize> = (0..plane.width).filter(|x| (0..plane.height).any(|y| fg[y * plane.width + x])).collect();
            let side = (rows.len().max(cols.len())) as f64 / 224.0;
            assert!((0.12..=0.95).contains(&side), "record {i}: {side}");
            assert!(rows.len() < 224 && cols.len() < 224, "record {i} touches the whole frame");
        }
    }

    #[test]
    fn records_are_deterministic() {
        let assets = gen_toy_model(0);
        let plane = ImagePlane::default();
        let a = generate_dataset(&assets, &AugmentConfig::default(), 3, 9, &plane).unwrap();
        let b = generate_dataset(&assets, &AugmentConfig::default(), 3, 9, &plane).unwrap();
        assert_eq!(a, b);
    }
}
