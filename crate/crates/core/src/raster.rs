//! Silhouette and shaded rasterization of projected triangle meshes.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. All
//! rasterizers ignore face orientation.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{check_depths, ImagePlane};
use crate::error::{Error, Result};
use crate::image::{RgbImage, SoftMask};
use crate::model::HandMesh;

/// Default softness for losses, in pixels.
pub const DEFAULT_SIGMA: f64 = 1.0;
/// Logistic tails beyond `cutoff * sigma` pixels from a face boundary are
/// truncated; the truncation error per face is below `sigmoid(-cutoff)`.
pub const DEFAULT_CUTOFF: f64 = 14.0;

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[inline]
fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Inclusive point-in-triangle test for either winding.
#[inline]
fn inside(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, area: f64, p: &Vector2<f64>) -> bool {
    let (w0, w1, w2) = (edge(b, c, p), edge(c, a, p), edge(a, b, p));
    if area > 0.0 {
        w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
    } else {
        w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
    }
}

/// Inclusive pixel index range whose centers may lie in `[lo, hi]`, padded by
/// `pad` pixels and clipped to `[0, n)`.
fn pixel_range(lo: f64, hi: f64, pad: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - pad - 0.5).ceil().max(0.0);
    let last = (hi + pad - 0.5).floor().min(n as f64 - 1.0);
    (first <= last).then(|| (first as usize, last as usize))
}

struct Tri {
    p: [Vector2<f64>; 3],
    area: f64,
}

impl Tri {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        let xs = self.p.map(|q| q.x);
        let ys = self.p.map(|q| q.y);
        (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

fn project_faces(v: &HandMesh, plane: &ImagePlane) -> Result<(Vec<Vector2<f64>>, Vec<Tri>)> {
    check_depths(&v.vertices)?;
    let uv: Vec<Vector2<f64>> = v.vertices.iter().map(|p| plane.project_point(p)).collect();
    let tris = v
        .faces()
        .iter()
        .map(|f| {
            let p = f.map(|i| uv[i as usize]);
            Tri {
                area: edge(&p[0], &p[1], &p[2]),
                p,
            }
        })
        .collect();
    Ok((uv, tris))
}

/// Binary silhouette: a pixel is set iff its center lies in at least one
/// non-degenerate projected face (edges inclusive).
pub fn rasterize_hard(v: &HandMesh, plane: &ImagePlane) -> Result<SoftMask> {
    let (_, tris) = project_faces(v, plane)?;
    let mut mask = SoftMask::zeros(plane.width, plane.height);
    for t in &tris {
        if t.area == 0.0 {
            continue;
        }
        let (x0, x1, y0, y1) = t.bbox();
        // one pixel of padding keeps the bbox cull strictly conservative
        let (Some((xa, xb)), Some((ya, yb))) = (
            pixel_range(x0, x1, 1.0, plane.width),
            pixel_range(y0, y1, 1.0, plane.height),
        ) else {
            continue;
        };
        for y in ya..=yb {
            for x in xa..=xb {
                let idx = y * plane.width + x;
                if mask.data[idx] == 0.0 && inside(&t.p[0], &t.p[1], &t.p[2], t.area, &pixel_center(x, y)) {
                    mask.data[idx] = 1.0;
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftRasterConfig {
    /// Pixels.
    pub sigma: f64,
    /// Signed distances beyond `cutoff * sigma` are ignored.
    pub cutoff: f64,
}

impl Default for SoftRasterConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

impl SoftRasterConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }
}

/// Per-face data for the soft kernel.
struct SoftFace {
    p: [Vector2<f64>; 3],
    /// Edge directions `p[k+1] - p[k]` and their inverse squared lengths.
    e: [Vector2<f64>; 3],
    inv_len2: [f64; 3],
    /// Sign that makes edge functions non-negative inside.
    orient: f64,
    bbox: (f64, f64, f64, f64),
}

impl SoftFace {
    fn new(t: &Tri) -> Self {
        let e = [t.p[1] - t.p[0], t.p[2] - t.p[1], t.p[0] - t.p[2]];
        let inv_len2 = e.map(|d| {
            let l = d.norm_squared();
            if l > 0.0 {
                1.0 / l
            } else {
                0.0
            }
        });
        Self {
            p: t.p,
            e,
            inv_len2,
            orient: if t.area > 0.0 {
                1.0
            } else if t.area < 0.0 {
                -1.0
            } else {
                0.0
            },
            bbox: t.bbox(),
        }
    }
}

/// A pixel visited by the soft kernel.
struct Sample {
    idx: usize,
    /// Signed distance to the boundary, positive inside.
    d: f64,
    /// Nearest edge, the closest point's parameter along it and `p - q`.
    edge: usize,
    t: f64,
    diff: Vector2<f64>,
}

/// Visits every pixel whose center lies within `reach` of the face
/// (inside pixels included).
fn for_each_soft_pixel(f: &SoftFace, reach: f64, plane: &ImagePlane, mut visit: impl FnMut(Sample)) {
    let (x0, x1, y0, y1) = f.bbox;
    let Some((ya, yb)) = pixel_range(y0, y1, reach, plane.height) else {
        return;
    };
    let reach2 = reach * reach;
    for y in ya..=yb {
        let py = y as f64 + 0.5;
        let gap = if py < y0 {
            y0 - py
        } else if py > y1 {
            py - y1
        } else {
            0.0
        };
        let half = (reach2 - gap * gap).max(0.0).sqrt();
        let Some((xa, xb)) = pixel_range(x0, x1, half, plane.width) else {
            continue;
        };
        // per-edge quantities affine in the pixel x coordinate
        let mut t0 = [0.0; 3];
        let mut t1 = [0.0; 3];
        let mut w0 = [0.0; 3];
        let mut w1 = [0.0; 3];
        for k in 0..3 {
            let a = f.p[k];
            let e = f.e[k];
            t0[k] = (-a.x * e.x + (py - a.y) * e.y) * f.inv_len2[k];
            t1[k] = e.x * f.inv_len2[k];
            w0[k] = f.orient * (e.x * (py - a.y) + e.y * a.x);
            w1[k] = -f.orient * e.y;
        }
        let row = y * plane.width;
        for x in xa..=xb {
            let px = x as f64 + 0.5;
            let mut best = f64::INFINITY;
            let mut edge = 0;
            let mut best_t = 0.0;
            let mut best_diff = Vector2::zeros();
            for k in 0..3 {
                let t = (t0[k] + t1[k] * px).clamp(0.0, 1.0);
                let dx = px - f.p[k].x - t * f.e[k].x;
                let dy = py - f.p[k].y - t * f.e[k].y;
                let d2 = dx * dx + dy * dy;
                if d2 < best {
                    best = d2;
                    edge = k;
                    best_t = t;
                    best_diff = Vector2::new(dx, dy);
                }
            }
            let is_in = f.orient != 0.0 && (0..3).all(|k| w0[k] + w1[k] * px >= 0.0);
            if !is_in && best > reach2 {
                continue;
            }
            let dist = best.sqrt();
            visit(Sample {
                idx: row + x,
                d: if is_in { dist } else { -dist },
                edge,
                t: best_t,
                diff: best_diff,
            });
        }
    }
}

/// Soft silhouette with everything needed for the backward pass.
pub struct SoftRender {
    pub mask: SoftMask,
    cfg: SoftRasterConfig,
    plane: ImagePlane,
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    soft: Vec<SoftFace>,
    /// Product of non-zero complement factors per pixel.
    product: Vec<f64>,
    /// Number of complement factors equal to zero per pixel.
    zeros: Vec<u32>,
}

/// Truncated logistic: `(sigmoid(-d/σ) - ε) / (1 - 2ε)` with
/// `ε = sigmoid(-cutoff)`, clamped to `[0, 1]`. Continuous at `|d| = cutoff σ`
/// and exactly `1/2` on the boundary.
struct Complement {
    inv_sigma: f64,
    eps: f64,
    inv_norm: f64,
}

impl Complement {
    fn new(cfg: &SoftRasterConfig) -> Self {
        let eps = 1.0 / (1.0 + cfg.cutoff.exp());
        Self {
            inv_sigma: 1.0 / cfg.sigma,
            eps,
            inv_norm: 1.0 / (1.0 - 2.0 * eps),
        }
    }

    /// The complement factor and its derivative with respect to `d`.
    #[inline]
    fn eval(&self, d: f64) -> (f64, f64) {
        let sig = 1.0 / (1.0 + (d * self.inv_sigma).exp());
        let c = (sig - self.eps) * self.inv_norm;
        if c <= 0.0 {
            (0.0, 0.0)
        } else if c >= 1.0 {
            (1.0, 0.0)
        } else {
            (c, -sig * (1.0 - sig) * self.inv_sigma * self.inv_norm)
        }
    }
}

/// `o = 1 - Π_f (1 - s_f)` per pixel, with `s_f` the truncated logistic of
/// the signed boundary distance of face `f`.
pub fn soft_render(v: &HandMesh, plane: &ImagePlane, cfg: &SoftRasterConfig) -> Result<SoftRender> {
    if !(cfg.sigma > 0.0) || !(cfg.cutoff > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma and cutoff must be positive, got {} and {}",
            cfg.sigma, cfg.cutoff
        )));
    }
    let (_, tris) = project_faces(v, plane)?;
    let soft: Vec<SoftFace> = tris.iter().map(SoftFace::new).collect();
    let n = plane.width * plane.height;
    let mut product = vec![1.0; n];
    let mut zeros = vec![0u32; n];
    let comp = Complement::new(cfg);
    let reach = cfg.cutoff * cfg.sigma;
    for f in &soft {
        for_each_soft_pixel(f, reach, plane, |s| {
            let (c, _) = comp.eval(s.d);
            if c == 0.0 {
                zeros[s.idx] += 1;
            } else {
                product[s.idx] *= c;
            }
        });
    }
    let data = product
        .iter()
        .zip(&zeros)
        .map(|(&p, &z)| if z > 0 { 1.0 } else { 1.0 - p })
        .collect();
    Ok(SoftRender {
        mask: SoftMask {
            width: plane.width,
            height: plane.height,
            data,
            sigma: cfg.sigma,
        },
        cfg: *cfg,
        plane: *plane,
        vertices: v.vertices.clone(),
        faces: v.faces().to_vec(),
        soft,
        product,
        zeros,
    })
}

/// Soft silhouette with the default cutoff.
pub fn rasterize_soft(v: &HandMesh, plane: &ImagePlane, sigma: f64) -> Result<SoftMask> {
    Ok(soft_render(v, plane, &SoftRasterConfig::with_sigma(sigma))?.mask)
}

impl SoftRender {
    /// Pulls a per-pixel occupancy gradient back to the camera-frame
    /// vertices.
    pub fn backward(&self, grad: &[f64]) -> Vec<Vector3<f64>> {
        assert_eq!(grad.len(), self.product.len());
        // dL/d(comp_f) = -g Π_{h != f} comp_h, only where nothing saturates
        let weight: Vec<f64> = grad
            .iter()
            .zip(&self.product)
            .zip(&self.zeros)
            .map(|((g, p), z)| if *z > 0 { 0.0 } else { -g * p })
            .collect();
        let mut g2 = vec![Vector2::zeros(); self.vertices.len()];
        let comp = Complement::new(&self.cfg);
        let reach = self.cfg.cutoff * self.cfg.sigma;
        for (f, face) in self.soft.iter().zip(&self.faces) {
            let mut gface = [Vector2::<f64>::zeros(); 3];
            for_each_soft_pixel(f, reach, &self.plane, |s| {
                let w = weight[s.idx];
                if w == 0.0 {
                    return;
                }
                let (c, dc) = comp.eval(s.d);
                if dc == 0.0 {
                    return;
                }
                let dist = s.d.abs();
                if dist == 0.0 {
                    return;
                }
                let gd = w / c * dc;
                let sign = if s.d > 0.0 { 1.0 } else { -1.0 };
                // d|p - q| / dq = -(p - q) / |p - q|
                let n = s.diff / dist;
                gface[s.edge] -= n * (gd * sign * (1.0 - s.t));
                gface[(s.edge + 1) % 3] -= n * (gd * sign * s.t);
            });
            for (c, g) in face.iter().zip(&gface) {
                g2[*c as usize] += g;
            }
        }
        self.vertices
            .iter()
            .zip(&g2)
            .map(|(p, g)| self.plane.project_vjp(p, g))
            .collect()
    }
}

/// Flat Lambertian rendering over `background` with a z-buffer:
/// `max(0, n·l) albedo + 0.3 albedo`, clamped to `[0, 1]`.
pub fn render_shaded(
    v: &HandMesh,
    plane: &ImagePlane,
    albedo: [f64; 3],
    light_dir: &Vector3<f64>,
    background: &RgbImage,
) -> Result<RgbImage> {
    if background.width != plane.width || background.height != plane.height {
        return Err(Error::Dimension {
            what: "background image".into(),
            expected: plane.width * plane.height,
            found: background.width * background.height,
        });
    }
    if ((light_dir.norm() - 1.0).abs()) > 1e-6 {
        return Err(Error::InvalidArgument("light direction must be a unit vector".into()));
    }
    let (_, tris) = project_faces(v, plane)?;
    let mut out = background.clone();
    let mut inv_depth = vec![f64::NEG_INFINITY; plane.width * plane.height];
    for (t, f) in tris.iter().zip(v.faces()) {
        if t.area == 0.0 {
            continue;
        }
        let [p0, p1, p2] = f.map(|i| v.vertices[i as usize]);
        let normal = (p1 - p0).cross(&(p2 - p0)).normalize();
        let lambert = normal.dot(light_dir).max(0.0);
        let color = albedo.map(|a| (lambert * a + 0.3 * a).clamp(0.0, 1.0));
        let iz = [1.0 / p0.z, 1.0 / p1.z, 1.0 / p2.z];
        let (x0, x1, y0, y1) = t.bbox();
        let (Some((xa, xb)), Some((ya, yb))) = (
            pixel_range(x0, x1, 1.0, plane.width),
            pixel_range(y0, y1, 1.0, plane.height),
        ) else {
            continue;
        };
        for y in ya..=yb {
            for x in xa..=xb {
                let p = pixel_center(x, y);
                if !inside(&t.p[0], &t.p[1], &t.p[2], t.area, &p) {
                    continue;
                }
                let b0 = edge(&t.p[1], &t.p[2], &p) / t.area;
                let b1 = edge(&t.p[2], &t.p[0], &p) / t.area;
                let b2 = 1.0 - b0 - b1;
                let z = b0 * iz[0] + b1 * iz[1] + b2 * iz[2];
                let idx = y * plane.width + x;
                if z > inv_depth[idx] {
                    inv_depth[idx] = z;
                    out.data[idx] = color;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn single(tri: [Vector3<f64>; 3]) -> HandMesh {
        HandMesh::new(tri.to_vec(), Arc::from(vec![[0u32, 1, 2]]))
    }

    #[test]
    fn covering_triangle_fills_plane() {
        let plane = ImagePlane::default();
        let m = single([
            Vector3::new(-10.0, -10.0, 1.0),
            Vector3::new(30.0, -10.0, 1.0),
            Vector3::new(-10.0, 30.0, 1.0),
        ]);
        let hard = rasterize_hard(&m, &plane).unwrap();
        assert!(hard.data.iter().all(|&o| o == 1.0));
        let soft = rasterize_soft(&m, &plane, 0.1).unwrap();
        assert!(soft.data.iter().all(|&o| o == 1.0));
    }

    #[test]
    fn pixel_on_edge_is_half_covered() {
        let plane = ImagePlane {
            width: 8,
            height: 8,
            focal: 1.0,
        };
        // vertical edge through pixel centers x = 3.5 (camera x = -0.5)
        let m = single([
            Vector3::new(-0.5, -20.0, 1.0),
            Vector3::new(-0.5, 20.0, 1.0),
            Vector3::new(-30.0, 0.0, 1.0),
        ]);
        let soft = rasterize_soft(&m, &plane, 1.0).unwrap();
        assert!((soft.get(3, 4) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn out_of_frame_is_empty_and_background() {
        let plane = ImagePlane::default();
        let m = single([
            Vector3::new(5.0, 5.0, 1.0),
            Vector3::new(6.0, 5.0, 1.0),
            Vector3::new(5.0, 6.0, 1.0),
        ]);
        assert_eq!(rasterize_hard(&m, &plane).unwrap().count_foreground(), 0);
        let bg = RgbImage::filled(224, 224, [0.5, 0.5, 0.5]);
        let out = render_shaded(&m, &plane, [0.8, 0.6, 0.5], &Vector3::new(0.0, 0.0, -1.0), &bg).unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn lit_face_is_clamped_ambient_plus_diffuse() {
        let plane = ImagePlane::default();
        // winding chosen so the normal is (0, 0, -1)
        let m = single([
            Vector3::new(-1.0, -1.0, 2.0),
            Vector3::new(-1.0, 1.0, 2.0),
            Vector3::new(1.0, -1.0, 2.0),
        ]);
        let bg = RgbImage::filled(224, 224, [0.0, 0.0, 0.0]);
        let albedo = [0.5, 0.7, 0.9];
        let out = render_shaded(&m, &plane, albedo, &Vector3::new(0.0, 0.0, -1.0), &bg).unwrap();
        let got = out.get(100, 100);
        for (g, e) in got.iter().zip([0.65, 0.91, 1.0]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let plane = ImagePlane::default();
        let m = single([
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 1.0),
        ]);
        assert!(matches!(rasterize_hard(&m, &plane), Err(Error::BehindCamera { .. })));
        assert!(matches!(rasterize_soft(&m, &plane, 1.0), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn backward_matches_finite_differences_on_one_triangle() {
        let plane = ImagePlane {
            width: 32,
            height: 32,
            focal: 40.0,
        };
        let base = [
            Vector3::new(-0.2, -0.25, 2.0),
            Vector3::new(0.3, -0.1, 2.1),
            Vector3::new(0.0, 0.35, 1.9),
        ];
        let cfg = SoftRasterConfig::with_sigma(1.0);
        let weights: Vec<f64> = (0..32 * 32).map(|i| ((i * 37 % 101) as f64) / 101.0 - 0.3).collect();
        let objective = |vs: [Vector3<f64>; 3]| -> f64 {
            let r = soft_render(&single(vs), &plane, &cfg).unwrap();
            r.mask.data.iter().zip(&weights).map(|(o, w)| o * w).sum()
        };
        let r = soft_render(&single(base), &plane, &cfg).unwrap();
        let g = r.backward(&weights);
        for vi in 0..3 {
            for a in 0..3 {
                let eps = 1e-6;
                let mut p = base;
                p[vi][a] += eps;
                let mut m = base;
                m[vi][a] -= eps;
                let fd = (objective(p) - objective(m)) / (2.0 * eps);
                assert!((fd - g[vi][a]).abs() <= 1e-4 * fd.abs().max(1.0), "v{vi} axis {a}: {fd} vs {}", g[vi][a]);
            }
        }
    }
}
