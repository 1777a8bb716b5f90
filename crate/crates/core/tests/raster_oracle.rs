use handmesh::camera::ImagePlane;
use handmesh::image::SoftMask;
use handmesh::metrics::compute_seg_metrics;
use handmesh::raster::{rasterize_hard, rasterize_soft};
use handmesh::synth::{generate_dataset, AugmentConfig};
use handmesh::{gen_toy_model, synthesize_mesh, HandMesh};
use nalgebra::Vector2;

/// Every pixel center tested against every projected face.

fn brute_force(mesh: &HandMesh, plane: &ImagePlane) -> SoftMask {
    let uv: Vec<Vector2<f64>> = mesh.vertices.iter().map(|p| plane.project_point(p)).collect();
    let edge = |a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let mut m = SoftMask::zeros(plane.width, plane.height);
    for y in 0..plane.height {
        for x in 0..plane.width {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let hit = mesh.faces().iter().any(|f| {
                let [a, b, c] = f.map(|i| uv[i as usize]);
                if edge(a, b, c) == 0.0 {
                    return false;
                }
                let w = [edge(b, c, p), edge(c, a, p), edge(a, b, p)];
                w.iter().all(|&e| e >= 0.0) || w.iter().all(|&e| e <= 0.0)
            });
            if hit {
                m.data[y * plane.width + x] = 1.0;
            }
        }
    }
    m
}

#[test]
fn hard_rasterizer_matches_brute_force_and_sharp_soft_masks_agree() {
    let assets = gen_toy_model(2);
    let plane = ImagePlane::default();
    let records = generate_dataset(&assets, &AugmentConfig::default(), 20, 21, &plane).unwrap();
    for (k, r) in records.iter().enumerate() {
        let mesh = synthesize_mesh(&r.gt.params, &assets).unwrap();
        let hard = rasterize_hard(&mesh, &plane).unwrap();
        assert!(hard.count_foreground() > 0, "pose {k} is out of view");
        assert_eq!(hard.to_pgm(), brute_force(&mesh, &plane).to_pgm(), "pose {k}");
        // Near the silhouette several faces lie within a fraction of a pixel
        // and their complements compound, so the 0.5 level sits slightly
        // outside the hard boundary; it converges as sigma shrinks.
        let soft = rasterize_soft(&mesh, &plane, 0.01).unwrap();
        let iou = compute_seg_metrics(&soft, &hard).unwrap().iou;
        assert!(iou >= 0.99, "pose {k}: IoU {iou}");
    }
}
