//! Mesh synthesis by linear blend skinning, with forward- and reverse-mode
//! derivatives with respect to the 63 mesh parameters.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::assets::{HandModelAssets, NUM_JOINTS, NUM_VERTICES};
use crate::error::{Error, Result};
use crate::params::{MeshParams, NUM_BONES, PARAM_DIM, POSE, QUAT, SCALE, SHAPE, SHAPE_DIM, TRANSLATION};
use crate::rotation::{quat_to_matrix_with_jacobian, rodrigues_with_jacobian};
use crate::skeleton::{regress_points, Skeleton3D};

/// Vertices sharing the asset topology.
#[derive(Debug, Clone)]
pub struct HandMesh {
    pub vertices: Vec<Vector3<f64>>,
    faces: Arc<[[u32; 3]]>,
}

impl HandMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Arc<[[u32; 3]]>) -> Self {
        Self { vertices, faces }
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn shared_faces(&self) -> Arc<[[u32; 3]]> {
        self.faces.clone()
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Forward pass of mesh synthesis with every intermediate needed for
/// derivatives.
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Final camera-frame mesh `v = c_s R(q) u + c_t`.
    pub mesh: HandMesh,
    /// Articulated mesh before the global similarity transform.
    pub posed: Vec<Vector3<f64>>,
    /// Shape-blended rest mesh.
    pub rest: HandMesh,
    rest_joints: [Vector3<f64>; NUM_BONES],
    local: [Matrix3<f64>; NUM_BONES],
    local_jac: [[Matrix3<f64>; 3]; NUM_BONES],
    /// Global bone rotations.
    global_r: [Matrix3<f64>; NUM_BONES],
    cam_r: Matrix3<f64>,
    cam_r_jac: [Matrix3<f64>; 4],
    scale: f64,
}

/// `v = c_s · R(c_q) · LBS(template + Σ s_i B_i, p) + c_t`.
pub fn synthesize_mesh(h: &MeshParams, assets: &HandModelAssets) -> Result<HandMesh> {
    Ok(synthesize(h, assets)?.mesh)
}

/// Full forward pass, keeping intermediates for [`Synthesis::jvp`] and
/// [`Synthesis::vjp`].
pub fn synthesize(h: &MeshParams, assets: &HandModelAssets) -> Result<Synthesis> {
    h.check_finite()?;
    if h.scale() <= 0.0 {
        return Err(Error::InvalidArgument(format!("global scale must be positive, got {}", h.scale())));
    }
    let q = h.quat();
    if q.iter().map(|x| x * x).sum::<f64>() == 0.0 {
        return Err(Error::InvalidArgument("zero quaternion".into()));
    }
    let data = assets.data();
    let der = assets.derived();
    let shape = h.shape();

    let mut rest = data.template_vertices.clone();
    for (k, basis) in data.shape_basis.iter().enumerate() {
        let s = shape[k];
        if s != 0.0 {
            for (x, b) in rest.iter_mut().zip(basis) {
                *x += b * s;
            }
        }
    }
    let rest_joints: [Vector3<f64>; NUM_BONES] = std::array::from_fn(|k| {
        der.rest_reg[k].iter().fold(Vector3::zeros(), |acc, &(i, w)| acc + rest[i] * w)
    });

    let pose = h.pose();
    let mut local = [Matrix3::identity(); NUM_BONES];
    let mut local_jac = [[Matrix3::zeros(); 3]; NUM_BONES];
    for k in 1..NUM_BONES {
        let r = Vector3::new(pose[3 * (k - 1)], pose[3 * (k - 1) + 1], pose[3 * (k - 1) + 2]);
        let (m, jac) = rodrigues_with_jacobian(&r);
        local[k] = m;
        local_jac[k] = jac;
    }

    let mut global_r = [Matrix3::identity(); NUM_BONES];
    let mut global_t = [Vector3::zeros(); NUM_BONES];
    let parents = &data.kinematic_parents;
    for &k in &der.order {
        match parents[k] {
            None => {
                global_r[k] = local[k];
                global_t[k] = rest_joints[k];
            }
            Some(p) => {
                global_r[k] = global_r[p] * local[k];
                global_t[k] = global_r[p] * (rest_joints[k] - rest_joints[p]) + global_t[p];
            }
        }
    }
    let offsets: [Vector3<f64>; NUM_BONES] =
        std::array::from_fn(|k| global_t[k] - global_r[k] * rest_joints[k]);

    // u = x + Σ_k w_k ((R_k - I) x + a_k), exact at the rest pose
    let deltas: [Matrix3<f64>; NUM_BONES] = std::array::from_fn(|k| global_r[k] - Matrix3::identity());
    let posed: Vec<Vector3<f64>> = rest
        .iter()
        .zip(&der.skin)
        .map(|(x, skin)| {
            x + skin
                .iter()
                .fold(Vector3::zeros(), |acc, &(k, w)| acc + (deltas[k] * x + offsets[k]) * w)
        })
        .collect();

    let (cam_r, cam_r_jac) = quat_to_matrix_with_jacobian(&q);
    let scale = h.scale();
    let t = Vector3::from(h.translation());
    let sr = cam_r * scale;
    let vertices: Vec<Vector3<f64>> = posed.iter().map(|u| sr * u + t).collect();
    let mesh = HandMesh::new(vertices, assets.shared_faces());
    if !mesh.is_finite() {
        return Err(Error::NonFinite("synthesized vertices".into()));
    }
    Ok(Synthesis {
        mesh,
        posed,
        rest: HandMesh::new(rest, assets.shared_faces()),
        rest_joints,
        local,
        local_jac,
        global_r,
        cam_r,
        cam_r_jac,
        scale,
    })
}

/// Per-bone tangents of the kinematic chain for a parameter direction.
struct ChainTangent {
    dr: [Matrix3<f64>; NUM_BONES],
    doffset: [Vector3<f64>; NUM_BONES],
}

impl Synthesis {
    fn chain_tangent(&self, dh: &[f64; PARAM_DIM], assets: &HandModelAssets) -> ChainTangent {
        let der = assets.derived();
        let parents = &assets.data().kinematic_parents;
        let ds = &dh[SHAPE];
        let djoint: [Vector3<f64>; NUM_BONES] = std::array::from_fn(|k| {
            (0..SHAPE_DIM).fold(Vector3::zeros(), |acc, j| acc + der.shape_joint_basis[j][k] * ds[j])
        });
        let dp = &dh[POSE];
        let mut dr = [Matrix3::zeros(); NUM_BONES];
        let mut dt = [Vector3::zeros(); NUM_BONES];
        for &k in &der.order {
            let dlocal = if k == 0 {
                Matrix3::zeros()
            } else {
                let b = 3 * (k - 1);
                self.local_jac[k][0] * dp[b] + self.local_jac[k][1] * dp[b + 1] + self.local_jac[k][2] * dp[b + 2]
            };
            match parents[k] {
                None => {
                    dr[k] = dlocal;
                    dt[k] = djoint[k];
                }
                Some(p) => {
                    dr[k] = dr[p] * self.local[k] + self.global_r[p] * dlocal;
                    let rel = self.rest_joints[k] - self.rest_joints[p];
                    dt[k] = dr[p] * rel + self.global_r[p] * (djoint[k] - djoint[p]) + dt[p];
                }
            }
        }
        let doffset = std::array::from_fn(|k| {
            dt[k] - dr[k] * self.rest_joints[k] - self.global_r[k] * djoint[k]
        });
        ChainTangent { dr, doffset }
    }

    fn vertex_tangent(
        &self,
        i: usize,
        dh: &[f64; PARAM_DIM],
        chain: &ChainTangent,
        dcam: &Matrix3<f64>,
        assets: &HandModelAssets,
    ) -> Vector3<f64> {
        let data = assets.data();
        let der = assets.derived();
        let x = &self.rest.vertices[i];
        let dx = (0..SHAPE_DIM).fold(Vector3::zeros(), |acc, j| acc + data.shape_basis[j][i] * dh[SHAPE.start + j]);
        let du = der.skin[i].iter().fold(dx, |acc, &(k, w)| {
            acc + (chain.dr[k] * x + (self.global_r[k] - Matrix3::identity()) * dx + chain.doffset[k]) * w
        });
        let u = &self.posed[i];
        let dt = Vector3::new(dh[TRANSLATION.start], dh[TRANSLATION.start + 1], dh[TRANSLATION.start + 2]);
        self.cam_r * u * dh[SCALE] + dcam * u * self.scale + self.cam_r * du * self.scale + dt
    }

    fn camera_tangent(&self, dh: &[f64; PARAM_DIM]) -> Matrix3<f64> {
        (0..4).fold(Matrix3::zeros(), |acc, m| acc + self.cam_r_jac[m] * dh[QUAT.start + m])
    }

    /// Forward-mode derivative of every final vertex along `dh`.
    pub fn jvp(&self, dh: &[f64; PARAM_DIM], assets: &HandModelAssets) -> Vec<Vector3<f64>> {
        let chain = self.chain_tangent(dh, assets);
        let dcam = self.camera_tangent(dh);
        (0..NUM_VERTICES)
            .map(|i| self.vertex_tangent(i, dh, &chain, &dcam, assets))
            .collect()
    }

    /// Forward-mode derivative of selected final vertices along `dh`.
    pub fn jvp_subset(
        &self,
        dh: &[f64; PARAM_DIM],
        vertices: &[usize],
        assets: &HandModelAssets,
    ) -> Vec<Vector3<f64>> {
        let chain = self.chain_tangent(dh, assets);
        let dcam = self.camera_tangent(dh);
        vertices
            .iter()
            .map(|&i| self.vertex_tangent(i, dh, &chain, &dcam, assets))
            .collect()
    }

    /// Skeleton regressed from the final mesh.
    pub fn skeleton(&self, assets: &HandModelAssets) -> Skeleton3D {
        regress_points(&self.mesh.vertices, assets)
    }

    /// `jac[k]` is the derivative of the regressed skeleton with respect to
    /// parameter `k`.
    pub fn skeleton_jacobian(&self, assets: &HandModelAssets) -> Vec<Skeleton3D> {
        let support = &assets.derived().skel_support;
        let mut scratch = vec![Vector3::zeros(); NUM_VERTICES];
        (0..PARAM_DIM)
            .map(|k| {
                let mut dh = [0.0; PARAM_DIM];
                dh[k] = 1.0;
                let dv = self.jvp_subset(&dh, support, assets);
                for (&i, d) in support.iter().zip(&dv) {
                    scratch[i] = *d;
                }
                regress_points(&scratch, assets)
            })
            .collect()
    }

    /// Reverse-mode derivative. `gv`, `gu` and `gx` are gradients with respect
    /// to the final mesh, the posed (pre-camera) mesh and the rest mesh.
    pub fn vjp(
        &self,
        gv: Option<&[Vector3<f64>]>,
        gu: Option<&[Vector3<f64>]>,
        gx: Option<&[Vector3<f64>]>,
        assets: &HandModelAssets,
    ) -> [f64; PARAM_DIM] {
        let data = assets.data();
        let der = assets.derived();
        let mut out = [0.0; PARAM_DIM];

        let mut g_posed: Vec<Vector3<f64>> = match gu {
            Some(g) => g.to_vec(),
            None => vec![Vector3::zeros(); NUM_VERTICES],
        };
        if let Some(gv) = gv {
            let mut gt = Vector3::zeros();
            let mut gscale = 0.0;
            let mut gcam = Matrix3::zeros();
            let rt = self.cam_r.transpose() * self.scale;
            for ((g, u), gp) in gv.iter().zip(&self.posed).zip(g_posed.iter_mut()) {
                gt += g;
                let ru = self.cam_r * u;
                gscale += g.dot(&ru);
                gcam += g * u.transpose();
                *gp += rt * g;
            }
            gcam *= self.scale;
            out[TRANSLATION].copy_from_slice(gt.as_slice());
            out[SCALE] = gscale;
            for m in 0..4 {
                out[QUAT.start + m] = self.cam_r_jac[m].component_mul(&gcam).sum();
            }
        }

        let mut g_rest: Vec<Vector3<f64>> = match gx {
            Some(g) => g.to_vec(),
            None => vec![Vector3::zeros(); NUM_VERTICES],
        };
        let mut g_r = [Matrix3::zeros(); NUM_BONES];
        let mut g_off = [Vector3::zeros(); NUM_BONES];
        for (i, gp) in g_posed.iter().enumerate() {
            if gp.iter().all(|&c| c == 0.0) {
                continue;
            }
            let x = &self.rest.vertices[i];
            let xt = x.transpose();
            g_rest[i] += gp;
            for &(k, w) in &der.skin[i] {
                let wg = gp * w;
                g_r[k] += wg * xt;
                g_off[k] += wg;
                g_rest[i] += (self.global_r[k].transpose() - Matrix3::identity()) * wg;
            }
        }

        // offset_k = t_k - R_k J_k
        let mut g_t = g_off;
        let mut g_joint = [Vector3::zeros(); NUM_BONES];
        for k in 0..NUM_BONES {
            g_r[k] -= g_off[k] * self.rest_joints[k].transpose();
            g_joint[k] -= self.global_r[k].transpose() * g_off[k];
        }

        let parents = &data.kinematic_parents;
        let mut g_local = [Matrix3::zeros(); NUM_BONES];
        for &k in der.order.iter().rev() {
            match parents[k] {
                None => {
                    g_local[k] = g_r[k];
                    g_joint[k] += g_t[k];
                }
                Some(p) => {
                    let rp = self.global_r[p];
                    let rel = self.rest_joints[k] - self.rest_joints[p];
                    let add_r = g_r[k] * self.local[k].transpose() + g_t[k] * rel.transpose();
                    g_r[p] += add_r;
                    g_local[k] = rp.transpose() * g_r[k];
                    let back = rp.transpose() * g_t[k];
                    g_joint[k] += back;
                    g_joint[p] -= back;
                    let gtk = g_t[k];
                    g_t[p] += gtk;
                }
            }
        }
        for k in 1..NUM_BONES {
            for m in 0..3 {
                out[POSE.start + 3 * (k - 1) + m] = self.local_jac[k][m].component_mul(&g_local[k]).sum();
            }
        }

        for (k, entries) in der.rest_reg.iter().enumerate() {
            for &(i, w) in entries {
                g_rest[i] += g_joint[k] * w;
            }
        }
        for (j, basis) in data.shape_basis.iter().enumerate() {
            out[SHAPE.start + j] = basis.iter().zip(&g_rest).map(|(b, g)| b.dot(g)).sum();
        }
        out
    }
}

/// Number of skeleton coordinates.
pub const SKELETON_DIM: usize = 3 * NUM_JOINTS;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::gen_toy_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> MeshParams {
        let mut h = MeshParams::default();
        for p in h.pose_mut() {
            *p = rng.random_range(-0.6..0.6);
        }
        for s in h.shape_mut() {
            *s = rng.random_range(-2.0..2.0);
        }
        h.set_quat([
            rng.random_range(0.5..1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ]);
        h.set_scale(rng.random_range(0.8..1.2));
        h.set_translation([rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 2.5]);
        h
    }

    #[test]
    fn zero_pose_identity_camera_reproduces_template() {
        let assets = gen_toy_model(0);
        let v = synthesize_mesh(&MeshParams::default(), &assets).unwrap();
        assert_eq!(v.vertices, assets.template());
    }

    #[test]
    fn jvp_matches_central_differences() {
        let assets = gen_toy_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_params(&mut rng);
        let syn = synthesize(&h, &assets).unwrap();
        for k in 0..PARAM_DIM {
            let mut dh = [0.0; PARAM_DIM];
            dh[k] = 1.0;
            let analytic = syn.jvp(&dh, &assets);
            let step = 1e-5;
            let mut hp = h;
            hp.0[k] += step;
            let mut hm = h;
            hm.0[k] -= step;
            let vp = synthesize_mesh(&hp, &assets).unwrap();
            let vm = synthesize_mesh(&hm, &assets).unwrap();
            for i in (0..NUM_VERTICES).step_by(7) {
                let fd = (vp.vertices[i] - vm.vertices[i]) / (2.0 * step);
                for a in 0..3 {
                    let err = (fd[a] - analytic[i][a]).abs() / analytic[i][a].abs().max(1.0);
                    assert!(err < 1e-6, "param {k} vertex {i} axis {a}: {} vs {}", fd[a], analytic[i][a]);
                }
            }
        }
    }

    #[test]
    fn vjp_is_adjoint_of_jvp() {
        let assets = gen_toy_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_params(&mut rng);
        let syn = synthesize(&h, &assets).unwrap();
        let gv: Vec<Vector3<f64>> = (0..NUM_VERTICES)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let grad = syn.vjp(Some(&gv), None, None, &assets);
        for k in 0..PARAM_DIM {
            let mut dh = [0.0; PARAM_DIM];
            dh[k] = 1.0;
            let dv = syn.jvp(&dh, &assets);
            let dot: f64 = dv.iter().zip(&gv).map(|(a, b)| a.dot(b)).sum();
            assert!((dot - grad[k]).abs() <= 1e-9 * dot.abs().max(1.0), "param {k}: {dot} vs {}", grad[k]);
        }
    }

    #[test]
    fn posed_and_rest_gradients_are_adjoint() {
        let assets = gen_toy_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_params(&mut rng);
        let syn = synthesize(&h, &assets).unwrap();
        let gu: Vec<Vector3<f64>> = (0..NUM_VERTICES)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), 0.3, rng.random_range(-1.0..1.0)))
            .collect();
        let gx: Vec<Vector3<f64>> = (0..NUM_VERTICES)
            .map(|_| Vector3::new(0.1, rng.random_range(-1.0..1.0), -0.2))
            .collect();
        let grad = syn.vjp(None, Some(&gu), Some(&gx), &assets);
        let step = 1e-6;
        for k in 0..PARAM_DIM {
            let mut hp = h;
            hp.0[k] += step;
            let mut hm = h;
            hm.0[k] -= step;
            let sp = synthesize(&hp, &assets).unwrap();
            let sm = synthesize(&hm, &assets).unwrap();
            let f = |s: &Synthesis| -> f64 {
                s.posed.iter().zip(&gu).map(|(a, b)| a.dot(b)).sum::<f64>()
                    + s.rest.vertices.iter().zip(&gx).map(|(a, b)| a.dot(b)).sum::<f64>()
            };
            let fd = (f(&sp) - f(&sm)) / (2.0 * step);
            assert!((fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1.0), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn skeleton_jacobian_matches_full_jvp() {
        let assets = gen_toy_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_params(&mut rng);
        let syn = synthesize(&h, &assets).unwrap();
        let jac = syn.skeleton_jacobian(&assets);
        for k in [0, 17, 44, 45, 54, 56, 59, 62] {
            let mut dh = [0.0; PARAM_DIM];
            dh[k] = 1.0;
            let full = regress_points(&syn.jvp(&dh, &assets), &assets);
            for j in 0..NUM_JOINTS {
                assert!((full.0[j] - jac[k].0[j]).norm() < 1e-12);
            }
        }
    }
}
