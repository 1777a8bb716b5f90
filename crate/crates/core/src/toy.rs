//! Procedural, license-free stand-in for a parametric hand model.
//!
//! The toy hand is a single open surface (the wrist is the only boundary, a
//! 16-edge loop) made of a palm tube, four finger chains branching off a
//! 32-vertex knuckle ring and a thumb chain grafted into the side of the palm.
//! That topology gives exactly 778 vertices and 1538 triangles.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assets::{AssetData, HandModelAssets, NUM_FACES, NUM_JOINTS, NUM_VERTICES};
use crate::params::{NUM_BONES, POSE_DIM, SHAPE_DIM};
use crate::skeleton::Skeleton3D;

const PALM_RING: usize = 16;
const PALM_RINGS: usize = 12;
const KNUCKLE_RING: usize = 32;
const CHAIN_RING: usize = 8;
const FINGER_RINGS: usize = 14;
const THUMB_RINGS: usize = 12;
/// Palm ring below the thumb opening.
const THUMB_SLOT_RING: usize = 2;

const KNUCKLE_BASE: usize = PALM_RING * PALM_RINGS;
const FINGER_BASE: usize = KNUCKLE_BASE + KNUCKLE_RING;
const FINGER_STRIDE: usize = CHAIN_RING * FINGER_RINGS + 2;
const THUMB_BASE: usize = FINGER_BASE + 4 * FINGER_STRIDE;

/// Fractions of palm length at which the palm rings sit (wrist first).
const PALM_LEVELS: [f64; PALM_RINGS] = [
    0.0, 0.08, 0.16, 0.36, 0.43, 0.50, 0.57, 0.64, 0.71, 0.78, 0.85, 0.92,
];
/// Cross-section angles (degrees) of chain rings; the first four face the
/// palmar side.
const CHAIN_ANGLES: [f64; CHAIN_RING] = [150.0, 110.0, 70.0, 30.0, -30.0, -70.0, -110.0, -150.0];
/// Ring indices of the two inner joints of a finger / thumb chain.
const FINGER_JOINT_RINGS: [usize; 2] = [6, 10];
const THUMB_JOINT_RINGS: [usize; 2] = [4, 8];

/// Continuous anatomy description; the template and the shape basis are both
/// evaluated from it.
#[derive(Debug, Clone)]
struct Anatomy {
    palm_half_width: f64,
    palm_half_thickness: f64,
    palm_length: f64,
    finger_length: [f64; 4],
    finger_radius: [f64; 4],
    splay: f64,
    taper: f64,
    thumb_length: f64,
    thumb_radius: f64,
}

impl Anatomy {
    fn base() -> Self {
        Self {
            palm_half_width: 0.18,
            palm_half_thickness: 0.05,
            palm_length: 0.45,
            finger_length: [0.38, 0.42, 0.39, 0.31],
            finger_radius: [0.042, 0.044, 0.041, 0.036],
            splay: 0.15,
            taper: 0.2,
            thumb_length: 0.36,
            thumb_radius: 0.048,
        }
    }

    /// One standard deviation along shape mode `k`, scaled by `amount`.
    fn displaced(&self, k: usize, amount: f64) -> Self {
        let mut a = self.clone();
        match k {
            0 => a.finger_length = a.finger_length.map(|l| l * (1.0 + 0.06 * amount)),
            1 => a.palm_half_width *= 1.0 + 0.06 * amount,
            2 => a.finger_radius = a.finger_radius.map(|r| r * (1.0 + 0.08 * amount)),
            3 => a.palm_length *= 1.0 + 0.06 * amount,
            4 => a.thumb_length *= 1.0 + 0.08 * amount,
            5 => {
                let g = [1.0, 0.5, -0.5, -1.0];
                for (l, gi) in a.finger_length.iter_mut().zip(g) {
                    *l *= 1.0 + 0.05 * amount * gi;
                }
            }
            6 => a.palm_half_thickness *= 1.0 + 0.1 * amount,
            7 => a.splay += 0.05 * amount,
            8 => a.thumb_radius *= 1.0 + 0.1 * amount,
            9 => a.taper += 0.05 * amount,
            _ => unreachable!("shape mode {k}"),
        }
        a
    }

    fn palm_width_at(&self, frac: f64) -> f64 {
        self.palm_half_width * (0.82 + 0.18 * frac)
    }

    fn palm_thickness_at(&self, frac: f64) -> f64 {
        self.palm_half_thickness * (0.9 + 0.1 * frac)
    }

    fn finger_center_x(&self, f: usize) -> f64 {
        self.palm_half_width * (-0.75 + 0.5 * f as f64)
    }
}

fn palm_idx(r: usize, k: usize) -> usize {
    r * PALM_RING + (k % PALM_RING)
}

fn knuckle_idx(k: usize) -> usize {
    KNUCKLE_BASE + k
}

fn finger_idx(f: usize, r: usize, k: usize) -> usize {
    FINGER_BASE + f * FINGER_STRIDE + (r - 1) * CHAIN_RING + k
}

fn thumb_idx(r: usize, k: usize) -> usize {
    THUMB_BASE + (r - 1) * CHAIN_RING + k
}

/// Vertices of the ring where finger `f` leaves the knuckle ring.
fn finger_base_ring(f: usize) -> [usize; CHAIN_RING] {
    let front = 4 * f;
    let back = 28 - 4 * f;
    [
        knuckle_idx(front),
        knuckle_idx(front + 1),
        knuckle_idx(front + 2),
        knuckle_idx(front + 3),
        knuckle_idx(back),
        knuckle_idx(back + 1),
        knuckle_idx(back + 2),
        knuckle_idx(back + 3),
    ]
}

/// The opening in the palm side the thumb grows out of.
fn thumb_base_ring() -> [usize; CHAIN_RING] {
    let (lo, hi) = (THUMB_SLOT_RING, THUMB_SLOT_RING + 1);
    [
        palm_idx(lo, 13),
        palm_idx(lo, 14),
        palm_idx(lo, 15),
        palm_idx(lo, 0),
        palm_idx(hi, 0),
        palm_idx(hi, 15),
        palm_idx(hi, 14),
        palm_idx(hi, 13),
    ]
}

fn chain_ring(chain: usize, r: usize) -> [usize; CHAIN_RING] {
    match (chain, r) {
        (4, 0) => thumb_base_ring(),
        (4, r) => std::array::from_fn(|k| thumb_idx(r, k)),
        (f, 0) => finger_base_ring(f),
        (f, r) => std::array::from_fn(|k| finger_idx(f, r, k)),
    }
}

fn chain_rings(chain: usize) -> usize {
    if chain == 4 {
        THUMB_RINGS
    } else {
        FINGER_RINGS
    }
}

fn chain_tips(chain: usize) -> [usize; 2] {
    let start = if chain == 4 {
        THUMB_BASE + THUMB_RINGS * CHAIN_RING
    } else {
        FINGER_BASE + chain * FINGER_STRIDE + FINGER_RINGS * CHAIN_RING
    };
    [start, start + 1]
}

/// Axis of a chain: origin, unit direction, cross-section frame and length.
struct ChainFrame {
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    ea: Vector3<f64>,
    eb: Vector3<f64>,
    length: f64,
    radius: f64,
}

fn orthonormal_frame(dir: &Vector3<f64>, hint: &Vector3<f64>) -> Vector3<f64> {
    (hint - dir * hint.dot(dir)).normalize()
}

fn chain_frame(a: &Anatomy, chain: usize, pos: &[Vector3<f64>]) -> ChainFrame {
    if chain == 4 {
        let base = thumb_base_ring();
        let origin = base.iter().map(|&i| pos[i]).sum::<Vector3<f64>>() / CHAIN_RING as f64;
        let dir = Vector3::new(-0.7, 0.65, 0.3).normalize();
        let e1 = orthonormal_frame(&dir, &Vector3::z());
        let e2 = orthonormal_frame(&dir, &Vector3::y());
        let e2 = (e2 - e1 * e2.dot(&e1)).normalize();
        ChainFrame {
            origin,
            dir,
            ea: e1,
            eb: -e2,
            length: a.thumb_length,
            radius: a.thumb_radius,
        }
    } else {
        let x = a.finger_center_x(chain);
        let origin = Vector3::new(x, 0.0, 0.0);
        let dir = Vector3::new(a.splay * x / a.palm_half_width, 1.0, 0.0).normalize();
        let ea = orthonormal_frame(&dir, &Vector3::x());
        let eb = ea.cross(&dir);
        ChainFrame {
            origin,
            dir,
            ea,
            eb,
            length: a.finger_length[chain],
            radius: a.finger_radius[chain],
        }
    }
}

/// Axial positions of rings 1..=n, with the chain's inner joints landing on
/// ring indices `joints`.
fn ring_stations(length: f64, end: f64, joints: [usize; 2], n: usize) -> Vec<f64> {
    let (s1, s2) = if n == FINGER_RINGS {
        (0.45 * length, 0.75 * length)
    } else {
        (0.35 * length, 0.70 * length)
    };
    let knots = [(0usize, 0.0), (joints[0], s1), (joints[1], s2), (n, end)];
    (1..=n)
        .map(|r| {
            let seg = knots.windows(2).find(|w| r <= w[1].0).unwrap();
            let (r0, a0) = seg[0];
            let (r1, a1) = seg[1];
            a0 + (a1 - a0) * (r - r0) as f64 / (r1 - r0) as f64
        })
        .collect()
}

fn geometry(a: &Anatomy) -> Vec<Vector3<f64>> {
    let mut pos = vec![Vector3::zeros(); NUM_VERTICES];

    // palm rings, wrist first
    for (r, &frac) in PALM_LEVELS.iter().enumerate() {
        let y = -a.palm_length * (1.0 - frac);
        let w = a.palm_width_at(frac);
        let t = a.palm_thickness_at(frac);
        let ring: [(f64, f64); PALM_RING] = [
            (-0.75 * w, t),
            (-0.45 * w, t),
            (-0.15 * w, t),
            (0.15 * w, t),
            (0.45 * w, t),
            (0.75 * w, t),
            (w, t / 3.0),
            (w, -t / 3.0),
            (0.75 * w, -t),
            (0.45 * w, -t),
            (0.15 * w, -t),
            (-0.15 * w, -t),
            (-0.45 * w, -t),
            (-0.75 * w, -t),
            (-w, -t / 3.0),
            (-w, t / 3.0),
        ];
        for (k, (x, z)) in ring.iter().enumerate() {
            pos[palm_idx(r, k)] = Vector3::new(*x, y, *z);
        }
    }

    // knuckle ring: 4 front + 4 back vertices per finger slot
    let slot = 0.25 * a.palm_half_width;
    let offsets = [-0.95, -0.35, 0.35, 0.95];
    for j in 0..16 {
        let x = a.finger_center_x(j / 4) + slot * offsets[j % 4];
        pos[knuckle_idx(j)] = Vector3::new(x, 0.0, a.palm_half_thickness);
        pos[knuckle_idx(31 - j)] = Vector3::new(x, 0.0, -a.palm_half_thickness);
    }

    for chain in 0..5 {
        let fr = chain_frame(a, chain, &pos);
        let n = chain_rings(chain);
        let joints = if chain == 4 {
            THUMB_JOINT_RINGS
        } else {
            FINGER_JOINT_RINGS
        };
        let tip_radius = fr.radius * (1.0 - a.taper);
        let end = fr.length - 0.5 * tip_radius;
        let stations = ring_stations(fr.length, end, joints, n);
        for (r, &s) in (1..=n).zip(&stations) {
            let rad = fr.radius * (1.0 - a.taper * s / fr.length);
            let c = fr.origin + fr.dir * s;
            let ring = chain_ring(chain, r);
            for (k, deg) in CHAIN_ANGLES.iter().enumerate() {
                let (sn, cs) = deg.to_radians().sin_cos();
                pos[ring[k]] = c + fr.ea * (rad * cs) + fr.eb * (0.9 * rad * sn);
            }
        }
        let tip_center = fr.origin + fr.dir * fr.length;
        let [ta, tb] = chain_tips(chain);
        pos[ta] = tip_center + fr.eb * (0.3 * tip_radius);
        pos[tb] = tip_center - fr.eb * (0.3 * tip_radius);
    }
    pos
}

/// Zipper triangulation of the band between two closed rings listed in the
/// same rotational direction; `n + m` triangles.
fn zipper(a: &[usize], pa: &[f64], b: &[usize], pb: &[f64]) -> Vec<[usize; 3]> {
    let (n, m) = (a.len(), b.len());
    let next = |p: &[f64], i: usize| if i + 1 < p.len() { p[i + 1] } else { 1.0 + p[0] };
    let mut out = Vec::with_capacity(n + m);
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let advance_a = j == m || (i < n && next(pa, i) <= next(pb, j));
        if advance_a {
            out.push([a[i], a[(i + 1) % n], b[j % m]]);
            i += 1;
        } else {
            out.push([a[i % n], b[(j + 1) % m], b[j]]);
            j += 1;
        }
    }
    out
}

/// Angular parameter in [0, 1) around the palm axis, increasing along ring
/// order, measured from the left side of the palm.
fn ring_parameter(p: &Vector3<f64>, w: f64, t: f64) -> f64 {
    let ang = (p.z / t).atan2(p.x / w);
    let reference = std::f64::consts::PI;
    let two_pi = 2.0 * std::f64::consts::PI;
    ((reference - ang).rem_euclid(two_pi)) / two_pi
}

fn rotate_to_min(ids: Vec<usize>, params: Vec<f64>) -> (Vec<usize>, Vec<f64>) {
    let start = params
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .unwrap()
        .0;
    let n = ids.len();
    let ids = (0..n).map(|k| ids[(start + k) % n]).collect();
    let params = (0..n).map(|k| params[(start + k) % n]).collect();
    (ids, params)
}

/// Triangles paired with a point inside the solid near them, used to orient
/// every face outward.
fn topology(a: &Anatomy, pos: &[Vector3<f64>]) -> Vec<[u32; 3]> {
    let mut tris: Vec<([usize; 3], Vector3<f64>)> = Vec::with_capacity(NUM_FACES);
    let quad = |tris: &mut Vec<([usize; 3], Vector3<f64>)>, q: [usize; 4], inside: Vector3<f64>| {
        tris.push(([q[0], q[1], q[2]], inside));
        tris.push(([q[0], q[2], q[3]], inside));
    };
    let centroid = |ids: &[usize]| ids.iter().map(|&i| pos[i]).sum::<Vector3<f64>>() / ids.len() as f64;

    for r in 0..PALM_RINGS - 1 {
        for k in 0..PALM_RING {
            if r == THUMB_SLOT_RING && matches!(k, 13..=15) {
                continue;
            }
            let q = [
                palm_idx(r, k),
                palm_idx(r, k + 1),
                palm_idx(r + 1, k + 1),
                palm_idx(r + 1, k),
            ];
            let c = centroid(&q);
            quad(&mut tris, q, Vector3::new(0.0, c.y, 0.0));
        }
    }

    // palm top to knuckle ring
    let w = a.palm_half_width;
    let t = a.palm_half_thickness;
    let top: Vec<usize> = (0..PALM_RING).map(|k| palm_idx(PALM_RINGS - 1, k)).collect();
    let knuckles: Vec<usize> = (0..KNUCKLE_RING).map(knuckle_idx).collect();
    let param = |ids: &[usize]| ids.iter().map(|&i| ring_parameter(&pos[i], w, t)).collect::<Vec<_>>();
    let (top, ptop) = rotate_to_min(top.clone(), param(&top));
    let (knuckles, pk) = rotate_to_min(knuckles.clone(), param(&knuckles));
    for tri in zipper(&top, &ptop, &knuckles, &pk) {
        let c = centroid(&tri);
        tris.push((tri, Vector3::new(0.0, c.y - 0.05, 0.0)));
    }

    // webs between neighbouring finger bases
    for i in 0..3 {
        let q = [
            knuckle_idx(4 * i + 3),
            knuckle_idx(4 * i + 4),
            knuckle_idx(27 - 4 * i),
            knuckle_idx(28 - 4 * i),
        ];
        let c = centroid(&q);
        quad(&mut tris, q, Vector3::new(c.x, -0.1, 0.0));
    }

    for chain in 0..5 {
        let fr = chain_frame(a, chain, pos);
        let axis_point = |p: &Vector3<f64>| {
            let s = (p - fr.origin).dot(&fr.dir).clamp(0.0, fr.length - fr.radius);
            fr.origin + fr.dir * s
        };
        let n = chain_rings(chain);
        for r in 0..n {
            let lo = chain_ring(chain, r);
            let hi = chain_ring(chain, r + 1);
            for k in 0..CHAIN_RING {
                let q = [lo[k], lo[(k + 1) % CHAIN_RING], hi[(k + 1) % CHAIN_RING], hi[k]];
                let inside = axis_point(&centroid(&q));
                quad(&mut tris, q, inside);
            }
        }
        let ring = chain_ring(chain, n);
        let [ta, tb] = chain_tips(chain);
        let cap = [
            [ring[0], ring[1], ta],
            [ring[1], ring[2], ta],
            [ring[2], ring[3], ta],
            [ring[4], ring[5], tb],
            [ring[5], ring[6], tb],
            [ring[6], ring[7], tb],
            [ring[3], ring[4], tb],
            [ring[3], tb, ta],
            [ring[7], ring[0], ta],
            [ring[7], ta, tb],
        ];
        let inside = fr.origin + fr.dir * (fr.length - fr.radius);
        for tri in cap {
            tris.push((tri, inside));
        }
    }

    orient_consistently(tris, pos)
}

/// Makes winding consistent across shared edges by propagation from the
/// first face, then picks the global sign that agrees with most of the
/// per-face outward hints.
fn orient_consistently(tris: Vec<([usize; 3], Vector3<f64>)>, pos: &[Vector3<f64>]) -> Vec<[u32; 3]> {
    use std::collections::{HashMap, VecDeque};
    let mut faces: Vec<[usize; 3]> = tris.iter().map(|(t, _)| *t).collect();
    let mut by_edge: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    let mut done = vec![false; faces.len()];
    let mut queue = VecDeque::new();
    for seed in 0..faces.len() {
        if done[seed] {
            continue;
        }
        done[seed] = true;
        queue.push_back(seed);
        while let Some(fi) = queue.pop_front() {
            let f = faces[fi];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                for &gi in &by_edge[&(a.min(b), a.max(b))] {
                    if done[gi] {
                        continue;
                    }
                    let g = faces[gi];
                    let same_dir = (0..3).any(|k| g[k] == a && g[(k + 1) % 3] == b);
                    if same_dir {
                        faces[gi] = [g[0], g[2], g[1]];
                    }
                    done[gi] = true;
                    queue.push_back(gi);
                }
            }
        }
    }
    let votes: f64 = faces
        .iter()
        .zip(&tris)
        .map(|(t, (_, inside))| {
            let (p0, p1, p2) = (pos[t[0]], pos[t[1]], pos[t[2]]);
            let n = (p1 - p0).cross(&(p2 - p0));
            let c = (p0 + p1 + p2) / 3.0;
            n.dot(&(c - inside)).signum()
        })
        .sum();
    faces
        .into_iter()
        .map(|t| {
            let t = t.map(|i| i as u32);
            if votes >= 0.0 {
                t
            } else {
                [t[0], t[2], t[1]]
            }
        })
        .collect()
}

/// Bone (kinematic joint) index of each chain's three bones; wrist is 0.
fn chain_bones(chain: usize) -> [usize; 3] {
    // bones: index 1-3, middle 4-6, ring 7-9, pinky 10-12, thumb 13-15
    let b = 1 + 3 * chain;
    [b, b + 1, b + 2]
}

fn kinematic_parents() -> [Option<usize>; NUM_BONES] {
    let mut p = [None; NUM_BONES];
    for chain in 0..5 {
        let [b1, b2, b3] = chain_bones(chain);
        p[b1] = Some(0);
        p[b2] = Some(b1);
        p[b3] = Some(b2);
    }
    p
}

fn skinning_weights() -> Vec<[f64; NUM_BONES]> {
    let mut w = vec![[0.0; NUM_BONES]; NUM_VERTICES];
    let nearest_finger = |x_slot: usize| chain_bones(x_slot)[0];
    for r in 0..PALM_RINGS {
        for k in 0..PALM_RING {
            let row = &mut w[palm_idx(r, k)];
            let blend = match r {
                10 => 0.125,
                11 => 0.25,
                _ => 0.0,
            };
            row[0] = 1.0 - blend;
            if blend > 0.0 {
                // nearest finger by lateral position on the ring
                let x: f64 = [-0.75, -0.45, -0.15, 0.15, 0.45, 0.75, 1.0, 1.0, 0.75, 0.45, 0.15, -0.15, -0.45, -0.75, -1.0, -1.0][k];
                let f = (((x + 1.0) * 2.0).floor() as usize).min(3);
                row[nearest_finger(f)] += blend;
            }
        }
    }
    for j in 0..KNUCKLE_RING {
        let front = if j < 16 { j } else { 31 - j };
        let row = &mut w[knuckle_idx(j)];
        row[0] = 0.5;
        row[nearest_finger(front / 4)] = 0.5;
    }
    for &i in &thumb_base_ring() {
        let row = &mut w[i];
        *row = [0.0; NUM_BONES];
        row[0] = 0.5;
        row[chain_bones(4)[0]] = 0.5;
    }
    for chain in 0..5 {
        let [b1, b2, b3] = chain_bones(chain);
        let n = chain_rings(chain);
        let [j1, j2] = if chain == 4 {
            THUMB_JOINT_RINGS
        } else {
            FINGER_JOINT_RINGS
        };
        for r in 1..=n {
            let mut row = [0.0; NUM_BONES];
            if r == 1 {
                row[0] = 0.25;
                row[b1] = 0.75;
            } else if r + 1 < j1 {
                row[b1] = 1.0;
            } else if r <= j1 + 1 {
                let t = 0.5 + 0.25 * (r as f64 - j1 as f64);
                row[b1] = 1.0 - t;
                row[b2] = t;
            } else if r + 1 < j2 {
                row[b2] = 1.0;
            } else if r <= j2 + 1 {
                let t = 0.5 + 0.25 * (r as f64 - j2 as f64);
                row[b2] = 1.0 - t;
                row[b3] = t;
            } else {
                row[b3] = 1.0;
            }
            for i in chain_ring(chain, r) {
                w[i] = row;
            }
        }
        for i in chain_tips(chain) {
            w[i][b3] = 1.0;
        }
    }
    w
}

/// Vertex neighbourhoods whose centroids define the anatomical joints, in
/// skeleton order: wrist, then thumb, index, middle, ring, pinky with
/// MCP, PIP, DIP, tip each.
fn skeleton_neighbourhoods() -> Vec<Vec<usize>> {
    let mut out = vec![(0..PALM_RING).map(|k| palm_idx(0, k)).collect::<Vec<_>>()];
    for chain in [4, 0, 1, 2, 3] {
        let joints = if chain == 4 {
            THUMB_JOINT_RINGS
        } else {
            FINGER_JOINT_RINGS
        };
        out.push(chain_ring(chain, 0).to_vec());
        out.push(chain_ring(chain, joints[0]).to_vec());
        out.push(chain_ring(chain, joints[1]).to_vec());
        out.push(chain_tips(chain).to_vec());
    }
    out
}

/// Skeleton joint index of each bone's rotation centre.
fn bone_to_skeleton_joint(bone: usize) -> usize {
    if bone == 0 {
        return 0;
    }
    let chain = (bone - 1) / 3;
    let within = (bone - 1) % 3;
    let slot = if chain == 4 { 0 } else { chain + 1 };
    1 + 4 * slot + within
}

fn mean_pose() -> [f64; POSE_DIM] {
    let mut p = [0.0; POSE_DIM];
    for chain in 0..4 {
        let bones = chain_bones(chain);
        for (b, flex) in bones.iter().zip([0.25, 0.35, 0.2]) {
            // flexion towards the palmar (+z) side is a positive rotation about x
            p[3 * (b - 1)] = flex;
        }
    }
    let thumb = chain_bones(4);
    for (b, v) in thumb.iter().zip([[0.0, 0.1, 0.15], [0.1, 0.0, 0.1], [0.1, 0.0, 0.05]]) {
        p[3 * (b - 1)..3 * (b - 1) + 3].copy_from_slice(&v);
    }
    p
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize_vec(v: Vector3<f64>) -> Vector3<f64> {
    v.map(quantize)
}

/// Generates the toy hand model; a deterministic function of `seed`.
pub fn gen_toy_model(seed: u64) -> HandModelAssets {
    gen_toy_model_with_joints(seed).0
}

/// Like [`gen_toy_model`], also returning the anatomical joints of the
/// template (the skeleton regressor's neighbourhood centroids).
pub fn gen_toy_model_with_joints(seed: u64) -> (HandModelAssets, Skeleton3D) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anat = Anatomy::base();
    for k in 0..SHAPE_DIM {
        let amount: f64 = rng.random_range(-0.5..0.5);
        anat = anat.displaced(k, amount);
    }

    let raw = geometry(&anat);
    let faces = topology(&anat, &raw);
    let template: Vec<Vector3<f64>> = raw.iter().copied().map(quantize_vec).collect();
    let shape_basis: Vec<Vec<Vector3<f64>>> = (0..SHAPE_DIM)
        .map(|k| {
            let moved = geometry(&anat.displaced(k, 1.0));
            moved
                .iter()
                .zip(&raw)
                .map(|(m, r)| quantize_vec(m - r))
                .collect()
        })
        .collect();

    let skinning_weights = skinning_weights()
        .into_iter()
        .map(|row| row.map(quantize))
        .collect();

    let hoods = skeleton_neighbourhoods();
    let mut skel = vec![0.0; NUM_VERTICES * NUM_JOINTS];
    for (j, hood) in hoods.iter().enumerate() {
        let w = quantize(1.0 / hood.len() as f64);
        for &i in hood {
            skel[i * NUM_JOINTS + j] = w;
        }
    }
    let mut rest_reg = vec![0.0; NUM_BONES * NUM_VERTICES];
    for bone in 0..NUM_BONES {
        let j = bone_to_skeleton_joint(bone);
        for i in 0..NUM_VERTICES {
            rest_reg[bone * NUM_VERTICES + i] = skel[i * NUM_JOINTS + j];
        }
    }

    let data = AssetData {
        template_vertices: template,
        faces,
        shape_basis,
        skinning_weights,
        rest_joint_regressor: rest_reg,
        kinematic_parents: kinematic_parents(),
        skeleton_regressor: [skel.clone(), skel.clone(), skel],
        mean_pose: mean_pose().map(quantize),
        pose_correctives: None,
    };
    let assets = HandModelAssets::new(data).expect("toy hand model satisfies asset invariants");
    let joints = Skeleton3D(
        hoods
            .iter()
            .map(|hood| {
                hood.iter().map(|&i| assets.template()[i]).sum::<Vector3<f64>>() / hood.len() as f64
            })
            .collect::<Vec<_>>()
            .try_into()
            .unwrap(),
    );
    (assets, joints)
}
