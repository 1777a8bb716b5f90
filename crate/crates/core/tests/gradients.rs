use handmesh::camera::ImagePlane;
use handmesh::descriptor::GridDescriptor;
use handmesh::gradcheck::Term;
use handmesh::params::{MeshParams, POSE, SHAPE, TRANSLATION};
use handmesh::raster::SoftRasterConfig;
use handmesh::synth::{generate_dataset, AugmentConfig, SynthRecord};
use handmesh::{gen_toy_model, HandModelAssets};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const EPS: f64 = 1e-6;
// The training and refinement kernel: sigma 1 px, truncated at 5 sigma.
const RASTER: SoftRasterConfig = SoftRasterConfig { sigma: 1.0, cutoff: 5.0 };

fn points(assets: &HandModelAssets, plane: &ImagePlane, n: usize) -> Vec<(SynthRecord, MeshParams)> {
    let records = generate_dataset(assets, &AugmentConfig::default(), n, 11, plane).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    records
        .into_iter()
        .map(|r| {
            let mut h = r.gt.params;
            let mut jitter = |range: std::ops::Range<usize>, s: f64| {
                let d = Normal::new(0.0, s).unwrap();
                for i in range {
                    h.0[i] += d.sample(&mut rng);
                }
            };
            jitter(POSE, 0.1);
            jitter(SHAPE, 0.3);
            jitter(TRANSLATION, 0.05);
            (r, h)
        })
        .collect()
}

fn check_all(term: impl Fn(&SynthRecord) -> Term<'_>, tol: f64) {
    let assets = gen_toy_model(1);
    let plane = ImagePlane::default();
    for (k, (r, h)) in points(&assets, &plane, 5).iter().enumerate() {
        let err = term(r).check(h, &assets, &plane, EPS).unwrap();
        assert!(err <= tol, "point {k}: relative error {err:e} > {tol:e}");
    }
}

#[test]
fn articulation_gradient() {
    check_all(|r| Term::Art { gt: &r.gt.skeleton, ctx: &r.gt.context }, 1e-4);
}

#[test]
fn laplacian_gradient() {
    check_all(|_| Term::Lap, 1e-4);
}

#[test]
fn feature_gradient() {
    static DESC: GridDescriptor = GridDescriptor { cells: 16 };
    check_all(
        |r| Term::Feat { desc: &DESC, x: &r.image, raster: RASTER },
        1e-2,
    );
}

#[test]
fn silhouette_gradient() {
    check_all(|r| Term::Sh { gt: &r.mask, raster: RASTER }, 1e-2);
}
