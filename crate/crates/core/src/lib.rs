//! Fitting an articulated, deformable hand mesh to 2D evidence.

pub mod adam;
pub mod assets;
pub mod camera;
pub mod descriptor;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod raster;
pub mod refine;
pub mod regressor;
pub mod rotation;
pub mod skeleton;
pub mod synth;
pub mod toy;
pub mod train;

pub use assets::{load_model_assets, AssetData, HandModelAssets, NUM_FACES, NUM_JOINTS, NUM_VERTICES};
pub use error::{Error, Result};
pub use model::{synthesize, synthesize_mesh, HandMesh, Synthesis};
pub use params::{CameraParams, MeshParams, PoseParams, ShapeParams, PARAM_DIM};
pub use skeleton::{regress_skeleton, Skeleton2D, Skeleton3D, ROOT_JOINT};
pub use toy::{gen_toy_model, gen_toy_model_with_joints};
