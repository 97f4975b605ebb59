//! Gaussian-splat scene optimization, surface meshing and mesh-bound
//! refinement on the CPU.
//!
//! The pipeline: render and optimize a free gaussian scene with
//! surface-alignment regularization, sample a level set of the induced
//! density, reconstruct a mesh via screened Poisson plus marching cubes,
//! simplify it, then bind flat gaussians to the triangles and jointly refine
//! mesh and gaussians against the photometric loss.

pub mod bind;
pub mod error;
pub mod field;
pub mod grads;
pub mod image_loss;
pub mod io;
pub mod knn;
pub mod levelset;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod regularize;
pub mod render;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
pub use mesh::TriangleMesh;
pub use scene::{Camera, Gaussian3D, Scene};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
