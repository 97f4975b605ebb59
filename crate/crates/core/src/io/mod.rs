//! File formats: gaussian PLY, camera JSON, meshes, point clouds and images.

pub mod bound_io;
pub mod camera_json;
pub mod image_io;
pub mod mesh_io;
pub mod splat_ply;

pub use bound_io::{load_bound_table, save_bound_table};
pub use camera_json::{load_cameras, save_cameras};
pub use image_io::{load_png, save_png, DepthFile};
pub use mesh_io::{
    load_mesh_obj, load_mesh_ply, save_mesh_obj, save_mesh_ply, save_point_cloud_ply,
};
pub use splat_ply::{load_gaussian_ply, save_gaussian_ply};
