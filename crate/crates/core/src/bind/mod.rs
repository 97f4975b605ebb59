//! Mesh-bound gaussians: flat splats attached to triangles by fixed
//! barycentric coordinates, parameterized by two in-plane scales and one
//! in-plane rotation stored as a complex number. The world-space gaussian is
//! a pure function of the current mesh geometry, so the splats follow every
//! mesh edit and stay exactly on their triangle planes.

pub mod refine;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::math;
use crate::mesh::TriangleMesh;
use crate::scene::{Gaussian3D, Scene};

/// Thin-axis scale as a fraction of the mesh mean edge length: visibly flat
/// but still renderable with an invertible covariance.
pub const THIN_SCALE_FRAC: f64 = 1e-4;

/// Below this norm a rotation complex number is treated as (1, 0).
pub const ROT2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundGaussian {
    pub tri_id: u32,
    /// Fixed barycentric position on the triangle (not learnable).
    pub bary: Vector3<f64>,
    /// Log of the two in-plane scales.
    pub log_scale2: Vector2<f64>,
    /// In-plane rotation as an unnormalized complex number x + iy.
    pub rot2: Vector2<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundScene {
    pub mesh: TriangleMesh,
    pub bound: Vec<BoundGaussian>,
    pub n_per_triangle: usize,
    pub sh_degree: usize,
}

/// Predefined barycentric slots per triangle. Supported counts: 1 (the
/// centroid), 3 (one point biased toward each vertex), 6 (the vertex-biased
/// triple plus its half-complement triple biased toward edge midpoints).
/// Every slot is strictly interior.
pub fn bary_layout(n: usize) -> Result<Vec<Vector3<f64>>> {
    let third = 1.0 / 3.0;
    let vertex_biased = [
        Vector3::new(4.0, 1.0, 1.0) / 6.0,
        Vector3::new(1.0, 4.0, 1.0) / 6.0,
        Vector3::new(1.0, 1.0, 4.0) / 6.0,
    ];
    match n {
        1 => Ok(vec![Vector3::repeat(third)]),
        3 => Ok(vertex_biased.to_vec()),
        6 => {
            let mut out = vertex_biased.to_vec();
            // (1 - b) / 2 of each slot: pulled toward the opposite edge's
            // midpoint, still interior.
            out.extend(
                vertex_biased
                    .iter()
                    .map(|b| (Vector3::repeat(1.0) - b) / 2.0),
            );
            Ok(out)
        }
        other => Err(Error::Unsupported(format!(
            "{other} gaussians per triangle (supported: 1, 3, 6)"
        ))),
    }
}

/// Orthonormal triangle frame with determinant +1: column 0 is the unit
/// face normal, column 1 the unit first edge (orthogonalized), column 2
/// their cross product.
pub fn triangle_frame(mesh: &TriangleMesh, tri_id: usize) -> Result<Matrix3<f64>> {
    let [v0, v1, v2] = mesh.face_vertices(tri_id);
    let a = v1 - v0;
    let cross = a.cross(&(v2 - v0));
    let cn = cross.norm();
    // cn is twice the area.
    if cn <= 2e-12 {
        return Err(Error::BadMesh(format!(
            "degenerate triangle {tri_id} (area {:.3e})",
            0.5 * cn
        )));
    }
    let normal = cross / cn;
    let w = a - normal * a.dot(&normal);
    let r1 = w / w.norm();
    Ok(Matrix3::from_columns(&[normal, r1, normal.cross(&r1)]))
}

/// Normalized rotation complex number; falls back to (1, 0) and bumps the
/// counter when the stored value has collapsed to zero.
fn unit_rot2(rot2: Vector2<f64>, warnings: &mut usize) -> Vector2<f64> {
    let r = rot2.norm();
    if r < ROT2_EPS {
        *warnings += 1;
        Vector2::new(1.0, 0.0)
    } else {
        rot2 / r
    }
}

/// In-plane rotation of the triangle frame: columns
/// [n, x'R1 + y'R2, -y'R1 + x'R2] for the normalized (x', y').
pub(crate) fn world_rotation(frame: &Matrix3<f64>, unit: Vector2<f64>) -> Matrix3<f64> {
    let r1 = frame.column(1).into_owned();
    let r2 = frame.column(2).into_owned();
    Matrix3::from_columns(&[
        frame.column(0).into_owned(),
        r1 * unit.x + r2 * unit.y,
        r1 * -unit.y + r2 * unit.x,
    ])
}

pub(crate) fn bound_to_world_with(
    bg: &BoundGaussian,
    mesh: &TriangleMesh,
    thin_scale: f64,
    warnings: &mut usize,
) -> Result<Gaussian3D> {
    let [v0, v1, v2] = mesh.face_vertices(bg.tri_id as usize);
    let frame = triangle_frame(mesh, bg.tri_id as usize)?;
    let rot = world_rotation(&frame, unit_rot2(bg.rot2, warnings));
    Ok(Gaussian3D {
        mean: v0 * bg.bary.x + v1 * bg.bary.y + v2 * bg.bary.z,
        log_scale: Vector3::new(thin_scale.ln(), bg.log_scale2.x, bg.log_scale2.y),
        rot: math::matrix_to_quat(&rot),
        opacity_logit: bg.opacity_logit,
        sh: bg.sh.clone(),
    })
}

/// World-space gaussian for one bound splat: mean from the barycentric
/// coordinates, thin axis along the triangle normal, in-plane axes rotated
/// by rot2.
pub fn bound_to_world(bg: &BoundGaussian, mesh: &TriangleMesh) -> Result<Gaussian3D> {
    let mut warnings = 0;
    bound_to_world_with(bg, mesh, THIN_SCALE_FRAC * mesh.mean_edge_length(), &mut warnings)
}

impl BoundScene {
    pub fn len(&self) -> usize {
        self.bound.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bound.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        for (i, bg) in self.bound.iter().enumerate() {
            if bg.tri_id as usize >= self.mesh.faces.len() {
                return Err(Error::Validation(format!(
                    "bound gaussian {i} references face {} of {}",
                    bg.tri_id,
                    self.mesh.faces.len()
                )));
            }
            let b = bg.bary;
            if b.x < 0.0 || b.y < 0.0 || b.z < 0.0 || (b.x + b.y + b.z - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "bound gaussian {i} has invalid barycentric {:?}",
                    (b.x, b.y, b.z)
                )));
            }
            if bg.sh.len() != math::sh_coeff_count(self.sh_degree) {
                return Err(Error::Validation(format!(
                    "bound gaussian {i} has {} sh coefficients, expected {}",
                    bg.sh.len(),
                    math::sh_coeff_count(self.sh_degree)
                )));
            }
        }
        Ok(())
    }

    pub fn thin_scale(&self) -> f64 {
        THIN_SCALE_FRAC * self.mesh.mean_edge_length()
    }

    /// All bound gaussians in world space, plus the count of degenerate
    /// rot2 values that fell back to the identity rotation.
    pub fn to_scene(&self) -> Result<(Scene, usize)> {
        let thin = self.thin_scale();
        let results: Vec<Result<(Gaussian3D, usize)>> = self
            .bound
            .par_iter()
            .map(|bg| {
                let mut warn = 0;
                bound_to_world_with(bg, &self.mesh, thin, &mut warn).map(|g| (g, warn))
            })
            .collect();
        let mut gaussians = Vec::with_capacity(results.len());
        let mut warnings = 0;
        for r in results {
            let (g, w) = r?;
            gaussians.push(g);
            warnings += w;
        }
        Ok((Scene::new(gaussians, self.sh_degree)?, warnings))
    }
}

/// Default slot count: 6 per triangle for meshes up to 200k vertices, 1 for
/// larger ones so total gaussian count stays balanced.
pub fn default_n_per_triangle(mesh: &TriangleMesh) -> usize {
    if mesh.vertices.len() <= 200_000 {
        6
    } else {
        1
    }
}

/// Attaches `n_per_triangle` flat gaussians to every face. In-plane scales
/// start at half the typical spacing between slots (half the mean triangle
/// side for a single slot); colors copy the nearest gaussian of
/// `init_scene` when given, otherwise mid-gray; opacity starts near 1.
pub fn bind_gaussians(
    mesh: &TriangleMesh,
    n_per_triangle: usize,
    init_scene: Option<&Scene>,
) -> Result<BoundScene> {
    mesh.validate()?;
    if mesh.faces.is_empty() {
        return Err(Error::BadMesh("cannot bind gaussians to an empty mesh".into()));
    }
    let layout = bary_layout(n_per_triangle)?;
    let sh_degree = init_scene.map_or(0, |s| s.sh_degree);
    let k_sh = math::sh_coeff_count(sh_degree);
    let source_tree = init_scene
        .map(|s| KdTree::build(&s.gaussians.iter().map(|g| g.mean).collect::<Vec<_>>()))
        .transpose()?;
    let opacity_logit = math::logit(0.99);

    let bound: Vec<BoundGaussian> = (0..mesh.faces.len())
        .into_par_iter()
        .flat_map_iter(|f| {
            let [v0, v1, v2] = mesh.face_vertices(f);
            let points: Vec<Vector3<f64>> = layout
                .iter()
                .map(|b| v0 * b.x + v1 * b.y + v2 * b.z)
                .collect();
            let mut spacing = 0.0;
            let mut pairs = 0;
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    spacing += (points[i] - points[j]).norm();
                    pairs += 1;
                }
            }
            let spacing = if pairs > 0 {
                spacing / pairs as f64
            } else {
                ((v1 - v0).norm() + (v2 - v1).norm() + (v0 - v2).norm()) / 3.0
            };
            let log_s = (0.5 * spacing).max(math::SCALE_FLOOR).ln();
            let layout = layout.clone();
            let tree = source_tree.as_ref();
            points
                .into_iter()
                .zip(layout)
                .map(move |(p, b)| {
                    let sh = match (tree, init_scene) {
                        (Some(t), Some(s)) => s.gaussians[t.nearest(p)].sh.clone(),
                        _ => vec![Vector3::zeros(); k_sh],
                    };
                    BoundGaussian {
                        tri_id: f as u32,
                        bary: b,
                        log_scale2: Vector2::repeat(log_s),
                        rot2: Vector2::new(1.0, 0.0),
                        opacity_logit,
                        sh,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let bs = BoundScene {
        mesh: mesh.clone(),
        bound,
        n_per_triangle,
        sh_degree,
    };
    bs.validate()?;
    Ok(bs)
}

/// After a mesh edit that preserves topology, multiplies every gaussian's
/// in-plane scales by the ratio of its triangle's mean side length after vs
/// before the edit. The in-plane rotations stay valid unchanged; the thin
/// scale follows the new mesh automatically.
pub fn edit_rescale(
    bs: &BoundScene,
    old_mesh: &TriangleMesh,
    new_mesh: &TriangleMesh,
) -> Result<BoundScene> {
    if old_mesh.faces != new_mesh.faces || old_mesh.vertices.len() != new_mesh.vertices.len() {
        return Err(Error::Validation(
            "edit_rescale requires topologically identical meshes".into(),
        ));
    }
    new_mesh.validate()?;
    let mean_side = |mesh: &TriangleMesh, f: usize| {
        let [a, b, c] = mesh.face_vertices(f);
        ((b - a).norm() + (c - b).norm() + (a - c).norm()) / 3.0
    };
    let mut out = bs.clone();
    out.mesh = new_mesh.clone();
    for bg in &mut out.bound {
        let f = bg.tri_id as usize;
        let old = mean_side(old_mesh, f);
        if old <= 0.0 {
            return Err(Error::BadMesh(format!("degenerate source triangle {f}")));
        }
        let ln_ratio = (mean_side(new_mesh, f) / old).ln();
        bg.log_scale2.x += ln_ratio;
        bg.log_scale2.y += ln_ratio;
    }
    Ok(out)
}
