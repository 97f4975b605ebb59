//! Synthetic flat-gaussian scenes with analytic ground-truth surfaces.
//!
//! Gaussians are seeded on the surface with their thin axis along the local
//! normal, which makes the scenes useful oracles for the density, meshing and
//! regularization stages.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::scene::{Camera, Gaussian3D, Scene};

/// Analytic surface with a signed distance and a surface sampler.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box centered at the origin, given by half extents.
    Box {
        half_extents: [f64; 3],
    },
    /// Plane `dot(normal, p) = offset`, sampled within `patch_radius` of the
    /// point closest to the origin.
    Plane {
        normal: [f64; 3],
        offset: f64,
        patch_radius: f64,
    },
}

impl Surface {
    pub fn sdf(&self, p: Vector3<f64>) -> f64 {
        match self {
            Surface::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            Surface::Box { half_extents } => {
                let e = Vector3::from(*half_extents);
                let q = p.abs() - e;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                outside + inside
            }
            Surface::Plane { normal, offset, .. } => {
                Vector3::from(*normal).normalize().dot(&p) - offset
            }
        }
    }

    /// Uniform surface point with its outward unit normal.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Surface::Sphere { center, radius } => {
                let n = math::random_unit_vector(rng);
                (Vector3::from(*center) + n * *radius, n)
            }
            Surface::Box { half_extents } => {
                let e = Vector3::from(*half_extents);
                // Face pair k (normal along axis k) has area proportional to
                // the product of the other two extents.
                let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                let mut p = Vector3::zeros();
                p[axis] = sign * e[axis];
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                p[u] = (rng.random::<f64>() * 2.0 - 1.0) * e[u];
                p[v] = (rng.random::<f64>() * 2.0 - 1.0) * e[v];
                let mut n = Vector3::zeros();
                n[axis] = sign;
                (p, n)
            }
            Surface::Plane {
                normal,
                offset,
                patch_radius,
            } => {
                let n = Vector3::from(*normal).normalize();
                let (t1, t2) = math::orthonormal_tangents(n);
                let r = patch_radius * rng.random::<f64>().sqrt();
                let theta = std::f64::consts::TAU * rng.random::<f64>();
                let p = n * *offset + t1 * (r * theta.cos()) + t2 * (r * theta.sin());
                (p, n)
            }
        }
    }

    /// Characteristic object size used to set scales and camera distance.
    pub fn object_scale(&self) -> f64 {
        match self {
            Surface::Sphere { radius, .. } => *radius,
            Surface::Box { half_extents } => {
                half_extents.iter().cloned().fold(0.0_f64, f64::max)
            }
            Surface::Plane { patch_radius, .. } => *patch_radius,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        match self {
            Surface::Sphere { center, .. } => Vector3::from(*center),
            Surface::Box { .. } => Vector3::zeros(),
            Surface::Plane { normal, offset, .. } => {
                Vector3::from(*normal).normalize() * *offset
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Surface::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Surface::Box { half_extents } => {
                let e = half_extents;
                8.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
            }
            Surface::Plane { patch_radius, .. } => {
                std::f64::consts::PI * patch_radius * patch_radius
            }
        }
    }
}

/// Ground truth bundled with a synthetic scene; serialized next to the
/// generated assets so evaluation can recover it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruth {
    pub surface: Surface,
}

impl GroundTruth {
    /// Unsigned distance from `p` to the surface (exact for all variants).
    pub fn distance(&self, p: Vector3<f64>) -> f64 {
        self.surface.sdf(p).abs()
    }

    pub fn sample_points<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
        (0..n).map(|_| self.surface.sample(rng).0).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub surface: Surface,
    pub n_gaussians: usize,
    /// Bound on the normal displacement of each mean off the surface.
    pub noise: f64,
    pub seed: u64,
    pub n_views: usize,
    pub image_size: usize,
    /// Opacities are drawn uniformly from this range (degenerates to a
    /// constant when both ends coincide).
    pub opacity_range: (f64, f64),
    /// Camera ring radius as a multiple of the object scale.
    pub camera_distance: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            surface: Surface::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            },
            n_gaussians: 5000,
            noise: 0.0,
            seed: 0,
            n_views: 16,
            image_size: 96,
            opacity_range: (1.0, 1.0),
            camera_distance: 3.0,
        }
    }
}

/// Builds a flat-gaussian scene on the requested surface together with a ring
/// of inward-looking cameras and the analytic ground truth.
pub fn make_synthetic_scene(spec: &SyntheticSpec) -> Result<(Scene, Vec<Camera>, GroundTruth)> {
    if spec.n_gaussians == 0 {
        return Err(Error::Validation("synthetic scene needs n_gaussians > 0".into()));
    }
    if spec.n_views == 0 {
        return Err(Error::Validation("synthetic scene needs n_views > 0".into()));
    }
    if spec.noise < 0.0 {
        return Err(Error::Validation("noise bound must be non-negative".into()));
    }
    let (lo, hi) = spec.opacity_range;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Validation(format!(
            "opacity range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let tangential = 0.8 * (spec.surface.area() / spec.n_gaussians as f64).sqrt();
    let thin = (0.01 * spec.surface.object_scale()).max(math::SCALE_FLOOR * 10.0);

    let mut gaussians = Vec::with_capacity(spec.n_gaussians);
    for _ in 0..spec.n_gaussians {
        let (p_surface, n) = spec.surface.sample(&mut rng);
        let shift = (rng.random::<f64>() * 2.0 - 1.0) * spec.noise;
        let mean = p_surface + n * shift;

        let (t1, t2) = math::orthonormal_tangents(n);
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        let (c, s) = (theta.cos(), theta.sin());
        let u1 = t1 * c + t2 * s;
        let u2 = -t1 * s + t2 * c;
        // Thin axis last: scales (tangential, tangential, thin).
        let r = Matrix3::from_columns(&[u1, u2, n]);
        let rot = math::matrix_to_quat(&r);

        let opacity = if hi > lo {
            lo + (hi - lo) * rng.random::<f64>()
        } else {
            lo
        };

        let target = color_pattern(p_surface, n);
        let f_dc = (target - Vector3::repeat(0.5)) / math::SH_C0;

        gaussians.push(Gaussian3D {
            mean,
            log_scale: Vector3::new(tangential.ln(), tangential.ln(), thin.ln()),
            rot,
            opacity_logit: math::logit(opacity),
            sh: vec![f_dc],
        });
    }

    let scene = Scene::new(gaussians, 0)?;
    let cameras = make_cameras(spec);
    let gt = GroundTruth {
        surface: spec.surface.clone(),
    };
    Ok((scene, cameras, gt))
}

/// Smooth per-point target color in [0.1, 0.9]; gives the photometric losses
/// real texture to latch onto.
fn color_pattern(p: Vector3<f64>, n: Vector3<f64>) -> Vector3<f64> {
    let mut c = Vector3::repeat(0.5) + n * 0.2;
    c[0] += 0.15 * (3.0 * p[0]).sin();
    c[1] += 0.15 * (3.0 * p[1]).sin();
    c[2] += 0.15 * (3.0 * p[2]).sin();
    c.map(|v| v.clamp(0.1, 0.9))
}

fn make_cameras(spec: &SyntheticSpec) -> Vec<Camera> {
    let center = spec.surface.center();
    let dist = spec.camera_distance * spec.surface.object_scale();
    let focal = 1.1 * spec.image_size as f64;
    let plane_normal = match &spec.surface {
        Surface::Plane { normal, .. } => Some(Vector3::from(*normal).normalize()),
        _ => None,
    };

    let n = spec.n_views;
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        let dir = match plane_normal {
            // Planes are only visible from one side: place views on a cone
            // around the normal.
            Some(nrm) => {
                let (t1, t2) = math::orthonormal_tangents(nrm);
                let phi = golden * i as f64;
                let tilt = 0.2 + 0.5 * (i as f64 + 0.5) / n as f64;
                (nrm * (1.0 - tilt) + (t1 * phi.cos() + t2 * phi.sin()) * tilt).normalize()
            }
            None => {
                // Fibonacci sphere, poles excluded so the up hint stays valid.
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), z, r * phi.sin())
            }
        };
        let eye = center + dir * dist;
        cams.push(Camera::look_at(
            eye,
            center,
            Vector3::new(0.0, 1.0, 0.0),
            spec.image_size,
            spec.image_size,
            focal,
        ));
    }
    cams
}
