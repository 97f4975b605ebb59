//! Oriented point sampling on a density level set.
//!
//! Rays through covered depth-map pixels are searched for the first crossing
//! of `density = lambda`; each crossing yields a point and a camera-facing
//! unit normal from the density gradient. The search window is sized by the
//! closest gaussian's standard deviation along the ray, so thin and fat
//! splats both bracket their crossing.

use nalgebra::Vector3;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{self, EvalMode};
use crate::knn::NeighborIndex;
use crate::render::{render_depth, DepthMap};
use crate::scene::{Camera, Gaussian3D, Scene};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelSetConfig {
    /// Density level to sample.
    pub lambda: f64,
    pub n_rays_per_view: usize,
    /// Uniform density probes per ray before interpolation.
    pub n_samples_per_ray: usize,
    /// Half-width of the search window in units of sigma along the ray.
    pub sigma_span: f64,
    pub seed: u64,
}

impl Default for LevelSetConfig {
    fn default() -> Self {
        LevelSetConfig {
            lambda: 0.3,
            n_rays_per_view: 4000,
            n_samples_per_ray: 21,
            sigma_span: 3.0,
            seed: 0,
        }
    }
}

impl LevelSetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Validation(format!(
                "level-set lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.n_samples_per_ray < 2 {
            return Err(Error::Validation(
                "need at least 2 samples per ray".into(),
            ));
        }
        if !(self.sigma_span > 0.0) {
            return Err(Error::Validation(format!(
                "sigma span must be positive, got {}",
                self.sigma_span
            )));
        }
        Ok(())
    }
}

/// Relative density residual every emitted point satisfies.
pub const LEVEL_TOLERANCE: f64 = 1e-3;
const MAX_BISECTIONS: usize = 8;
const MIN_GRADIENT: f64 = 1e-9;

#[derive(Debug, Clone, Default)]
pub struct OrientedPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    /// Index of the camera whose ray produced each point.
    pub view_id: Vec<u32>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vector3<f64>, n: Vector3<f64>, view: u32) {
        self.points.push(p);
        self.normals.push(n);
        self.view_id.push(view);
    }
}

/// Standard deviation of the gaussian along direction `v`: sqrt(v' Sigma v).
pub fn directional_std(g: &Gaussian3D, v: Vector3<f64>) -> f64 {
    (v.dot(&(g.covariance() * v))).sqrt()
}

/// Searches the ray `p + t v` for the first density crossing of `lambda`,
/// scanning t in `[-span*sigma, +span*sigma]` from the camera side. Returns
/// the crossing point and its camera-facing unit normal, or None when the
/// window never brackets the level (or the refined point fails the residual
/// check, or the gradient vanishes).
pub fn ray_level_crossing(
    p: Vector3<f64>,
    v: Vector3<f64>,
    g: usize,
    scene: &Scene,
    index: &NeighborIndex,
    cfg: &LevelSetConfig,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let sigma = directional_std(&scene.gaussians[g], v);
    if !(sigma > 0.0) {
        return None;
    }
    let span = cfg.sigma_span * sigma;
    let n = cfg.n_samples_per_ray;
    let dens = |t: f64| field::density(p + v * t, scene, index, EvalMode::Local);

    let step = 2.0 * span / (n - 1) as f64;
    let mut t_prev = -span;
    let mut d_prev = dens(t_prev);
    let mut bracket = None;
    for i in 1..n {
        let t = -span + i as f64 * step;
        let d = dens(t);
        if (d_prev - cfg.lambda) * (d - cfg.lambda) <= 0.0 && d_prev != d {
            bracket = Some((t_prev, d_prev, t, d));
            break;
        }
        t_prev = t;
        d_prev = d;
    }
    let (mut t_lo, mut d_lo, mut t_hi, d_hi) = bracket?;

    // Linear interpolation first; bisect the bracket only while the residual
    // check fails, then give up.
    let mut t_star = t_lo + (cfg.lambda - d_lo) * (t_hi - t_lo) / (d_hi - d_lo);
    let mut d_star = dens(t_star);
    let mut iters = 0;
    while (d_star - cfg.lambda).abs() > LEVEL_TOLERANCE * cfg.lambda {
        if iters >= MAX_BISECTIONS {
            return None;
        }
        iters += 1;
        if (d_lo - cfg.lambda) * (d_star - cfg.lambda) <= 0.0 {
            t_hi = t_star;
        } else {
            t_lo = t_star;
            d_lo = d_star;
        }
        t_star = 0.5 * (t_lo + t_hi);
        d_star = dens(t_star);
    }

    let point = p + v * t_star;
    let grad = field::density_gradient(point, scene, index, EvalMode::Local);
    let norm = grad.norm();
    if norm < MIN_GRADIENT {
        return None;
    }
    let mut normal = grad / norm;
    let facing = normal.dot(&-v);
    if facing == 0.0 {
        return None;
    }
    if facing < 0.0 {
        normal = -normal;
    }
    Some((point, normal))
}

/// Renders every training depth map, samples covered pixels without
/// replacement, and gathers ray crossings in canonical (view, pixel) order.
pub fn sample_level_set(
    scene: &Scene,
    cams: &[Camera],
    cfg: &LevelSetConfig,
) -> Result<OrientedPointCloud> {
    cfg.validate()?;
    scene.validate()?;
    if cams.is_empty() {
        return Err(Error::Validation("no cameras for level-set sampling".into()));
    }
    let index = NeighborIndex::build(scene, NeighborIndex::DEFAULT_K)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut cloud = OrientedPointCloud::default();
    for (view, cam) in cams.iter().enumerate() {
        let depth = render_depth(scene, cam);
        let covered: Vec<(usize, usize)> = (0..cam.height)
            .flat_map(|y| (0..cam.width).map(move |x| (x, y)))
            .filter(|&(x, y)| depth.at(x, y).1 >= DepthMap::COVERAGE_MIN)
            .collect();
        if covered.is_empty() {
            continue;
        }
        let take = cfg.n_rays_per_view.min(covered.len());
        let mut chosen = rand::seq::index::sample(&mut rng, covered.len(), take).into_vec();
        chosen.sort_unstable();
        let hits: Vec<Option<(Vector3<f64>, Vector3<f64>)>> = chosen
            .par_iter()
            .map(|&ci| {
                let (x, y) = covered[ci];
                let (z, _) = depth.at(x, y);
                let p = cam.backproject(x as f64 + 0.5, y as f64 + 0.5, z);
                let v = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                let g = field::closest_gaussian(p, scene, &index, EvalMode::Local);
                ray_level_crossing(p, v, g, scene, &index, cfg)
            })
            .collect();
        for hit in hits.into_iter().flatten() {
            cloud.push(hit.0, hit.1, view as u32);
        }
    }
    if cloud.is_empty() {
        return Err(Error::EmptyPointSet(format!(
            "level-set sampling produced no points; lambda = {} may exceed the maximum density",
            cfg.lambda
        )));
    }
    Ok(cloud)
}

/// Splits by the axis-aligned bounding box of the camera centers: points
/// inside are foreground, the rest background.
pub fn split_fg_bg(
    cloud: &OrientedPointCloud,
    cams: &[Camera],
) -> (OrientedPointCloud, OrientedPointCloud) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for cam in cams {
        let c = cam.center();
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let mut fg = OrientedPointCloud::default();
    let mut bg = OrientedPointCloud::default();
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        let inside = (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]);
        let dst = if inside { &mut fg } else { &mut bg };
        dst.push(p, cloud.normals[i], cloud.view_id[i]);
    }
    (fg, bg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::synth::{make_synthetic_scene, Surface, SyntheticSpec};
    use nalgebra::Vector4;

    fn wall_scene() -> Scene {
        // One flat opaque gaussian: density along its normal is
        // exp(-t^2 / (2 s^2)), so the lambda crossing is at a known offset.
        let g = Gaussian3D {
            mean: Vector3::new(0.0, 0.0, 2.0),
            log_scale: Vector3::new(0.5_f64.ln(), 0.5_f64.ln(), 0.01_f64.ln()),
            rot: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 40.0,
            sh: vec![Vector3::zeros()],
        };
        Scene::new(vec![g], 0).unwrap()
    }

    #[test]
    fn wall_crossing_matches_closed_form() {
        let scene = wall_scene();
        let index = NeighborIndex::build(&scene, 4).unwrap();
        let cfg = LevelSetConfig::default();
        // Ray along +z through the wall at z = 2 with thin scale 0.01:
        // density exp(-u^2/(2*0.01^2)) = 0.3 at u = 0.01*sqrt(-2 ln 0.3).
        let p = Vector3::new(0.0, 0.0, 2.0);
        let v = Vector3::new(0.0, 0.0, 1.0);
        let (point, normal) = ray_level_crossing(p, v, 0, &scene, &index, &cfg).unwrap();
        let expect_u = 0.01 * (-2.0 * cfg.lambda.ln()).sqrt();
        // First crossing from the camera side is in front of the wall.
        assert!(
            (point.z - (2.0 - expect_u)).abs() < 1e-5,
            "crossing at z = {}",
            point.z
        );
        // Normal faces the camera (-z side).
        assert!(normal.dot(&-v) > 0.99);
        let d = field::density(point, &scene, &index, EvalMode::Local);
        assert!((d - cfg.lambda).abs() <= LEVEL_TOLERANCE * cfg.lambda);
    }

    #[test]
    fn ray_missing_the_level_returns_none() {
        let scene = wall_scene();
        let index = NeighborIndex::build(&scene, 4).unwrap();
        let cfg = LevelSetConfig {
            lambda: 2.0, // above the max density of 1
            ..Default::default()
        };
        let p = Vector3::new(0.0, 0.0, 2.0);
        let v = Vector3::new(0.0, 0.0, 1.0);
        assert!(ray_level_crossing(p, v, 0, &scene, &index, &cfg).is_none());
    }

    #[test]
    fn directional_std_matches_covariance() {
        let g = Gaussian3D {
            mean: Vector3::zeros(),
            log_scale: Vector3::new(1.0_f64.ln(), 2.0_f64.ln(), 3.0_f64.ln()),
            rot: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros()],
        };
        assert!((directional_std(&g, Vector3::y()) - 2.0).abs() < 1e-12);
        let q = math::quat_normalize(Vector4::new(0.9, 0.2, -0.3, 0.1));
        let rotated = Gaussian3D { rot: q, ..g.clone() };
        let r = math::quat_to_matrix(q);
        let v = (r * Vector3::y()).normalize();
        assert!((directional_std(&rotated, v) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn sphere_scene_yield_and_residuals() {
        let spec = SyntheticSpec {
            surface: Surface::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            },
            n_gaussians: 1200,
            n_views: 4,
            image_size: 48,
            ..Default::default()
        };
        let (scene, cams, _) = make_synthetic_scene(&spec).unwrap();
        let cfg = LevelSetConfig {
            n_rays_per_view: 300,
            seed: 3,
            ..Default::default()
        };
        let cloud = sample_level_set(&scene, &cams, &cfg).unwrap();
        assert!(cloud.len() > 0);
        let index = NeighborIndex::build(&scene, NeighborIndex::DEFAULT_K).unwrap();
        for (p, n) in cloud.points.iter().zip(&cloud.normals) {
            let d = field::density(*p, &scene, &index, EvalMode::Local);
            assert!((d - cfg.lambda).abs() <= LEVEL_TOLERANCE * cfg.lambda);
            assert!((n.norm() - 1.0).abs() < 1e-6);
            // Points sit near the unit sphere (the gaussians carpet it).
            assert!((p.norm() - 1.0).abs() < 0.3, "point at radius {}", p.norm());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = SyntheticSpec {
            surface: Surface::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            },
            n_gaussians: 400,
            n_views: 2,
            image_size: 32,
            ..Default::default()
        };
        let (scene, cams, _) = make_synthetic_scene(&spec).unwrap();
        let cfg = LevelSetConfig {
            n_rays_per_view: 100,
            seed: 9,
            ..Default::default()
        };
        let a = sample_level_set(&scene, &cams, &cfg).unwrap();
        let b = sample_level_set(&scene, &cams, &cfg).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.normals, b.normals);
        assert_eq!(a.view_id, b.view_id);
    }

    #[test]
    fn lambda_above_peak_errors() {
        let spec = SyntheticSpec {
            surface: Surface::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            },
            n_gaussians: 200,
            n_views: 2,
            image_size: 32,
            ..Default::default()
        };
        let (scene, cams, _) = make_synthetic_scene(&spec).unwrap();
        let cfg = LevelSetConfig {
            lambda: 50.0,
            n_rays_per_view: 50,
            ..Default::default()
        };
        assert!(matches!(
            sample_level_set(&scene, &cams, &cfg),
            Err(Error::EmptyPointSet(_))
        ));
    }

    #[test]
    fn fg_bg_partition() {
        let cams = vec![
            Camera::look_at(
                Vector3::new(3.0, 0.0, 0.0),
                Vector3::zeros(),
                Vector3::z(),
                32,
                32,
                40.0,
            ),
            Camera::look_at(
                Vector3::new(-3.0, 2.0, 1.0),
                Vector3::zeros(),
                Vector3::z(),
                32,
                32,
                40.0,
            ),
            Camera::look_at(
                Vector3::new(0.0, -2.0, -1.0),
                Vector3::zeros(),
                Vector3::z(),
                32,
                32,
                40.0,
            ),
        ];
        let mut cloud = OrientedPointCloud::default();
        cloud.push(Vector3::zeros(), Vector3::z(), 0); // inside the camera box
        cloud.push(Vector3::new(100.0, 0.0, 0.0), Vector3::z(), 1); // far outside
        let (fg, bg) = split_fg_bg(&cloud, &cams);
        assert_eq!(fg.len(), 1);
        assert_eq!(bg.len(), 1);
        assert_eq!(fg.points[0], Vector3::zeros());
        assert_eq!(fg.len() + bg.len(), cloud.len());
    }
}
