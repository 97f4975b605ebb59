//! CPU tile rasterizer for gaussian scenes: forward color and depth renders
//! plus the analytic backward pass (in [`backward`]).
//!
//! Splats are depth-sorted globally once per frame and composited
//! front-to-back per pixel, so rendering is deterministic regardless of
//! thread count.

pub mod backward;

pub use backward::{backward_render, backward_render_raw};

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::scene::{Camera, Gaussian3D, Scene};

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Pixel-space covariance dilation guarding against sub-pixel splats.
pub const COV2D_DILATION: f64 = 0.3;
/// Contributions below this effective alpha are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Effective alpha ceiling keeping transmittance strictly positive.
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Linear-light RGB image with f64 channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels.
    pub pixels: Vec<Vector3<f64>>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            pixels: vec![Vector3::zeros(); width * height],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Vector3<f64> {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: Vector3<f64>) {
        self.pixels[y * self.width + x] = c;
    }

    /// One channel as a flat plane (used by the structural similarity code).
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.pixels.iter().map(|p| p[c]).collect()
    }
}

/// Per-pixel expected depth under the compositing weights, with the
/// accumulated alpha kept as a coverage measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// 0 where coverage is below [`DepthMap::COVERAGE_MIN`].
    pub depth: Vec<f64>,
    /// Accumulated alpha in [0, 1].
    pub coverage: Vec<f64>,
}

impl DepthMap {
    /// Pixels accumulating less alpha than this report no depth.
    pub const COVERAGE_MIN: f64 = 0.5;

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.depth[i], self.coverage[i])
    }
}

/// A gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub gaussian: usize,
    pub mean2d: Vector2<f64>,
    /// Projected covariance including the dilation term.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z of the mean.
    pub depth: f64,
    pub color: Vector3<f64>,
    pub alpha: f64,
    /// Compositing reach: three standard deviations of the largest axis.
    pub radius: f64,
}

/// Projection Jacobian at a camera-space point.
#[inline]
pub(crate) fn projection_jacobian(cam: &Camera, p: Vector3<f64>) -> [[f64; 3]; 2] {
    let z = p[2];
    [
        [cam.fx / z, 0.0, -cam.fx * p[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * p[1] / (z * z)],
    ]
}

/// Projects one gaussian; `None` when it is culled (behind the near plane or
/// its 3-sigma ellipse misses the viewport).
pub fn project_gaussian(g: &Gaussian3D, cam: &Camera, index: usize) -> Option<Splat2D> {
    let p_cam = cam.to_camera(g.mean);
    if p_cam[2] <= NEAR_PLANE {
        return None;
    }
    let (u, v) = cam.project(p_cam);

    let j = projection_jacobian(cam, p_cam);
    let w = cam.rotation();
    let cov3d = g.covariance();
    // m = J * W (2x3), cov2d = m cov3d m^T + dilation.
    let mut m = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            for k in 0..3 {
                m[r][c] += j[r][k] * w[(k, c)];
            }
        }
    }
    let mut cov2d = Matrix2::zeros();
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += m[r][a] * cov3d[(a, b)] * m[c][b];
                }
            }
            cov2d[(r, c)] = acc;
        }
    }
    cov2d[(0, 0)] += COV2D_DILATION;
    cov2d[(1, 1)] += COV2D_DILATION;

    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if det <= 0.0 {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();

    if u + radius < 0.0
        || u - radius > cam.width as f64
        || v + radius < 0.0
        || v - radius > cam.height as f64
    {
        return None;
    }

    let dir_raw = g.mean - cam.center();
    let dir = dir_raw / dir_raw.norm().max(1e-12);
    Some(Splat2D {
        gaussian: index,
        mean2d: Vector2::new(u, v),
        cov2d,
        conic,
        depth: p_cam[2],
        color: crate::math::sh_to_color(&g.sh, dir),
        alpha: g.opacity(),
        radius,
    })
}

/// Frame preparation shared by the forward and backward passes: projected
/// splats in global front-to-back order plus per-tile splat lists.
pub(crate) struct Frame {
    pub splats: Vec<Splat2D>,
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

pub(crate) fn prepare_frame(scene: &Scene, cam: &Camera) -> Frame {
    let mut splats: Vec<Splat2D> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, cam, i))
        .collect();
    // Global front-to-back order; gaussian id breaks depth ties so the
    // composite order is total.
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.gaussian.cmp(&b.gaussian)));

    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.mean2d[0] - s.radius).floor().max(0.0) as usize) / TILE_SIZE;
        let y0 = ((s.mean2d[1] - s.radius).floor().max(0.0) as usize) / TILE_SIZE;
        let x1 = (((s.mean2d[0] + s.radius).ceil() as usize).min(cam.width.saturating_sub(1)))
            / TILE_SIZE;
        let y1 = (((s.mean2d[1] + s.radius).ceil() as usize).min(cam.height.saturating_sub(1)))
            / TILE_SIZE;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    Frame {
        splats,
        tiles,
        tiles_x,
    }
}

#[inline]
fn effective_alpha(s: &Splat2D, px: f64, py: f64) -> f64 {
    let d = Vector2::new(px - s.mean2d[0], py - s.mean2d[1]);
    let power = -0.5 * (d.dot(&(s.conic * d)));
    (s.alpha * power.exp()).min(ALPHA_MAX)
}

/// Renders the scene to an RGB image (black background).
pub fn render_image(scene: &Scene, cam: &Camera) -> Image {
    let frame = prepare_frame(scene, cam);
    let mut img = Image::new(cam.width, cam.height);

    let tile_results: Vec<(usize, Vec<Vector3<f64>>)> = (0..frame.tiles.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % frame.tiles_x;
            let ty = ti / frame.tiles_x;
            let x_end = ((tx + 1) * TILE_SIZE).min(cam.width);
            let y_end = ((ty + 1) * TILE_SIZE).min(cam.height);
            let mut buf = vec![Vector3::zeros(); TILE_SIZE * TILE_SIZE];
            for y in ty * TILE_SIZE..y_end {
                for x in tx * TILE_SIZE..x_end {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut color = Vector3::zeros();
                    let mut transmittance = 1.0;
                    for &si in &frame.tiles[ti] {
                        let s = &frame.splats[si as usize];
                        let a = effective_alpha(s, px, py);
                        if a < ALPHA_SKIP {
                            continue;
                        }
                        color += s.color * (a * transmittance);
                        transmittance *= 1.0 - a;
                        if transmittance < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    buf[(y - ty * TILE_SIZE) * TILE_SIZE + (x - tx * TILE_SIZE)] = color;
                }
            }
            (ti, buf)
        })
        .collect();

    for (ti, buf) in tile_results {
        let tx = ti % frame.tiles_x;
        let ty = ti / frame.tiles_x;
        let x_end = ((tx + 1) * TILE_SIZE).min(cam.width);
        let y_end = ((ty + 1) * TILE_SIZE).min(cam.height);
        for y in ty * TILE_SIZE..y_end {
            for x in tx * TILE_SIZE..x_end {
                img.set_pixel(x, y, buf[(y - ty * TILE_SIZE) * TILE_SIZE + (x - tx * TILE_SIZE)]);
            }
        }
    }
    img
}

/// Renders expected depth under the compositing weights.
pub fn render_depth(scene: &Scene, cam: &Camera) -> DepthMap {
    let frame = prepare_frame(scene, cam);
    let n = cam.width * cam.height;
    let mut out = DepthMap {
        width: cam.width,
        height: cam.height,
        depth: vec![0.0; n],
        coverage: vec![0.0; n],
    };

    let tile_results: Vec<(usize, Vec<(f64, f64)>)> = (0..frame.tiles.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % frame.tiles_x;
            let ty = ti / frame.tiles_x;
            let x_end = ((tx + 1) * TILE_SIZE).min(cam.width);
            let y_end = ((ty + 1) * TILE_SIZE).min(cam.height);
            let mut buf = vec![(0.0, 0.0); TILE_SIZE * TILE_SIZE];
            for y in ty * TILE_SIZE..y_end {
                for x in tx * TILE_SIZE..x_end {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut depth_sum = 0.0;
                    let mut weight_sum = 0.0;
                    let mut transmittance = 1.0;
                    for &si in &frame.tiles[ti] {
                        let s = &frame.splats[si as usize];
                        let a = effective_alpha(s, px, py);
                        if a < ALPHA_SKIP {
                            continue;
                        }
                        let w = a * transmittance;
                        depth_sum += s.depth * w;
                        weight_sum += w;
                        transmittance *= 1.0 - a;
                        if transmittance < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    let depth = if weight_sum >= DepthMap::COVERAGE_MIN {
                        depth_sum / weight_sum.max(1e-12)
                    } else {
                        0.0
                    };
                    buf[(y - ty * TILE_SIZE) * TILE_SIZE + (x - tx * TILE_SIZE)] =
                        (depth, weight_sum.clamp(0.0, 1.0));
                }
            }
            (ti, buf)
        })
        .collect();

    for (ti, buf) in tile_results {
        let tx = ti % frame.tiles_x;
        let ty = ti / frame.tiles_x;
        let x_end = ((tx + 1) * TILE_SIZE).min(cam.width);
        let y_end = ((ty + 1) * TILE_SIZE).min(cam.height);
        for y in ty * TILE_SIZE..y_end {
            for x in tx * TILE_SIZE..x_end {
                let (d, c) = buf[(y - ty * TILE_SIZE) * TILE_SIZE + (x - tx * TILE_SIZE)];
                let i = y * cam.width + x;
                out.depth[i] = d;
                out.coverage[i] = c;
            }
        }
    }
    out
}
