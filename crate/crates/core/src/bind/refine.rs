//! Joint refinement of a bound scene: photometric gradients flow through
//! the world-space gaussians back to mesh vertices, in-plane scales,
//! in-plane rotations, opacities and colors, while a normal-consistency
//! term keeps adjacent faces from folding. Barycentric slots stay fixed, so
//! gaussians remain exactly on their triangle planes at every step.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::{triangle_frame, world_rotation, BoundScene, ROT2_EPS};
use crate::error::{Error, Result};
use crate::image_loss::photometric_loss;
use crate::math;
use crate::mesh::TriangleMesh;
use crate::metrics::psnr;
use crate::optim::{Adam, AdamParams};
use crate::render::{backward_render_raw, render_image, Image};
use crate::scene::Camera;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineWeights {
    pub photometric: f64,
    /// Weight of `1 - SSIM` inside the photometric term.
    pub dssim: f64,
    pub normal_consistency: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        RefineWeights {
            photometric: 1.0,
            dssim: 0.2,
            normal_consistency: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineRates {
    /// Scaled by the mesh bounding-box diagonal; kept well below the
    /// appearance rates so the mesh cannot collapse early.
    pub vertices: f64,
    pub log_scales: f64,
    pub rot2: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for RefineRates {
    fn default() -> Self {
        RefineRates {
            vertices: 1e-4,
            log_scales: 5e-3,
            rot2: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iters: usize,
    pub weights: RefineWeights,
    pub lr: RefineRates,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iters: 2000,
            weights: RefineWeights::default(),
            lr: RefineRates::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineLogRow {
    pub iter: usize,
    pub photometric: f64,
    pub normal_consistency: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RefineLog {
    pub rows: Vec<RefineLogRow>,
    /// Count of rot2 values that collapsed to zero and fell back to (1,0).
    pub rot2_fallbacks: usize,
}

impl RefineLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,photometric,normal_consistency,total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e}\n",
                r.iter, r.photometric, r.normal_consistency, r.total
            ));
        }
        out
    }
}

/// Interior manifold edges as face pairs, each edge once, ordered by
/// discovery along the face list. Edges with more than two faces pair every
/// extra face against the first.
fn adjacent_face_pairs(mesh: &TriangleMesh) -> Vec<(usize, usize)> {
    let mut first_face: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pairs = Vec::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        for e in 0..3 {
            let a = face[e];
            let b = face[(e + 1) % 3];
            let key = (a.min(b), a.max(b));
            match first_face.get(&key) {
                Some(&g) => pairs.push((g, f)),
                None => {
                    first_face.insert(key, f);
                }
            }
        }
    }
    pairs
}

/// Mean over adjacent face pairs of (1 - cos of the dihedral between their
/// normals): zero exactly when the mesh is locally flat. Returns the loss
/// and its gradient with respect to the vertices. Pairs touching a
/// degenerate face are skipped.
pub fn normal_consistency(mesh: &TriangleMesh) -> (f64, Vec<Vector3<f64>>) {
    let pairs = adjacent_face_pairs(mesh);
    let mut d_vertices = vec![Vector3::zeros(); mesh.vertices.len()];
    if pairs.is_empty() {
        return (0.0, d_vertices);
    }
    let crosses: Vec<Vector3<f64>> = (0..mesh.faces.len())
        .map(|f| mesh.face_normal_raw(f))
        .collect();
    let live: Vec<(usize, usize)> = pairs
        .into_iter()
        .filter(|&(f, g)| crosses[f].norm() > 1e-12 && crosses[g].norm() > 1e-12)
        .collect();
    if live.is_empty() {
        return (0.0, d_vertices);
    }
    let inv_n = 1.0 / live.len() as f64;
    let mut loss = 0.0;
    let mut d_normal = vec![Vector3::zeros(); mesh.faces.len()];
    for &(f, g) in &live {
        let nf = crosses[f].normalize();
        let ng = crosses[g].normalize();
        loss += (1.0 - nf.dot(&ng)) * inv_n;
        d_normal[f] -= ng * inv_n;
        d_normal[g] -= nf * inv_n;
    }
    for (f, dn) in d_normal.iter().enumerate() {
        if dn.norm_squared() == 0.0 {
            continue;
        }
        let c = crosses[f];
        let cn = c.norm();
        if cn <= 1e-12 {
            continue;
        }
        let n = c / cn;
        let dc = (dn - n * n.dot(dn)) / cn;
        let [i0, i1, i2] = mesh.faces[f];
        let [v0, v1, v2] = mesh.face_vertices(f);
        let (da, db) = cross_backward(v1 - v0, v2 - v0, dc);
        d_vertices[i1 as usize] += da;
        d_vertices[i2 as usize] += db;
        d_vertices[i0 as usize] -= da + db;
    }
    (loss, d_vertices)
}

/// For c = a x b and upstream g = dL/dc: dL/da = b x g, dL/db = g x a.
fn cross_backward(
    a: Vector3<f64>,
    b: Vector3<f64>,
    g: Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    (b.cross(&g), g.cross(&a))
}

/// Gradients of a scalar through the world rotation matrix back to the
/// triangle vertices and the rotation complex number.
struct FrameBack {
    d_v: [Vector3<f64>; 3],
    d_rot2: Vector2<f64>,
}

/// Backward pass of `world_rotation(triangle_frame(mesh, tri), unit(rot2))`
/// given `d_rg = dL/dR_g`. The rot2 gradient is zero in the degenerate
/// fallback case (the fallback value is a constant).
fn world_rotation_backward(
    v: [Vector3<f64>; 3],
    rot2: Vector2<f64>,
    d_rg: &Matrix3<f64>,
) -> FrameBack {
    let a = v[1] - v[0];
    let b = v[2] - v[0];
    let c = a.cross(&b);
    let cn = c.norm();
    let n = c / cn;
    let w = a - n * a.dot(&n);
    let wn = w.norm();
    let r1 = w / wn;
    let r2 = n.cross(&r1);
    let rnorm = rot2.norm();
    let degenerate = rnorm < ROT2_EPS;
    let unit = if degenerate {
        Vector2::new(1.0, 0.0)
    } else {
        rot2 / rnorm
    };

    let d0 = d_rg.column(0).into_owned();
    let d1 = d_rg.column(1).into_owned();
    let d2 = d_rg.column(2).into_owned();

    // R_g = [n, x'r1 + y'r2, -y'r1 + x'r2].
    let mut d_n = d0;
    let mut d_r1 = d1 * unit.x - d2 * unit.y;
    let d_r2 = d1 * unit.y + d2 * unit.x;
    let d_unit = Vector2::new(d1.dot(&r1) + d2.dot(&r2), d1.dot(&r2) - d2.dot(&r1));

    // r2 = n x r1.
    d_n += r1.cross(&d_r2);
    d_r1 += d_r2.cross(&n);

    // r1 = w / |w|.
    let d_w = (d_r1 - r1 * r1.dot(&d_r1)) / wn;

    // w = a - (a.n) n.
    let mut d_a = d_w - n * n.dot(&d_w);
    d_n += -(a * d_w.dot(&n)) - d_w * a.dot(&n);

    // n = c / |c|.
    let d_c = (d_n - n * n.dot(&d_n)) / cn;

    // c = a x b.
    let (da_c, d_b) = cross_backward(a, b, d_c);
    d_a += da_c;

    let d_rot2 = if degenerate {
        Vector2::zeros()
    } else {
        // unit = rot2 / |rot2|: project out the radial direction.
        (d_unit - unit * unit.dot(&d_unit)) / rnorm
    };
    FrameBack {
        d_v: [-(d_a + d_b), d_a, d_b],
        d_rot2,
    }
}

/// Per-gaussian parameter gradients plus its three vertex contributions.
struct BoundGrads {
    face: [u32; 3],
    d_v: [Vector3<f64>; 3],
    d_log_scale2: Vector2<f64>,
    d_rot2: Vector2<f64>,
    d_opacity_logit: f64,
    d_sh: Vec<Vector3<f64>>,
}

/// Chains raw render gradients (world mean, world covariance, opacity, sh)
/// through the bound parameterization. `weight` scales every output.
fn chain_bound_gradients(
    bs: &BoundScene,
    thin: f64,
    d_mean: &[Vector3<f64>],
    d_cov3d: &[Matrix3<f64>],
    d_opacity: &[f64],
    d_sh: &[Vec<Vector3<f64>>],
    weight: f64,
) -> Vec<BoundGrads> {
    bs.bound
        .par_iter()
        .enumerate()
        .map(|(i, bg)| {
            let tri = bg.tri_id as usize;
            let face = bs.mesh.faces[tri];
            let v = bs.mesh.face_vertices(tri);
            let frame = triangle_frame(&bs.mesh, tri).expect("validated mesh face");
            let rnorm = bg.rot2.norm();
            let unit = if rnorm < ROT2_EPS {
                Vector2::new(1.0, 0.0)
            } else {
                bg.rot2 / rnorm
            };
            let rot = world_rotation(&frame, unit);
            let s1 = bg.log_scale2.x.exp();
            let s2 = bg.log_scale2.y.exp();

            // Covariance path: S = R M R^T with M = diag(thin^2, s1^2, s2^2),
            // so dL/dR = (G + G^T) R M and dL/d log s_j = s_j^2 (R^T (G+G^T) R)_jj.
            let sym = d_cov3d[i] + d_cov3d[i].transpose();
            let m = Matrix3::from_diagonal(&Vector3::new(thin * thin, s1 * s1, s2 * s2));
            let d_rot = sym * rot * m;
            let rtgr = rot.transpose() * sym * rot;
            let d_log_scale2 =
                Vector2::new(s1 * s1 * rtgr[(1, 1)], s2 * s2 * rtgr[(2, 2)]) * weight;
            // The thin scale is a fixed fraction of the mesh mean edge
            // length; its vertex dependence is smaller than the in-plane
            // terms by (thin/s)^2 ~ 1e-8 and is dropped.
            let back = world_rotation_backward(v, bg.rot2, &d_rot);

            // Mean path: mu = sum_k bary_k v_k.
            let mut d_v = back.d_v;
            for k in 0..3 {
                d_v[k] = (d_v[k] + d_mean[i] * bg.bary[k]) * weight;
            }
            BoundGrads {
                face,
                d_v,
                d_log_scale2,
                d_rot2: back.d_rot2 * weight,
                d_opacity_logit: d_opacity[i] * weight,
                d_sh: d_sh[i].iter().map(|g| g * weight).collect(),
            }
        })
        .collect()
}

struct RefineOptimizers {
    vertices: Adam,
    scales: Adam,
    rot2: Adam,
    opacity: Adam,
    sh: Adam,
}

impl RefineOptimizers {
    fn new(bs: &BoundScene, lr: &RefineRates, scale: f64, k_sh: usize) -> RefineOptimizers {
        let n = bs.len();
        RefineOptimizers {
            vertices: Adam::new(3 * bs.mesh.vertices.len(), AdamParams::with_lr(lr.vertices * scale)),
            scales: Adam::new(2 * n, AdamParams::with_lr(lr.log_scales)),
            rot2: Adam::new(2 * n, AdamParams::with_lr(lr.rot2)),
            opacity: Adam::new(n, AdamParams::with_lr(lr.opacity)),
            sh: Adam::new(3 * k_sh * n, AdamParams::with_lr(lr.sh)),
        }
    }
}

/// Photometric-loss gradients with respect to the bound parameterization:
/// mesh vertices plus the per-gaussian in-plane parameters.
#[derive(Debug, Clone)]
pub struct BoundPhotoGrads {
    pub d_vertices: Vec<Vector3<f64>>,
    pub d_log_scale2: Vec<Vector2<f64>>,
    pub d_rot2: Vec<Vector2<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_sh: Vec<Vec<Vector3<f64>>>,
}

/// Single-view photometric loss of the bound scene and its gradients chained
/// through rendering and the bound parameterization. This is one refinement
/// step's photometric term without the optimizer update.
pub fn photometric_bound_loss(
    bs: &BoundScene,
    cam: &Camera,
    target: &Image,
    dssim_weight: f64,
) -> Result<(f64, BoundPhotoGrads)> {
    let (scene, _) = bs.to_scene()?;
    let rendered = render_image(&scene, cam);
    let (loss, pix_grad) = photometric_loss(&rendered, target, dssim_weight)?;
    let mut grad_img = Image::new(cam.width, cam.height);
    grad_img.pixels = pix_grad;
    let raw = backward_render_raw(&scene, cam, &grad_img);
    let per = chain_bound_gradients(
        bs,
        bs.thin_scale(),
        &raw.d_mean,
        &raw.d_cov3d,
        &raw.d_opacity_logit,
        &raw.d_sh,
        1.0,
    );
    let mut out = BoundPhotoGrads {
        d_vertices: vec![Vector3::zeros(); bs.mesh.vertices.len()],
        d_log_scale2: Vec::with_capacity(per.len()),
        d_rot2: Vec::with_capacity(per.len()),
        d_opacity_logit: Vec::with_capacity(per.len()),
        d_sh: Vec::with_capacity(per.len()),
    };
    for bg in per {
        for k in 0..3 {
            out.d_vertices[bg.face[k] as usize] += bg.d_v[k];
        }
        out.d_log_scale2.push(bg.d_log_scale2);
        out.d_rot2.push(bg.d_rot2);
        out.d_opacity_logit.push(bg.d_opacity_logit);
        out.d_sh.push(bg.d_sh);
    }
    Ok((loss, out))
}

/// Mean PSNR of the bound scene's renders against the given views.
pub fn evaluate_psnr(bs: &BoundScene, images: &[Image], cams: &[Camera]) -> Result<f64> {
    if images.len() != cams.len() || cams.is_empty() {
        return Err(Error::Validation("images and cameras must align".into()));
    }
    let (scene, _) = bs.to_scene()?;
    let mut total = 0.0;
    for (img, cam) in images.iter().zip(cams) {
        total += psnr(&render_image(&scene, cam), img)?.0;
    }
    Ok(total / cams.len() as f64)
}

/// Joint mesh + gaussian refinement. Each step renders through the bound
/// parameterization from one camera, adds the normal-consistency term, and
/// updates vertices, in-plane scales, rotations, opacities and colors.
pub fn refine(
    bs: &BoundScene,
    images: &[Image],
    cams: &[Camera],
    cfg: &RefineConfig,
) -> Result<(BoundScene, RefineLog)> {
    let mut bs = bs.clone();
    let mut log = RefineLog::default();
    if cfg.iters == 0 {
        return Ok((bs, log));
    }
    bs.validate()?;
    if bs.is_empty() {
        return Err(Error::EmptyScene);
    }
    if images.len() != cams.len() || cams.is_empty() {
        return Err(Error::Validation(format!(
            "{} images for {} cameras",
            images.len(),
            cams.len()
        )));
    }
    for (img, cam) in images.iter().zip(cams) {
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::Validation(
                "image dimensions do not match camera".into(),
            ));
        }
        cam.validate()?;
    }
    let (lo, hi) = bs.mesh.bounds();
    let scene_scale = (hi - lo).norm().max(1e-9);
    let k_sh = math::sh_coeff_count(bs.sh_degree);
    let mut opt = RefineOptimizers::new(&bs, &cfg.lr, scene_scale, k_sh);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let n = bs.len();
    let nv = bs.mesh.vertices.len();

    for iter in 0..cfg.iters {
        let ci = rng.random_range(0..cams.len());
        let cam = &cams[ci];
        let (scene, warns) = bs.to_scene()?;
        log.rot2_fallbacks += warns;
        let thin = bs.thin_scale();

        let mut d_vertices = vec![Vector3::zeros(); nv];
        let mut photo = 0.0;
        let mut per_gaussian: Vec<BoundGrads> = Vec::new();
        if cfg.weights.photometric != 0.0 {
            let rendered = render_image(&scene, cam);
            let (p, pix_grad) = photometric_loss(&rendered, &images[ci], cfg.weights.dssim)?;
            photo = p;
            let mut grad_img = Image::new(cam.width, cam.height);
            grad_img.pixels = pix_grad;
            let raw = backward_render_raw(&scene, cam, &grad_img);
            per_gaussian = chain_bound_gradients(
                &bs,
                thin,
                &raw.d_mean,
                &raw.d_cov3d,
                &raw.d_opacity_logit,
                &raw.d_sh,
                cfg.weights.photometric,
            );
            for bg in &per_gaussian {
                for k in 0..3 {
                    d_vertices[bg.face[k] as usize] += bg.d_v[k];
                }
            }
        }

        let mut nc = 0.0;
        if cfg.weights.normal_consistency != 0.0 {
            let (loss, d_nc) = normal_consistency(&bs.mesh);
            nc = loss;
            for (dv, d) in d_vertices.iter_mut().zip(&d_nc) {
                *dv += d * cfg.weights.normal_consistency;
            }
        }

        let total = cfg.weights.photometric * photo + cfg.weights.normal_consistency * nc;
        let finite = total.is_finite()
            && d_vertices.iter().all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite())
            && per_gaussian.iter().all(|g| {
                g.d_log_scale2.x.is_finite()
                    && g.d_log_scale2.y.is_finite()
                    && g.d_rot2.x.is_finite()
                    && g.d_rot2.y.is_finite()
                    && g.d_opacity_logit.is_finite()
            });
        if !finite {
            return Err(Error::NonFinite {
                quantity: "refinement loss".into(),
                iteration: iter,
                detail: format!(
                    "camera {ci}, photometric {photo:.3e}, normal consistency {nc:.3e}, {n} bound gaussians, {nv} vertices"
                ),
            });
        }

        // Pack, step, unpack.
        let mut vflat = vec![0.0; 3 * nv];
        let mut gvflat = vec![0.0; 3 * nv];
        for (i, v) in bs.mesh.vertices.iter().enumerate() {
            for c in 0..3 {
                vflat[3 * i + c] = v[c];
                gvflat[3 * i + c] = d_vertices[i][c];
            }
        }
        opt.vertices.step(&mut vflat, &gvflat)?;
        for (i, v) in bs.mesh.vertices.iter_mut().enumerate() {
            for c in 0..3 {
                v[c] = vflat[3 * i + c];
            }
        }
        if !per_gaussian.is_empty() {
            let mut scales = vec![0.0; 2 * n];
            let mut g_scales = vec![0.0; 2 * n];
            let mut rot2 = vec![0.0; 2 * n];
            let mut g_rot2 = vec![0.0; 2 * n];
            let mut opac = vec![0.0; n];
            let mut g_opac = vec![0.0; n];
            let mut sh = vec![0.0; 3 * k_sh * n];
            let mut g_sh = vec![0.0; 3 * k_sh * n];
            for (i, (bg, pg)) in bs.bound.iter().zip(&per_gaussian).enumerate() {
                scales[2 * i] = bg.log_scale2.x;
                scales[2 * i + 1] = bg.log_scale2.y;
                g_scales[2 * i] = pg.d_log_scale2.x;
                g_scales[2 * i + 1] = pg.d_log_scale2.y;
                rot2[2 * i] = bg.rot2.x;
                rot2[2 * i + 1] = bg.rot2.y;
                g_rot2[2 * i] = pg.d_rot2.x;
                g_rot2[2 * i + 1] = pg.d_rot2.y;
                opac[i] = bg.opacity_logit;
                g_opac[i] = pg.d_opacity_logit;
                for b in 0..k_sh {
                    for c in 0..3 {
                        sh[(i * k_sh + b) * 3 + c] = bg.sh[b][c];
                        g_sh[(i * k_sh + b) * 3 + c] = pg.d_sh[b][c];
                    }
                }
            }
            opt.scales.step(&mut scales, &g_scales)?;
            opt.rot2.step(&mut rot2, &g_rot2)?;
            opt.opacity.step(&mut opac, &g_opac)?;
            opt.sh.step(&mut sh, &g_sh)?;
            for (i, bg) in bs.bound.iter_mut().enumerate() {
                bg.log_scale2 = Vector2::new(scales[2 * i], scales[2 * i + 1]);
                bg.rot2 = Vector2::new(rot2[2 * i], rot2[2 * i + 1]);
                bg.opacity_logit = opac[i];
                for b in 0..k_sh {
                    for c in 0..3 {
                        bg.sh[b][c] = sh[(i * k_sh + b) * 3 + c];
                    }
                }
            }
        }
        log.rows.push(RefineLogRow {
            iter,
            photometric: photo,
            normal_consistency: nc,
            total,
        });
    }
    Ok((bs, log))
}
