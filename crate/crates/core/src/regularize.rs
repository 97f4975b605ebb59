//! Scene training: photometric optimization, opacity entropy phase, pruning,
//! and the surface regularization losses that pull gaussians into a thin
//! well-sampled shell (a distance-estimate consistency term fed by rendered
//! depth, plus a normal-alignment term on the density gradient).

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, EvalMode};
use crate::grads::SceneGrads;
use crate::image_loss::photometric_loss;
use crate::knn::NeighborIndex;
use crate::math;
use crate::optim::{Adam, AdamParams};
use crate::render::{backward_render, render_depth, render_image, DepthMap, Image};
use crate::scene::{Camera, Scene};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub photometric: f64,
    /// Weight of `1 - SSIM` inside the photometric term.
    pub dssim: f64,
    pub entropy: f64,
    pub sdf: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photometric: 1.0,
            dssim: 0.2,
            entropy: 0.1,
            sdf: 1.0,
            normal: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Scaled by the scene extent at training start.
    pub means: f64,
    pub log_scales: f64,
    pub rotations: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            means: 1.6e-4,
            log_scales: 5e-3,
            rotations: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Phase 1: photometric only.
    pub iters_free: usize,
    /// Phase 2: photometric + opacity entropy; ends with pruning.
    pub iters_entropy: usize,
    /// Phase 3: photometric + surface regularization.
    pub iters_reg: usize,
    /// Opacity below which gaussians are dropped between phases 2 and 3.
    pub prune_alpha: f64,
    /// Rebuild the neighbor index every this many phase-3 steps.
    pub knn_refresh: usize,
    /// Regularization points sampled per phase-3 step.
    pub n_reg_points: usize,
    pub weights: LossWeights,
    pub lr: LearningRates,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters_free: 7000,
            iters_entropy: 2000,
            iters_reg: 6000,
            prune_alpha: 0.5,
            knn_refresh: 500,
            n_reg_points: 512,
            weights: LossWeights::default(),
            lr: LearningRates::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_alpha > 0.0 && self.prune_alpha < 1.0) {
            return Err(Error::Validation(format!(
                "prune_alpha must be in (0,1), got {}",
                self.prune_alpha
            )));
        }
        if self.knn_refresh == 0 {
            return Err(Error::Validation("knn_refresh must be at least 1".into()));
        }
        if self.iters_reg > 0 && self.n_reg_points == 0 {
            return Err(Error::Validation(
                "regularization phase needs n_reg_points > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.iters_free + self.iters_entropy + self.iters_reg
    }
}

/// Points sampled from the gaussian mixture with their depth-based distance
/// estimates; `f_hat` is None where the estimate is unavailable.
#[derive(Debug, Clone)]
pub struct RegPointBatch {
    pub points: Vec<(Vector3<f64>, u32)>,
    pub f_hat: Vec<Option<f64>>,
}

impl RegPointBatch {
    pub fn n_valid(&self) -> usize {
        self.f_hat.iter().filter(|f| f.is_some()).count()
    }
}

/// Draws `n` points, each from a uniformly chosen gaussian's own
/// distribution.
pub fn sample_reg_points<R: Rng>(
    scene: &Scene,
    n: usize,
    rng: &mut R,
) -> Vec<(Vector3<f64>, u32)> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let gi = rng.random_range(0..scene.len());
        let g = &scene.gaussians[gi];
        let s = g.scales();
        let xi = Vector3::new(
            math::normal_deviate(rng),
            math::normal_deviate(rng),
            math::normal_deviate(rng),
        );
        let p = g.mean + g.rotation() * s.component_mul(&xi);
        out.push((p, gi as u32));
    }
    out
}

/// Distance between `p` and the rendered surface along its line of sight:
/// positive behind the visible surface, negative in front. None when `p` is
/// behind the camera, projects outside the image, or hits an uncovered
/// pixel.
pub fn estimate_sdf_hat(p: Vector3<f64>, cam: &Camera, depth: &DepthMap) -> Option<f64> {
    let p_cam = cam.to_camera(p);
    if p_cam.z <= 0.0 {
        return None;
    }
    let (u, v) = cam.project(p_cam);
    if !(0.0..cam.width as f64).contains(&u) || !(0.0..cam.height as f64).contains(&v) {
        return None;
    }
    let (z_surf, coverage) = depth.at(u as usize, v as usize);
    if coverage < DepthMap::COVERAGE_MIN {
        return None;
    }
    Some(p_cam.z - z_surf)
}

/// Fills in `f_hat` for every point from one camera's depth map.
pub fn build_reg_batch(
    points: Vec<(Vector3<f64>, u32)>,
    cam: &Camera,
    depth: &DepthMap,
) -> RegPointBatch {
    let f_hat = points
        .iter()
        .map(|&(p, _)| estimate_sdf_hat(p, cam, depth))
        .collect();
    RegPointBatch { points, f_hat }
}

/// Mean absolute difference between the depth estimate and the density
/// distance estimate, `mean | |f_hat| - |f| |`, over valid points. The sign
/// of f is borrowed from f_hat, so only magnitudes are compared; f_hat is a
/// constant (no gradient through the depth map).
pub fn reg_loss_sdf(
    scene: &Scene,
    index: &NeighborIndex,
    batch: &RegPointBatch,
) -> (f64, SceneGrads) {
    let mut grads = SceneGrads::zeros(scene);
    let n_valid = batch.n_valid();
    if n_valid == 0 {
        return (0.0, grads);
    }
    let inv_n = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    for (&(p, _), f_hat) in batch.points.iter().zip(&batch.f_hat) {
        let Some(f_hat) = *f_hat else { continue };
        let a = field::ideal_sdf_abs(p, scene, index, EvalMode::Local);
        loss += (f_hat.abs() - a).abs() * inv_n;
        let upstream = (a - f_hat.abs()).signum() * inv_n;
        field::sdf_abs_with_param_grads(p, scene, index, EvalMode::Local, upstream, &mut grads);
    }
    (loss, grads)
}

/// Mean squared deviation between the unit density-fall direction and the
/// closest gaussian's flat axis, `mean || grad_f/|grad_f| - n_g* ||^2`. The
/// axis is compared sign-free (flipped into the gradient half-space); points
/// with a vanishing gradient are skipped.
pub fn reg_loss_normal(
    scene: &Scene,
    index: &NeighborIndex,
    batch: &RegPointBatch,
) -> (f64, SceneGrads) {
    let mut grads = SceneGrads::zeros(scene);
    struct Hit {
        p: Vector3<f64>,
        u: Vector3<f64>,
        n: Vector3<f64>,
        g_star: usize,
        k_min: usize,
        sign: f64,
        grad_norm: f64,
    }
    let mut hits = Vec::with_capacity(batch.points.len());
    for &(p, _) in &batch.points {
        let g = field::density_gradient(p, scene, index, EvalMode::Local);
        let g_norm = g.norm();
        if g_norm == 0.0 {
            continue;
        }
        // |grad f| = s/(d sqrt(-2 ln d)) * |grad d|; tiny values mean the
        // direction is numerically meaningless.
        let g_star = field::closest_gaussian(p, scene, index, EvalMode::Local);
        let (k_min, s_min, axis) = scene.gaussians[g_star].smallest_scale_axis();
        let d = field::density(p, scene, index, EvalMode::Local)
            .clamp(field::SDF_DENSITY_CLAMP.0, field::SDF_DENSITY_CLAMP.1);
        let root = (-2.0 * d.ln()).sqrt();
        if root < 1e-300 || s_min / (d * root) * g_norm < 1e-9 {
            continue;
        }
        let u = -g / g_norm;
        let sign = if u.dot(&axis) < 0.0 { -1.0 } else { 1.0 };
        hits.push(Hit {
            p,
            u,
            n: axis * sign,
            g_star,
            k_min,
            sign,
            grad_norm: g_norm,
        });
    }
    if hits.is_empty() {
        return (0.0, grads);
    }
    let inv_n = 1.0 / hits.len() as f64;
    let mut loss = 0.0;
    for hit in &hits {
        let diff = hit.u - hit.n;
        loss += diff.norm_squared() * inv_n;
        // Through the density gradient: u = -g/|g|, so
        // dL/dg = -(I - uu^T) 2(u - n) / |g| = 2 (I - uu^T) n / |g|.
        let gamma = (hit.n - hit.u * hit.u.dot(&hit.n)) * (2.0 * inv_n / hit.grad_norm);
        let ids = index.candidates(hit.p);
        field::density_gradient_with_param_grads(hit.p, scene, ids, gamma, &mut grads);
        // Through the axis: n = sign * R(q) e_k.
        let d_n = (hit.n - hit.u) * (2.0 * inv_n);
        let jac = math::d_matrix_d_raw_quat(scene.gaussians[hit.g_star].rot);
        for qi in 0..4 {
            let d_axis = jac[qi].column(hit.k_min).into_owned();
            grads.d_rot[hit.g_star][qi] += hit.sign * d_n.dot(&d_axis);
        }
    }
    (loss, grads)
}

/// Mean binary entropy of the opacities, pushing them toward 0 or 1.
pub fn opacity_entropy_loss(scene: &Scene) -> (f64, SceneGrads) {
    const CLAMP: f64 = 1e-6;
    let mut grads = SceneGrads::zeros(scene);
    let inv_n = 1.0 / scene.len().max(1) as f64;
    let mut loss = 0.0;
    for (i, g) in scene.gaussians.iter().enumerate() {
        let alpha = g.opacity();
        let a = alpha.clamp(CLAMP, 1.0 - CLAMP);
        loss += -(a * a.ln() + (1.0 - a) * (1.0 - a).ln()) * inv_n;
        if alpha > CLAMP && alpha < 1.0 - CLAMP {
            // dH/da = ln((1-a)/a), da/dlogit = a(1-a).
            grads.d_opacity_logit[i] =
                ((1.0 - a) / a).ln() * alpha * (1.0 - alpha) * inv_n;
        }
    }
    (loss, grads)
}

/// Keeps exactly the gaussians with opacity >= threshold.
pub fn prune_transparent(scene: &Scene, threshold: f64) -> Result<Scene> {
    let survivors: Vec<_> = scene
        .gaussians
        .iter()
        .filter(|g| g.opacity() >= threshold)
        .cloned()
        .collect();
    if survivors.is_empty() {
        return Err(Error::EmptyScene);
    }
    Scene::new(survivors, scene.sh_degree)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub phase: u8,
    pub photometric: f64,
    pub entropy: f64,
    pub sdf: f64,
    pub normal: f64,
    pub total: f64,
    pub n_gaussians: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Steps whose regularization batch had no valid depth estimate.
    pub empty_reg_batches: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iter,phase,photometric,entropy,sdf,normal,total,n_gaussians\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
                r.iter, r.phase, r.photometric, r.entropy, r.sdf, r.normal, r.total,
                r.n_gaussians
            ));
        }
        out
    }
}

/// One Adam state per parameter group.
struct Optimizers {
    means: Adam,
    scales: Adam,
    rots: Adam,
    opacity: Adam,
    sh: Adam,
    k_sh: usize,
}

impl Optimizers {
    fn new(scene: &Scene, lr: &LearningRates, extent: f64, k_sh: usize) -> Optimizers {
        let n = scene.len();
        Optimizers {
            means: Adam::new(3 * n, AdamParams::with_lr(lr.means * extent)),
            scales: Adam::new(3 * n, AdamParams::with_lr(lr.log_scales)),
            rots: Adam::new(4 * n, AdamParams::with_lr(lr.rotations)),
            opacity: Adam::new(n, AdamParams::with_lr(lr.opacity)),
            sh: Adam::new(3 * k_sh * n, AdamParams::with_lr(lr.sh)),
            k_sh,
        }
    }

    fn retain(&mut self, keep: &[bool]) {
        self.means.retain(keep, 3);
        self.scales.retain(keep, 3);
        self.rots.retain(keep, 4);
        self.opacity.retain(keep, 1);
        self.sh.retain(keep, 3 * self.k_sh);
    }

    fn step(&mut self, scene: &mut Scene, grads: &SceneGrads) -> Result<()> {
        let n = scene.len();
        let k = self.k_sh;
        let mut means = vec![0.0; 3 * n];
        let mut g_means = vec![0.0; 3 * n];
        let mut scales = vec![0.0; 3 * n];
        let mut g_scales = vec![0.0; 3 * n];
        let mut rots = vec![0.0; 4 * n];
        let mut g_rots = vec![0.0; 4 * n];
        let mut opacity = vec![0.0; n];
        let mut g_opacity = vec![0.0; n];
        let mut sh = vec![0.0; 3 * k * n];
        let mut g_sh = vec![0.0; 3 * k * n];
        for (i, g) in scene.gaussians.iter().enumerate() {
            for c in 0..3 {
                means[3 * i + c] = g.mean[c];
                g_means[3 * i + c] = grads.d_mean[i][c];
                scales[3 * i + c] = g.log_scale[c];
                g_scales[3 * i + c] = grads.d_log_scale[i][c];
            }
            for c in 0..4 {
                rots[4 * i + c] = g.rot[c];
                g_rots[4 * i + c] = grads.d_rot[i][c];
            }
            opacity[i] = g.opacity_logit;
            g_opacity[i] = grads.d_opacity_logit[i];
            for b in 0..k {
                for c in 0..3 {
                    sh[(i * k + b) * 3 + c] = g.sh[b][c];
                    g_sh[(i * k + b) * 3 + c] = grads.d_sh[i][b][c];
                }
            }
        }
        self.means.step(&mut means, &g_means)?;
        self.scales.step(&mut scales, &g_scales)?;
        self.rots.step(&mut rots, &g_rots)?;
        self.opacity.step(&mut opacity, &g_opacity)?;
        self.sh.step(&mut sh, &g_sh)?;
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            for c in 0..3 {
                g.mean[c] = means[3 * i + c];
                g.log_scale[c] = scales[3 * i + c];
            }
            for c in 0..4 {
                g.rot[c] = rots[4 * i + c];
            }
            g.opacity_logit = opacity[i];
            for b in 0..k {
                for c in 0..3 {
                    g.sh[b][c] = sh[(i * k + b) * 3 + c];
                }
            }
            g.normalize_rotation();
        }
        Ok(())
    }
}

/// Three-phase training loop. Deterministic for a fixed seed and thread
/// count of one; renders are deterministic at any thread count.
pub fn train(
    scene: &Scene,
    images: &[Image],
    cams: &[Camera],
    cfg: &TrainConfig,
) -> Result<(Scene, TrainLog)> {
    cfg.validate()?;
    let mut scene = scene.clone();
    let mut log = TrainLog::default();
    if cfg.total_iters() == 0 {
        return Ok((scene, log));
    }
    scene.validate()?;
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
    scene.normalize_rotations();
    let extent = scene.extent().max(1e-9);
    let k_sh = math::sh_coeff_count(scene.sh_degree);
    let mut opt = Optimizers::new(&scene, &cfg.lr, extent, k_sh);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut index: Option<NeighborIndex> = None;
    let phase3_start = cfg.iters_free + cfg.iters_entropy;

    for iter in 0..cfg.total_iters() {
        let phase: u8 = if iter < cfg.iters_free {
            1
        } else if iter < phase3_start {
            2
        } else {
            3
        };
        if phase == 3 && iter == phase3_start {
            let keep: Vec<bool> = scene
                .gaussians
                .iter()
                .map(|g| g.opacity() >= cfg.prune_alpha)
                .collect();
            scene = prune_transparent(&scene, cfg.prune_alpha)?;
            opt.retain(&keep);
            index = None;
        }
        if phase == 3 {
            let since = iter - phase3_start;
            if index.is_none() || since % cfg.knn_refresh == 0 {
                index = Some(NeighborIndex::build(&scene, NeighborIndex::DEFAULT_K)?);
            }
        }

        let ci = rng.random_range(0..cams.len());
        let cam = &cams[ci];
        let mut grads = SceneGrads::zeros(&scene);
        let mut row = LogRow {
            iter,
            phase,
            photometric: 0.0,
            entropy: 0.0,
            sdf: 0.0,
            normal: 0.0,
            total: 0.0,
            n_gaussians: scene.len(),
        };

        if cfg.weights.photometric != 0.0 {
            let rendered = render_image(&scene, cam);
            let (photo, pix_grad) = photometric_loss(&rendered, &images[ci], cfg.weights.dssim)?;
            let mut grad_img = Image::new(cam.width, cam.height);
            grad_img.pixels = pix_grad;
            let pg = backward_render(&scene, cam, &grad_img);
            grads.accumulate(&pg, cfg.weights.photometric);
            row.photometric = photo;
        }

        if phase == 2 && cfg.weights.entropy != 0.0 {
            let (ent, eg) = opacity_entropy_loss(&scene);
            grads.accumulate(&eg, cfg.weights.entropy);
            row.entropy = ent;
        }

        if phase == 3 {
            let idx = index.as_ref().expect("neighbor index built at phase start");
            let depth = render_depth(&scene, cam);
            let points = sample_reg_points(&scene, cfg.n_reg_points, &mut rng);
            let batch = build_reg_batch(points, cam, &depth);
            if batch.n_valid() == 0 {
                log.empty_reg_batches += 1;
            }
            if cfg.weights.sdf != 0.0 {
                let (sdf, sg) = reg_loss_sdf(&scene, idx, &batch);
                grads.accumulate(&sg, cfg.weights.sdf);
                row.sdf = sdf;
            }
            if cfg.weights.normal != 0.0 {
                let (nor, ng) = reg_loss_normal(&scene, idx, &batch);
                grads.accumulate(&ng, cfg.weights.normal);
                row.normal = nor;
            }
        }

        row.total = cfg.weights.photometric * row.photometric
            + cfg.weights.entropy * row.entropy
            + cfg.weights.sdf * row.sdf
            + cfg.weights.normal * row.normal;
        if !row.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                quantity: "training loss".into(),
                iteration: iter,
                detail: format!(
                    "phase {phase}, camera {ci}, losses (photo {:.3e}, entropy {:.3e}, sdf {:.3e}, normal {:.3e}), {} gaussians, max |grad| {:.3e}",
                    row.photometric,
                    row.entropy,
                    row.sdf,
                    row.normal,
                    scene.len(),
                    grads.max_abs()
                ),
            });
        }

        opt.step(&mut scene, &grads)?;
        log.rows.push(row);
    }
    Ok((scene, log))
}
