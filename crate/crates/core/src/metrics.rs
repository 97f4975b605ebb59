//! Evaluation metrics: PSNR and SSIM over rendered views, Chamfer and
//! Hausdorff distances between a mesh and a reference surface, and the JSON
//! report that bundles them.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image_loss::ssim_plane;
use crate::mesh::bvh::MeshBvh;
use crate::mesh::TriangleMesh;
use crate::render::Image;

pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0,1]. The flag is true
/// when the images are bit-identical (infinite PSNR, reported capped).
pub fn psnr(a: &Image, b: &Image) -> Result<(f64, bool)> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Validation(format!(
            "psnr image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.pixels.is_empty() {
        return Err(Error::Validation("psnr on empty image".into()));
    }
    let mut sq = 0.0;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        sq += (pa - pb).norm_squared();
    }
    let mse = sq / (3 * a.pixels.len()) as f64;
    if mse == 0.0 {
        return Ok((PSNR_CAP_DB, true));
    }
    Ok((10.0 * (1.0 / mse).log10().min(PSNR_CAP_DB / 10.0), false))
}

/// Structural similarity on the channel-mean grayscale plane (equal channel
/// weights keep the metric invariant to a simultaneous channel permutation
/// of both images), 11x11 Gaussian window, sigma 1.5.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Validation(format!(
            "ssim image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let gray = |img: &Image| -> Vec<f64> {
        img.pixels
            .iter()
            .map(|p| (p.x + p.y + p.z) / 3.0)
            .collect()
    };
    Ok(ssim_plane(&gray(a), &gray(b), a.width, a.height)?.mean)
}

/// Reference surface for geometry metrics: either a second mesh or an
/// analytic signed distance function (its absolute value is the distance).
pub enum Reference<'a> {
    Mesh(&'a TriangleMesh),
    Sdf(&'a (dyn Fn(Vector3<f64>) -> f64 + Sync)),
}

fn sample_surface(
    mesh: &TriangleMesh,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vector3<f64>>> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::BadMesh("mesh has zero surface area".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random_range(0.0..total);
        let f = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.face_vertices(f);
        // Square-root trick gives a uniform barycentric draw.
        let su = rng.random_range(0.0..1.0f64).sqrt();
        let r2 = rng.random_range(0.0..1.0f64);
        out.push(a * (1.0 - su) + b * (su * (1.0 - r2)) + c * (su * r2));
    }
    Ok(out)
}

fn direction_stats(samples: &[Vector3<f64>], dist: impl Fn(Vector3<f64>) -> f64 + Sync) -> (f64, f64) {
    let dists: Vec<f64> = samples.par_iter().map(|&p| dist(p)).collect();
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let max = dists.iter().fold(0.0f64, |m, &d| m.max(d));
    (mean, max)
}

/// Area-weighted two-sided surface distances: Chamfer is the mean of the
/// per-direction mean distances, Hausdorff the max of the per-direction
/// maxima. Against an SDF reference only the mesh-to-reference direction
/// exists (the SDF gives exact point distances but cannot be sampled).
pub fn chamfer_hausdorff(
    mesh: &TriangleMesh,
    reference: &Reference,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(Error::Validation(format!(
            "need at least 1000 samples, got {n_samples}"
        )));
    }
    mesh.validate()?;
    if mesh.faces.is_empty() {
        return Err(Error::BadMesh("cannot measure an empty mesh".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let from_mesh = sample_surface(mesh, n_samples, &mut rng)?;
    match reference {
        Reference::Sdf(f) => {
            let (mean, max) = direction_stats(&from_mesh, |p| f(p).abs());
            Ok((mean, max))
        }
        Reference::Mesh(other) => {
            other.validate()?;
            if other.faces.is_empty() {
                return Err(Error::BadMesh("cannot measure against an empty mesh".into()));
            }
            let from_other = sample_surface(other, n_samples, &mut rng)?;
            let bvh_mesh = MeshBvh::build(mesh)?;
            let bvh_other = MeshBvh::build(other)?;
            let (mean_ab, max_ab) = direction_stats(&from_mesh, |p| bvh_other.distance(p).0);
            let (mean_ba, max_ba) = direction_stats(&from_other, |p| bvh_mesh.distance(p).0);
            Ok((0.5 * (mean_ab + mean_ba), max_ab.max(max_ba)))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr_db: f64,
    pub psnr_capped_identical: bool,
    pub ssim: f64,
}

/// Aggregated evaluation output. `lpips` is always null: perceptual metrics
/// requiring learned models are out of scope, the field is reserved so
/// downstream readers see a stable schema.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub chamfer: Option<f64>,
    pub hausdorff: Option<f64>,
    pub config: serde_json::Value,
    pub timings_ms: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn new(config: serde_json::Value) -> MetricReport {
        MetricReport {
            views: Vec::new(),
            mean_psnr_db: None,
            mean_ssim: None,
            lpips: None,
            chamfer: None,
            hausdorff: None,
            config,
            timings_ms: Vec::new(),
        }
    }

    pub fn push_view(&mut self, view: usize, rendered: &Image, target: &Image) -> Result<()> {
        let (p, capped) = psnr(rendered, target)?;
        let s = ssim(rendered, target)?;
        self.views.push(ViewMetrics {
            view,
            psnr_db: p,
            psnr_capped_identical: capped,
            ssim: s,
        });
        let n = self.views.len() as f64;
        self.mean_psnr_db = Some(self.views.iter().map(|v| v.psnr_db).sum::<f64>() / n);
        self.mean_ssim = Some(self.views.iter().map(|v| v.ssim).sum::<f64>() / n);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("report serialization failed: {e}")))
    }

    /// Per-view rows; geometry metrics ride on the first row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,psnr_db,psnr_capped_identical,ssim,chamfer,hausdorff\n");
        for (i, v) in self.views.iter().enumerate() {
            let (c, h) = if i == 0 {
                (
                    self.chamfer.map_or(String::new(), |x| format!("{x:.9e}")),
                    self.hausdorff.map_or(String::new(), |x| format!("{x:.9e}")),
                )
            } else {
                (String::new(), String::new())
            };
            out.push_str(&format!(
                "{},{:.6},{},{:.6},{},{}\n",
                v.view, v.psnr_db, v.psnr_capped_identical, v.ssim, c, h
            ));
        }
        if self.views.is_empty() && (self.chamfer.is_some() || self.hausdorff.is_some()) {
            out.push_str(&format!(
                ",,,,{},{}\n",
                self.chamfer.map_or(String::new(), |x| format!("{x:.9e}")),
                self.hausdorff.map_or(String::new(), |x| format!("{x:.9e}")),
            ));
        }
        out
    }
}
