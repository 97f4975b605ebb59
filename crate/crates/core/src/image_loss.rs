//! Differentiable image losses: L1 and SSIM with an 11x11 Gaussian window.
//!
//! SSIM statistics use zero-padded same-size separable convolutions. The
//! backward pass reuses the same blur because the kernel is symmetric: the
//! adjoint of zero-padded correlation with a symmetric kernel is itself.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::render::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Zero-padded separable convolution with the SSIM window.
fn blur(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xi = x as isize + i as isize - r as isize;
                if xi >= 0 && (xi as usize) < w {
                    acc += kv * img[y * w + xi as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yi = y as isize + i as isize - r as isize;
                if yi >= 0 && (yi as usize) < h {
                    acc += kv * tmp[yi as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Windowed statistics of one scalar plane pair, kept for the backward pass.
pub struct SsimPlane {
    w: usize,
    h: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    ex2: Vec<f64>,
    ey2: Vec<f64>,
    exy: Vec<f64>,
    pub mean: f64,
}

#[inline]
fn ssim_at(mu_x: f64, mu_y: f64, ex2: f64, ey2: f64, exy: f64) -> (f64, f64, f64, f64, f64) {
    let a1 = 2.0 * mu_x * mu_y + C1;
    let a2 = 2.0 * (exy - mu_x * mu_y) + C2;
    let b1 = mu_x * mu_x + mu_y * mu_y + C1;
    let b2 = (ex2 - mu_x * mu_x) + (ey2 - mu_y * mu_y) + C2;
    (a1 * a2 / (b1 * b2), a1, a2, b1, b2)
}

/// Mean SSIM of two equal-size scalar planes with values nominally in [0,1].
pub fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<SsimPlane> {
    if x.len() != w * h || y.len() != w * h {
        return Err(Error::Validation("SSIM plane size mismatch".into()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mu_x = blur(x, w, h);
    let mu_y = blur(y, w, h);
    let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
    let ex2 = blur(&sq(x), w, h);
    let ey2 = blur(&sq(y), w, h);
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exy = blur(&xy, w, h);
    let mut mean = 0.0;
    for p in 0..w * h {
        mean += ssim_at(mu_x[p], mu_y[p], ex2[p], ey2[p], exy[p]).0;
    }
    mean /= (w * h) as f64;
    Ok(SsimPlane {
        w,
        h,
        x: x.to_vec(),
        y: y.to_vec(),
        mu_x,
        mu_y,
        ex2,
        ey2,
        exy,
        mean,
    })
}

impl SsimPlane {
    /// Per-pixel d(upstream * mean_ssim)/dx for the first plane.
    pub fn backward(&self, upstream: f64) -> Vec<f64> {
        let n = (self.w * self.h) as f64;
        let g = upstream / n;
        let mut d_mu = vec![0.0; self.w * self.h];
        let mut d_ex2 = vec![0.0; self.w * self.h];
        let mut d_exy = vec![0.0; self.w * self.h];
        for p in 0..self.w * self.h {
            let (mu_x, mu_y) = (self.mu_x[p], self.mu_y[p]);
            let (s, a1, a2, b1, b2) =
                ssim_at(mu_x, mu_y, self.ex2[p], self.ey2[p], self.exy[p]);
            // S = A1 A2 / (B1 B2); mu_x enters all four factors, Ex2 only B2,
            // Exy only A2.
            let ds_dmu = 2.0 * mu_y * (a2 - a1) / (b1 * b2)
                - 2.0 * mu_x * s * (b2 - b1) / (b1 * b2);
            d_mu[p] = g * ds_dmu;
            d_ex2[p] = g * (-s / b2);
            d_exy[p] = g * (2.0 * a1 / (b1 * b2));
        }
        let bmu = blur(&d_mu, self.w, self.h);
        let bex2 = blur(&d_ex2, self.w, self.h);
        let bexy = blur(&d_exy, self.w, self.h);
        // x enters mu_x linearly, Ex2 as x^2 and Exy as x*y.
        (0..self.w * self.h)
            .map(|p| bmu[p] + 2.0 * self.x[p] * bex2[p] + self.y[p] * bexy[p])
            .collect()
    }
}

/// Mean absolute error and its per-pixel gradient w.r.t. `render`.
pub fn l1_loss(render: &Image, target: &Image) -> Result<(f64, Vec<Vector3<f64>>)> {
    check_shapes(render, target)?;
    let n = (render.pixels.len() * 3) as f64;
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); render.pixels.len()];
    for (i, (r, t)) in render.pixels.iter().zip(&target.pixels).enumerate() {
        for c in 0..3 {
            let d: f64 = r[c] - t[c];
            loss += d.abs();
            // f64::signum maps 0.0 to 1.0; matched pixels must not push.
            grad[i][c] = if d == 0.0 { 0.0 } else { d.signum() / n };
        }
    }
    Ok((loss / n, grad))
}

/// `1 - mean over RGB channels of SSIM`, with per-pixel gradient.
pub fn dssim_loss(render: &Image, target: &Image) -> Result<(f64, Vec<Vector3<f64>>)> {
    check_shapes(render, target)?;
    let (w, h) = (render.width, render.height);
    let mut total = 0.0;
    let mut grad = vec![Vector3::zeros(); render.pixels.len()];
    for c in 0..3 {
        let plane = ssim_plane(&render.channel(c), &target.channel(c), w, h)?;
        total += plane.mean / 3.0;
        let back = plane.backward(-1.0 / 3.0);
        for (g, b) in grad.iter_mut().zip(back) {
            g[c] = b;
        }
    }
    Ok((1.0 - total, grad))
}

/// The training photometric loss `L1 + dssim_weight * (1 - SSIM)`.
pub fn photometric_loss(
    render: &Image,
    target: &Image,
    dssim_weight: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let (l1, mut grad) = l1_loss(render, target)?;
    if dssim_weight == 0.0 {
        return Ok((l1, grad));
    }
    let (dssim, dgrad) = dssim_loss(render, target)?;
    for (g, d) in grad.iter_mut().zip(dgrad) {
        *g += d * dssim_weight;
    }
    Ok((l1 + dssim_weight * dssim, grad))
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Validation(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut img = Image::new(w, h);
        for p in &mut img.pixels {
            *p = Vector3::new(rng.random(), rng.random(), rng.random());
        }
        img
    }

    #[test]
    fn identical_planes_score_one() {
        let img = random_image(16, 16, 1);
        let plane = ssim_plane(&img.channel(0), &img.channel(0), 16, 16).unwrap();
        assert!((plane.mean - 1.0).abs() < 1e-12);
        let (d, _) = dssim_loss(&img, &img).unwrap();
        assert!(d.abs() < 1e-12);
        let (l1, g) = l1_loss(&img, &img).unwrap();
        assert!(l1 == 0.0);
        assert!(g.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn inverted_image_scores_low() {
        let a = random_image(24, 24, 2);
        let mut b = a.clone();
        for p in &mut b.pixels {
            *p = Vector3::repeat(1.0) - *p;
        }
        let (d, _) = dssim_loss(&a, &b).unwrap();
        assert!(d > 0.5, "dssim {d}");
    }

    #[test]
    fn window_larger_than_image_errors() {
        let a = random_image(8, 8, 3);
        assert!(dssim_loss(&a, &a).is_err());
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let a = random_image(12, 12, 4);
        let b = random_image(12, 12, 5);
        let (_, grad) = l1_loss(&a, &b).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for &(px, c) in &[(0usize, 0usize), (17, 1), (80, 2), (143, 0)] {
            let mut ap = a.clone();
            ap.pixels[px][c] += h;
            let mut am = a.clone();
            am.pixels[px][c] -= h;
            let fd = (l1_loss(&ap, &b).unwrap().0 - l1_loss(&am, &b).unwrap().0) / (2.0 * h);
            worst = worst.max((fd - grad[px][c]).abs());
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = random_image(16, 16, 6);
        let b = random_image(16, 16, 7);
        let (_, grad) = dssim_loss(&a, &b).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for &(px, c) in &[
            (0usize, 0usize),
            (5, 1),
            (8 * 16 + 8, 2),
            (15 * 16 + 15, 0),
            (200, 1),
        ] {
            let mut ap = a.clone();
            ap.pixels[px][c] += h;
            let mut am = a.clone();
            am.pixels[px][c] -= h;
            let fd =
                (dssim_loss(&ap, &b).unwrap().0 - dssim_loss(&am, &b).unwrap().0) / (2.0 * h);
            let rel = (fd - grad[px][c]).abs() / grad[px][c].abs().max(1e-7);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst rel {worst}");
    }

    #[test]
    fn photometric_combines_terms() {
        let a = random_image(16, 16, 8);
        let b = random_image(16, 16, 9);
        let (l1, _) = l1_loss(&a, &b).unwrap();
        let (ds, _) = dssim_loss(&a, &b).unwrap();
        let (total, _) = photometric_loss(&a, &b, 0.2).unwrap();
        assert!((total - (l1 + 0.2 * ds)).abs() < 1e-12);
        let (pure, _) = photometric_loss(&a, &b, 0.0).unwrap();
        assert!((pure - l1).abs() < 1e-15);
    }

    #[test]
    fn channel_permutation_invariance() {
        let a = random_image(16, 16, 10);
        let b = random_image(16, 16, 11);
        let perm = |img: &Image| {
            let mut out = img.clone();
            for p in &mut out.pixels {
                *p = Vector3::new(p.z, p.x, p.y);
            }
            out
        };
        let (d1, _) = dssim_loss(&a, &b).unwrap();
        let (d2, _) = dssim_loss(&perm(&a), &perm(&b)).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }
}
