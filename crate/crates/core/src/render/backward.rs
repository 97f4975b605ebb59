//! Analytic adjoint of the tile rasterizer.
//!
//! The forward compositing at one pixel is
//! `C = sum_i c_i a_i T_i` with `T_i = prod_{j<i} (1 - a_j)` and
//! `a_i = min(alpha_i exp(-0.5 delta^T conic delta), a_max)`.
//! Per-pixel adjoints are accumulated into per-tile splat buffers, merged in
//! tile order (run-to-run deterministic under any thread count), then pulled
//! back through projection, spherical harmonics and the covariance factors.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use std::collections::HashMap;

use crate::grads::{RawRenderGrads, SceneGrads};
use crate::math;
use crate::scene::{Camera, Scene};

use super::{prepare_frame, Image, ALPHA_MAX, ALPHA_SKIP, TILE_SIZE, TRANSMITTANCE_MIN};

/// Per-splat image-space adjoints.
#[derive(Debug, Clone, Copy)]
struct SplatAdjoint {
    mean2d: Vector2<f64>,
    cov2d: Matrix2<f64>,
    alpha: f64,
    color: Vector3<f64>,
}

impl SplatAdjoint {
    fn zero() -> SplatAdjoint {
        SplatAdjoint {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::zeros(),
            alpha: 0.0,
            color: Vector3::zeros(),
        }
    }

    fn add(&mut self, other: &SplatAdjoint) {
        self.mean2d += other.mean2d;
        self.cov2d += other.cov2d;
        self.alpha += other.alpha;
        self.color += other.color;
    }
}

/// Gradients with the covariance left in world-space 3x3 form.
pub fn backward_render_raw(scene: &Scene, cam: &Camera, loss_grad: &Image) -> RawRenderGrads {
    assert_eq!(loss_grad.width, cam.width, "loss gradient width mismatch");
    assert_eq!(loss_grad.height, cam.height, "loss gradient height mismatch");
    let frame = prepare_frame(scene, cam);
    let mut out = RawRenderGrads::zeros(scene);
    if frame.splats.is_empty() {
        return out;
    }

    // Tile-local adjoint accumulation.
    let tile_adjoints: Vec<(usize, HashMap<u32, SplatAdjoint>)> = (0..frame.tiles.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % frame.tiles_x;
            let ty = ti / frame.tiles_x;
            let x_end = ((tx + 1) * TILE_SIZE).min(cam.width);
            let y_end = ((ty + 1) * TILE_SIZE).min(cam.height);
            let list = &frame.tiles[ti];
            let mut acc: HashMap<u32, SplatAdjoint> = HashMap::new();
            // Forward contribution record per pixel.
            let mut hits: Vec<(u32, f64, f64)> = Vec::with_capacity(list.len());
            for y in ty * TILE_SIZE..y_end {
                for x in tx * TILE_SIZE..x_end {
                    let g_pix = loss_grad.pixel(x, y);
                    if g_pix == Vector3::zeros() {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    hits.clear();
                    let mut transmittance = 1.0;
                    for &si in list {
                        let s = &frame.splats[si as usize];
                        let d = Vector2::new(px - s.mean2d[0], py - s.mean2d[1]);
                        let a = (s.alpha * (-0.5 * d.dot(&(s.conic * d))).exp()).min(ALPHA_MAX);
                        if a < ALPHA_SKIP {
                            continue;
                        }
                        hits.push((si, a, transmittance));
                        transmittance *= 1.0 - a;
                        if transmittance < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    // Reverse sweep with the suffix color sum.
                    let mut suffix = Vector3::zeros();
                    for &(si, a, t_before) in hits.iter().rev() {
                        let s = &frame.splats[si as usize];
                        let d_a =
                            g_pix.dot(&s.color) * t_before - g_pix.dot(&suffix) / (1.0 - a);
                        let adj = acc.entry(si).or_insert_with(SplatAdjoint::zero);
                        adj.color += g_pix * (a * t_before);
                        // Through the alpha clamp (zero subgradient above).
                        if a < ALPHA_MAX {
                            let gexp = a / s.alpha; // exp(power)
                            adj.alpha += d_a * gexp;
                            let d_power = d_a * a; // dL/d(power) = dL/da * a
                            let delta = Vector2::new(px - s.mean2d[0], py - s.mean2d[1]);
                            let cd = s.conic * delta;
                            adj.mean2d += cd * d_power;
                            // dL/dconic = -0.5 d_power * delta delta^T, then
                            // conic = inv(cov2d): dL/dcov2d = -A G A.
                            let d_conic = -0.5 * d_power;
                            let outer = delta * delta.transpose();
                            adj.cov2d += -(s.conic * (outer * d_conic) * s.conic);
                        }
                        suffix += s.color * (a * t_before);
                    }
                }
            }
            (ti, acc)
        })
        .collect();

    // Deterministic merge: tile index order.
    let mut merged: Vec<SplatAdjoint> = vec![SplatAdjoint::zero(); frame.splats.len()];
    let mut touched: Vec<bool> = vec![false; frame.splats.len()];
    let mut ordered = tile_adjoints;
    ordered.sort_by_key(|(ti, _)| *ti);
    for (_, acc) in ordered {
        let mut keys: Vec<u32> = acc.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            merged[k as usize].add(&acc[&k]);
            touched[k as usize] = true;
        }
    }

    // Pull image-space adjoints back to world-space parameters.
    for (si, adj) in merged.iter().enumerate() {
        if !touched[si] {
            continue;
        }
        let splat = &frame.splats[si];
        let gi = splat.gaussian;
        let g = &scene.gaussians[gi];
        let p_cam = cam.to_camera(g.mean);
        let w = cam.rotation();
        let (x, y, z) = (p_cam[0], p_cam[1], p_cam[2]);

        // Opacity.
        let alpha = splat.alpha;
        out.d_opacity_logit[gi] += adj.alpha * alpha * (1.0 - alpha);

        // Color via spherical harmonics; clamped channels carry no gradient.
        let dir_raw = g.mean - cam.center();
        let dir_norm = dir_raw.norm().max(1e-12);
        let dir = dir_raw / dir_norm;
        let shg = math::sh_to_color_grad(&g.sh, dir);
        let mut masked = adj.color;
        for c in 0..3 {
            if shg.clamped[c] {
                masked[c] = 0.0;
            }
        }
        for (k, grad_slot) in out.d_sh[gi].iter_mut().enumerate() {
            let wk = if k < 4 { shg.coeff_weight[k] } else { 0.0 };
            if wk != 0.0 {
                *grad_slot += masked * wk;
            }
        }
        if g.sh.len() >= 4 {
            let g_dir = shg.d_dir.transpose() * masked;
            // Normalization chain for dir = u / |u|.
            let g_u = (g_dir - dir * dir.dot(&g_dir)) / dir_norm;
            out.d_mean[gi] += g_u;
        }

        // Projection Jacobian terms.
        let j = super::projection_jacobian(cam, p_cam);
        // mean2d = proj(p_cam): dL/dp_cam += J^T d_mean2d.
        let mut d_pcam = Vector3::new(
            j[0][0] * adj.mean2d[0],
            j[1][1] * adj.mean2d[1],
            j[0][2] * adj.mean2d[0] + j[1][2] * adj.mean2d[1],
        );

        // cov2d = M cov3d M^T with M = J W.
        let g2 = 0.5 * (adj.cov2d + adj.cov2d.transpose());
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                for k in 0..3 {
                    m[r][c] += j[r][k] * w[(k, c)];
                }
            }
        }
        let cov3d = g.covariance();
        // dL/dcov3d = M^T G2 M.
        let mut d_cov3d = Matrix3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = 0.0;
                for r in 0..2 {
                    for c in 0..2 {
                        acc += m[r][a] * g2[(r, c)] * m[c][b];
                    }
                }
                d_cov3d[(a, b)] = acc;
            }
        }
        out.d_cov3d[gi] += d_cov3d;

        // dL/dM = 2 G2 M cov3d, then dL/dJ = dL/dM W^T.
        let mut d_m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for t in 0..2 {
                    for u in 0..3 {
                        acc += 2.0 * g2[(r, t)] * m[t][u] * cov3d[(u, c)];
                    }
                }
                d_m[r][c] = acc;
            }
        }
        let mut d_j = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                for k in 0..3 {
                    d_j[r][c] += d_m[r][k] * w[(c, k)];
                }
            }
        }
        let (fx, fy) = (cam.fx, cam.fy);
        let z2 = z * z;
        let z3 = z2 * z;
        d_pcam[0] += d_j[0][2] * (-fx / z2);
        d_pcam[1] += d_j[1][2] * (-fy / z2);
        d_pcam[2] += d_j[0][0] * (-fx / z2)
            + d_j[0][2] * (2.0 * fx * x / z3)
            + d_j[1][1] * (-fy / z2)
            + d_j[1][2] * (2.0 * fy * y / z3);

        out.d_mean[gi] += w.transpose() * d_pcam;
    }
    out
}

/// Pulls covariance gradients back to (log scale, quaternion) storage.
pub fn raw_to_scene_grads(scene: &Scene, raw: &RawRenderGrads) -> SceneGrads {
    let mut out = SceneGrads::zeros(scene);
    out.d_mean.clone_from_slice(&raw.d_mean);
    out.d_opacity_logit.clone_from_slice(&raw.d_opacity_logit);
    out.d_sh.clone_from(&raw.d_sh);
    for (i, g) in scene.gaussians.iter().enumerate() {
        let p = 0.5 * (raw.d_cov3d[i] + raw.d_cov3d[i].transpose());
        if p == Matrix3::zeros() {
            continue;
        }
        let r = g.rotation();
        let s = g.scales();
        // cov = R D R^T, D = diag(s^2): dL/d log s_k = (R^T P R)_kk * 2 s_k^2.
        let rtpr = r.transpose() * p * r;
        for k in 0..3 {
            out.d_log_scale[i][k] += rtpr[(k, k)] * 2.0 * s[k] * s[k];
        }
        // dL/dR = 2 P R D.
        let d = Matrix3::from_diagonal(&s.component_mul(&s));
        let d_r = 2.0 * p * r * d;
        let jac = math::d_matrix_d_raw_quat(g.rot);
        for qi in 0..4 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += d_r[(a, b)] * jac[qi][(a, b)];
                }
            }
            out.d_rot[i][qi] += acc;
        }
    }
    out
}

/// Full backward pass to the stored scene parameterization.
pub fn backward_render(scene: &Scene, cam: &Camera, loss_grad: &Image) -> SceneGrads {
    let raw = backward_render_raw(scene, cam, loss_grad);
    raw_to_scene_grads(scene, &raw)
}
