//! Scene representation: anisotropic gaussians and pinhole cameras.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::math;

/// One anisotropic 3D gaussian with spherical-harmonics radiance.
///
/// Storage uses unconstrained parameterizations: log scales, opacity logit and
/// a quaternion kept unit-norm by the owner after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Scalar-first unit quaternion (w, x, y, z).
    pub rot: Vector4<f64>,
    pub opacity_logit: f64,
    /// SH coefficient triples, band 0 first. Length is `(degree+1)^2`.
    pub sh: Vec<Vector3<f64>>,
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.opacity_logit)
    }

    /// Per-axis standard deviations, floored to keep covariances invertible.
    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(|l| l.exp().max(math::SCALE_FLOOR))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        math::quat_to_matrix(math::quat_normalize(self.rot))
    }

    /// Covariance `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation();
        let s = self.scales();
        let d = Matrix3::from_diagonal(&s.component_mul(&s));
        r * d * r.transpose()
    }

    /// Inverse covariance `R diag(s^-2) R^T`.
    pub fn covariance_inv(&self) -> Matrix3<f64> {
        let r = self.rotation();
        let s = self.scales();
        let d = Matrix3::from_diagonal(&s.map(|v| 1.0 / (v * v)));
        r * d * r.transpose()
    }

    /// Index, value and world direction of the smallest scale axis.
    /// Ties resolve to the lowest axis index.
    pub fn smallest_scale_axis(&self) -> (usize, f64, Vector3<f64>) {
        let s = self.scales();
        let mut k = 0;
        for i in 1..3 {
            if s[i] < s[k] {
                k = i;
            }
        }
        let axis = self.rotation().column(k).into_owned();
        (k, s[k], axis)
    }

    pub fn normalize_rotation(&mut self) {
        self.rot = math::quat_normalize(self.rot);
    }
}

/// Pinhole camera. Internally points look down +z with x right and y down;
/// `world_to_cam` maps world points into that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: Matrix4<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("camera has zero image dimensions".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let r = self.rotation();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho_err > 1e-4 {
            return Err(Error::Validation(format!(
                "camera rotation is not orthonormal (max deviation {ortho_err:.3e})"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(Error::Validation(
                "camera rotation has negative determinant (reflection)".into(),
            ));
        }
        let bottom = self.world_to_cam.row(3);
        if (bottom[0], bottom[1], bottom[2], bottom[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(Error::Validation(
                "world_to_cam bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Replaces the rotation block with its closest orthonormal matrix
    /// (Gram-Schmidt; adequate for the sub-1e-4 drift accepted by loaders).
    pub fn reorthonormalize(&mut self) {
        let r = self.rotation();
        let c0 = r.column(0).normalize();
        let c1 = (r.column(1) - c0 * r.column(1).dot(&c0)).normalize();
        let c2 = c0.cross(&c1);
        let fixed = Matrix3::from_columns(&[c0, c1, c2]);
        for i in 0..3 {
            for j in 0..3 {
                self.world_to_cam[(i, j)] = fixed[(i, j)];
            }
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_cam.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p_world: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p_world + self.translation()
    }

    /// Projects a camera-space point to pixel coordinates.
    pub fn project(&self, p_cam: Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_cam[0] / p_cam[2] + self.cx,
            self.fy * p_cam[1] / p_cam[2] + self.cy,
        )
    }

    /// World-space unit ray direction through pixel center (u, v).
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation().transpose() * d_cam).normalize()
    }

    /// World point at camera-space depth `z` along pixel (u, v).
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let p_cam = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.rotation().transpose() * (p_cam - self.translation())
    }

    /// Camera at `eye` looking toward `target`, `up_hint` fixing the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up_hint: Vector3<f64>,
        width: usize,
        height: usize,
        focal: f64,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let mut up = up_hint;
        if forward.cross(&up).norm() < 1e-6 {
            up = Vector3::new(1.0, 0.0, 0.0);
            if forward.cross(&up).norm() < 1e-6 {
                up = Vector3::new(0.0, 1.0, 0.0);
            }
        }
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows of R are the camera axes expressed in world coordinates.
        let mut m = Matrix4::identity();
        for j in 0..3 {
            m[(0, j)] = right[j];
            m[(1, j)] = down[j];
            m[(2, j)] = forward[j];
        }
        let t = -Matrix3::new(
            right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1],
            forward[2],
        ) * eye;
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_cam: m,
        }
    }
}

/// A collection of gaussians sharing one SH band limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
    pub sh_degree: usize,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian3D>, sh_degree: usize) -> Result<Scene> {
        let scene = Scene {
            gaussians,
            sh_degree,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.is_empty() {
            return Err(Error::EmptyScene);
        }
        let want = math::sh_coeff_count(self.sh_degree);
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh.len() != want {
                return Err(Error::Validation(format!(
                    "gaussian {i} has {} SH coefficients, expected {want} for degree {}",
                    g.sh.len(),
                    self.sh_degree
                )));
            }
            let finite = g.mean.iter().all(|v| v.is_finite())
                && g.log_scale.iter().all(|v| v.is_finite())
                && g.rot.iter().all(|v| v.is_finite())
                && g.opacity_logit.is_finite()
                && g.sh.iter().all(|c| c.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Validation(format!(
                    "gaussian {i} contains non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the means.
    pub fn mean_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            for k in 0..3 {
                lo[k] = lo[k].min(g.mean[k]);
                hi[k] = hi[k].max(g.mean[k]);
            }
        }
        (lo, hi)
    }

    /// Half-diagonal of the mean bounding box; the global learning-rate scale.
    pub fn extent(&self) -> f64 {
        let (lo, hi) = self.mean_bounds();
        0.5 * (hi - lo).norm()
    }

    pub fn normalize_rotations(&mut self) {
        for g in &mut self.gaussians {
            g.normalize_rotation();
        }
    }
}
