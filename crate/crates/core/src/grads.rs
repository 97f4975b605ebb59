//! Gradient accumulators matching the scene parameterization.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::scene::Scene;

/// Per-gaussian gradients with respect to the stored (unconstrained)
/// parameters: means, log scales, raw quaternions, opacity logits and SH
/// coefficients.
#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub d_mean: Vec<Vector3<f64>>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_rot: Vec<Vector4<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_sh: Vec<Vec<Vector3<f64>>>,
}

impl SceneGrads {
    pub fn zeros(scene: &Scene) -> SceneGrads {
        let n = scene.len();
        let bands = crate::math::sh_coeff_count(scene.sh_degree);
        SceneGrads {
            d_mean: vec![Vector3::zeros(); n],
            d_log_scale: vec![Vector3::zeros(); n],
            d_rot: vec![Vector4::zeros(); n],
            d_opacity_logit: vec![0.0; n],
            d_sh: vec![vec![Vector3::zeros(); bands]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mean.is_empty()
    }

    /// `self += other * weight`.
    pub fn accumulate(&mut self, other: &SceneGrads, weight: f64) {
        assert_eq!(self.len(), other.len(), "gradient size mismatch");
        for i in 0..self.len() {
            self.d_mean[i] += other.d_mean[i] * weight;
            self.d_log_scale[i] += other.d_log_scale[i] * weight;
            self.d_rot[i] += other.d_rot[i] * weight;
            self.d_opacity_logit[i] += other.d_opacity_logit[i] * weight;
            for (a, b) in self.d_sh[i].iter_mut().zip(other.d_sh[i].iter()) {
                *a += b * weight;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_mean.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self
                .d_log_scale
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_rot.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_opacity_logit.iter().all(|x| x.is_finite())
            && self
                .d_sh
                .iter()
                .all(|sh| sh.iter().all(|v| v.iter().all(|x| x.is_finite())))
    }

    /// Largest absolute entry, useful for divergence diagnostics.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.len() {
            m = m
                .max(self.d_mean[i].abs().max())
                .max(self.d_log_scale[i].abs().max())
                .max(self.d_rot[i].abs().max())
                .max(self.d_opacity_logit[i].abs());
            for v in &self.d_sh[i] {
                m = m.max(v.abs().max());
            }
        }
        m
    }
}

/// Raw per-gaussian render gradients before the covariance is pulled back to
/// (log scale, quaternion). The mesh-bound refinement consumes `d_cov3d`
/// directly since its covariance is built from a triangle frame instead of a
/// stored quaternion.
#[derive(Debug, Clone)]
pub struct RawRenderGrads {
    pub d_mean: Vec<Vector3<f64>>,
    /// Symmetric 3x3 gradient with respect to the world covariance.
    pub d_cov3d: Vec<Matrix3<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_sh: Vec<Vec<Vector3<f64>>>,
}

impl RawRenderGrads {
    pub fn zeros(scene: &Scene) -> RawRenderGrads {
        let n = scene.len();
        let bands = crate::math::sh_coeff_count(scene.sh_degree);
        RawRenderGrads {
            d_mean: vec![Vector3::zeros(); n],
            d_cov3d: vec![Matrix3::zeros(); n],
            d_opacity_logit: vec![0.0; n],
            d_sh: vec![vec![Vector3::zeros(); bands]; n],
        }
    }
}
