//! Scalar helpers, quaternion algebra and low-order spherical harmonics.
//!
//! Quaternions are scalar-first `(w, x, y, z)`. All rotation Jacobians chain
//! through the normalization `q_hat = q / |q|`, so callers may hold raw
//! (non-unit) quaternions as optimization variables.

use nalgebra::{Matrix3, Vector3, Vector4};

/// DC spherical-harmonics basis constant (degree 0).
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Degree-1 spherical-harmonics basis constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Scales below this floor are clamped before building covariances so that
/// flat gaussians stay invertible.
pub const SCALE_FLOOR: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]. Input is clamped away from {0, 1} so the result
/// stays finite.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

pub fn d_sigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Normalizes a quaternion; the zero quaternion falls back to identity.
pub fn quat_normalize(q: Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    if n < 1e-12 {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    } else {
        q / n
    }
}

/// Rotation matrix of a unit scalar-first quaternion.
pub fn quat_to_matrix(q: Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Derivatives of [`quat_to_matrix`] with respect to each component of the
/// *unit* quaternion (no normalization chain).
pub fn d_matrix_d_unit_quat(q: Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [dw, dx, dy, dz]
}

/// Rotation Jacobian of a possibly non-unit quaternion: `out[i] = dR/dq_i`
/// where R = R(q / |q|). Chains the normalization Jacobian
/// `d q_hat_j / d q_i = (delta_ij - q_hat_i q_hat_j) / |q|`.
pub fn d_matrix_d_raw_quat(q: Vector4<f64>) -> [Matrix3<f64>; 4] {
    let n = q.norm().max(1e-12);
    let qh = q / n;
    let du = d_matrix_d_unit_quat(qh);
    let mut out = [Matrix3::zeros(); 4];
    for i in 0..4 {
        let mut m = Matrix3::zeros();
        for j in 0..4 {
            let jac = (if i == j { 1.0 } else { 0.0 } - qh[i] * qh[j]) / n;
            m += du[j] * jac;
        }
        out[i] = m;
    }
    out
}

/// Converts a rotation matrix to a unit scalar-first quaternion with `w >= 0`
/// (Shepperd's branch selection keeps the extraction well conditioned).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Vector4<f64> {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = quat_normalize(q);
    if q[0] < 0.0 {
        -q
    } else {
        q
    }
}

/// Orthonormal vectors completing `unit` to a right-handed frame.
pub fn orthonormal_tangents(unit: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let pick = if unit[0].abs() < 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let t1 = unit.cross(&pick).normalize();
    let t2 = unit.cross(&t1);
    (t1, t2)
}

/// Evaluates clamped RGB radiance from spherical-harmonics coefficients for a
/// unit view direction. Bands above degree 1 are ignored.
pub fn sh_to_color(sh: &[Vector3<f64>], dir: Vector3<f64>) -> Vector3<f64> {
    let mut c = Vector3::repeat(0.5) + sh[0] * SH_C0;
    if sh.len() >= 4 {
        c += -sh[1] * (SH_C1 * dir[1]) + sh[2] * (SH_C1 * dir[2]) - sh[3] * (SH_C1 * dir[0]);
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Gradients of [`sh_to_color`]: per-coefficient scalar weights plus the
/// derivative of the pre-clamp color with respect to the view direction.
/// `clamped` marks channels whose subgradient is zero.
pub struct ShColorGrad {
    /// Weight multiplying each SH coefficient vector (shared across channels).
    pub coeff_weight: [f64; 4],
    /// d(pre-clamp color)/d(dir): rows are color channels, columns dir axes.
    pub d_dir: Matrix3<f64>,
    pub clamped: [bool; 3],
}

pub fn sh_to_color_grad(sh: &[Vector3<f64>], dir: Vector3<f64>) -> ShColorGrad {
    let mut pre = Vector3::repeat(0.5) + sh[0] * SH_C0;
    let mut coeff_weight = [SH_C0, 0.0, 0.0, 0.0];
    let mut d_dir = Matrix3::zeros();
    if sh.len() >= 4 {
        pre += -sh[1] * (SH_C1 * dir[1]) + sh[2] * (SH_C1 * dir[2]) - sh[3] * (SH_C1 * dir[0]);
        coeff_weight[1] = -SH_C1 * dir[1];
        coeff_weight[2] = SH_C1 * dir[2];
        coeff_weight[3] = -SH_C1 * dir[0];
        for ch in 0..3 {
            d_dir[(ch, 0)] = -SH_C1 * sh[3][ch];
            d_dir[(ch, 1)] = -SH_C1 * sh[1][ch];
            d_dir[(ch, 2)] = SH_C1 * sh[2][ch];
        }
    }
    let clamped = [
        !(0.0..=1.0).contains(&pre[0]),
        !(0.0..=1.0).contains(&pre[1]),
        !(0.0..=1.0).contains(&pre[2]),
    ];
    ShColorGrad {
        coeff_weight,
        d_dir,
        clamped,
    }
}

/// Number of SH coefficient triples for a band limit (degree).
pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Infers the SH degree from a coefficient-triple count, if it is exact.
pub fn sh_degree_from_count(count: usize) -> Option<usize> {
    for d in 0..=8 {
        if sh_coeff_count(d) == count {
            return Some(d);
        }
    }
    None
}

/// Standard normal deviate via Box-Muller.
pub fn normal_deviate<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform unit vector.
pub fn random_unit_vector<R: rand::Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            normal_deviate(rng),
            normal_deviate(rng),
            normal_deviate(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}
