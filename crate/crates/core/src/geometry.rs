//! Splat primitives, 3D covariance, the EWA screen-space projection and the
//! pinhole camera model.
//!
//! Every forward function that participates in training has a matching
//! `*_backward` that maps an upstream gradient to the inputs. Covariance
//! gradients are expressed as full symmetric 3×3 (or 2×2) matrices `G` with
//! `dL = Σ_ij G_ij dΣ_ij`.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Number of real SH coefficients per channel (degrees 0 through 3).
pub const SH_COEFFS: usize = 16;
/// Length of the per-Gaussian feature fed to the ASG parameter network.
pub const FEATURE_DIM: usize = 24;
/// Low-pass dilation added to the projected covariance diagonal, in px².
pub const SCREEN_DILATION: f64 = 0.3;

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// One splat.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub rotation: Quat,
    /// Natural log of the per-axis standard deviation.
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// Real SH coefficients, `sh[basis][channel]`.
    pub sh: [[f64; 3]; SH_COEFFS],
    pub feature: [f64; FEATURE_DIM],
}

impl Gaussian {
    /// Flattened length, see [`Gaussian::write_params`].
    pub const PARAM_LEN: usize = 3 + 4 + 3 + 1 + 3 * SH_COEFFS + FEATURE_DIM;

    pub const POSITION: std::ops::Range<usize> = 0..3;
    pub const ROTATION: std::ops::Range<usize> = 3..7;
    pub const LOG_SCALE: std::ops::Range<usize> = 7..10;
    pub const OPACITY: std::ops::Range<usize> = 10..11;
    pub const SH_DC: std::ops::Range<usize> = 11..14;
    pub const SH_REST: std::ops::Range<usize> = 14..59;
    pub const FEATURE: std::ops::Range<usize> = 59..83;

    /// Isotropic grey splat at `position`.
    pub fn new(position: Vec3, scale: f64, opacity: f64) -> Self {
        Gaussian {
            position,
            rotation: IDENTITY_QUAT,
            log_scale: Vec3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh: [[0.0; 3]; SH_COEFFS],
            feature: [0.0; FEATURE_DIM],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn write_params(&self, out: &mut [f64]) {
        assert_eq!(out.len(), Self::PARAM_LEN);
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..7].copy_from_slice(&self.rotation);
        out[7..10].copy_from_slice(self.log_scale.as_slice());
        out[10] = self.opacity_logit;
        for (k, c) in self.sh.iter().enumerate() {
            out[11 + 3 * k..14 + 3 * k].copy_from_slice(c);
        }
        out[59..83].copy_from_slice(&self.feature);
    }

    pub fn read_params(&mut self, src: &[f64]) {
        assert_eq!(src.len(), Self::PARAM_LEN);
        self.position = Vec3::from_column_slice(&src[0..3]);
        self.rotation.copy_from_slice(&src[3..7]);
        self.log_scale = Vec3::from_column_slice(&src[7..10]);
        self.opacity_logit = src[10];
        for (k, c) in self.sh.iter_mut().enumerate() {
            c.copy_from_slice(&src[11 + 3 * k..14 + 3 * k]);
        }
        self.feature.copy_from_slice(&src[59..83]);
    }

    pub fn params(&self) -> [f64; Self::PARAM_LEN] {
        let mut out = [0.0; Self::PARAM_LEN];
        self.write_params(&mut out);
        out
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.rotation);
        if n > 0.0 && n.is_finite() {
            for c in &mut self.rotation {
                *c /= n;
            }
        } else {
            self.rotation = IDENTITY_QUAT;
        }
    }
}

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
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

/// Pulls `dL/dR` back to the components of the (unit) quaternion that built `R`.
pub fn quat_to_matrix_backward(q: &Quat, d_r: &Mat3) -> Quat {
    let [w, x, y, z] = *q;
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Mat3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Mat3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    ]
}

/// `q / |q|`.
pub fn normalize_quat(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Gradient through `q / |q|`, given the gradient w.r.t. the normalized value.
pub fn normalize_quat_backward(q: &Quat, d_unit: &Quat) -> Quat {
    let n = quat_norm(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot: f64 = (0..4).map(|i| u[i] * d_unit[i]).sum();
    [
        (d_unit[0] - u[0] * dot) / n,
        (d_unit[1] - u[1] * dot) / n,
        (d_unit[2] - u[2] * dot) / n,
        (d_unit[3] - u[3] * dot) / n,
    ]
}

/// Upper triangle of a symmetric 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym3 {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl Sym3 {
    pub fn from_matrix(m: &Mat3) -> Self {
        Sym3 {
            xx: m[(0, 0)],
            xy: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            xz: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            yy: m[(1, 1)],
            yz: 0.5 * (m[(1, 2)] + m[(2, 1)]),
            zz: m[(2, 2)],
        }
    }

    pub fn to_matrix(&self) -> Mat3 {
        Mat3::new(
            self.xx, self.xy, self.xz, self.xy, self.yy, self.yz, self.xz, self.yz, self.zz,
        )
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} is not finite")))
    }
}

/// `R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
///
/// The quaternion is renormalized internally; it must already be within
/// 1e-3 of unit length.
pub fn covariance3d(rotation: &Quat, log_scale: &Vec3) -> Result<Sym3> {
    check_finite("rotation", rotation)?;
    check_finite("log_scale", log_scale.as_slice())?;
    let n = quat_norm(rotation);
    if (n - 1.0).abs() >= 1e-3 {
        return Err(Error::InvalidParameter(format!(
            "rotation quaternion has norm {n}, expected unit length"
        )));
    }
    let r = quat_to_matrix(&normalize_quat(rotation));
    let s = log_scale.map(f64::exp);
    let m = r * Mat3::from_diagonal(&s);
    let cov = Sym3::from_matrix(&(m * m.transpose()));
    check_finite("covariance", &[cov.xx, cov.xy, cov.xz, cov.yy, cov.yz, cov.zz])?;
    Ok(cov)
}

/// Gradient of [`covariance3d`] w.r.t. the raw quaternion and the log-scales.
pub fn covariance3d_backward(rotation: &Quat, log_scale: &Vec3, d_cov: &Mat3) -> (Quat, Vec3) {
    let unit = normalize_quat(rotation);
    let r = quat_to_matrix(&unit);
    let s = log_scale.map(f64::exp);
    let m = r * Mat3::from_diagonal(&s);
    let d_m = (d_cov + d_cov.transpose()) * m;
    // M = R·S: dR = dM·S, ds_k = Σ_i R_ik dM_ik.
    let d_r = d_m * Mat3::from_diagonal(&s);
    let mut d_log_scale = Vec3::zeros();
    for k in 0..3 {
        let ds: f64 = (0..3).map(|i| r[(i, k)] * d_m[(i, k)]).sum();
        d_log_scale[k] = ds * s[k];
    }
    let d_unit = quat_to_matrix_backward(&unit, &d_r);
    (normalize_quat_backward(rotation, &d_unit), d_log_scale)
}

/// Pinhole camera with an OpenCV-style frame: +z forward, +y down. Pixel
/// `(col, row)` has its center at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub const DEFAULT_NEAR: f64 = 0.01;
    pub const DEFAULT_FAR: f64 = 100.0;

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        focal: [f64; 2],
        principal: [f64; 2],
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            rotation,
            translation,
            focal,
            principal,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Mat3::identity()).abs().max();
        if !(orth <= 1e-6) || !((r.determinant() - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidParameter(
                "camera rotation must be orthonormal with determinant +1".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter(
                "camera resolution must be at least 1x1".into(),
            ));
        }
        if !(self.near < self.far) || !(self.near > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "camera clip range ({}, {}) is invalid",
                self.near, self.far
            )));
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::InvalidParameter("focal length must be positive".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`, principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vec3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            rotation,
            translation,
            focal: [focal, focal],
            principal: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
            near: Self::DEFAULT_NEAR,
            far: Self::DEFAULT_FAR,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        world_to_camera(self, p)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project(&self, p_cam: &Vec3) -> [f64; 2] {
        [
            self.focal[0] * p_cam.x / p_cam.z + self.principal[0],
            self.focal[1] * p_cam.y / p_cam.z + self.principal[1],
        ]
    }

    /// Same pose, intrinsics rescaled to a `width × height` image.
    pub fn scaled(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            focal: [self.focal[0] * sx, self.focal[1] * sy],
            principal: [self.principal[0] * sx, self.principal[1] * sy],
            width,
            height,
            ..self.clone()
        }
    }

    /// Perspective Jacobian of the pixel map at camera-space point `t`.
    pub fn jacobian(&self, t: &Vec3) -> Matrix2x3<f64> {
        let [fx, fy] = self.focal;
        let iz = 1.0 / t.z;
        Matrix2x3::new(
            fx * iz,
            0.0,
            -fx * t.x * iz * iz,
            0.0,
            fy * iz,
            -fy * t.y * iz * iz,
        )
    }
}

pub fn world_to_camera(cam: &Camera, p: &Vec3) -> Vec3 {
    cam.rotation * p + cam.translation
}

/// Projected splat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    /// Pixel-space center.
    pub mean: [f64; 2],
    /// Upper triangle `(a, b, c)` of the inverse dilated 2D covariance.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    /// `3·sqrt(λ_max)` of the dilated covariance, in pixels.
    pub screen_radius: f64,
}

impl Splat2D {
    /// Largest eigenvalue of the dilated 2D covariance.
    pub fn max_variance(&self) -> f64 {
        let r = self.screen_radius / 3.0;
        r * r
    }
}

/// Projected covariance `J W Σ Wᵀ Jᵀ` before dilation, as `(a, b, c)`.
pub fn screen_covariance(position: &Vec3, cov: &Sym3, cam: &Camera) -> [f64; 3] {
    let t = cam.world_to_camera(position);
    let j = cam.jacobian(&t);
    let w = &cam.rotation;
    let s = j * w * cov.to_matrix() * w.transpose() * j.transpose();
    [s[(0, 0)], 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)]]
}

/// EWA projection. `None` is the culled sentinel: depth outside the clip
/// range, or a dilated covariance that is not positive definite.
pub fn project_gaussian(position: &Vec3, cov: &Sym3, cam: &Camera) -> Option<Splat2D> {
    let t = cam.world_to_camera(position);
    if !(t.z > cam.near && t.z < cam.far) {
        return None;
    }
    let [a, b, c] = screen_covariance(position, cov, cam);
    let a = a + SCREEN_DILATION;
    let c = c + SCREEN_DILATION;
    let det = a * c - b * b;
    if !(det > 0.0) || !(a > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let mean = cam.project(&t);
    Some(Splat2D {
        mean,
        conic: [c / det, -b / det, a / det],
        depth: t.z,
        screen_radius: 3.0 * lambda_max.sqrt(),
    })
}

/// Gradient of [`project_gaussian`] w.r.t. the world position and the 3D
/// covariance, given `dL/dmean` (px) and `dL/dconic` on the `(a, b, c)` entries.
pub fn project_gaussian_backward(
    position: &Vec3,
    cov: &Sym3,
    cam: &Camera,
    d_mean: [f64; 2],
    d_conic: [f64; 3],
) -> (Vec3, Mat3) {
    let w = &cam.rotation;
    let t = cam.world_to_camera(position);
    let j = cam.jacobian(&t);
    let cov_cam = w * cov.to_matrix() * w.transpose();
    let s = j * cov_cam * j.transpose();
    let a = s[(0, 0)] + SCREEN_DILATION;
    let b = 0.5 * (s[(0, 1)] + s[(1, 0)]);
    let c = s[(1, 1)] + SCREEN_DILATION;
    let det = a * c - b * b;
    let det2 = det * det;
    let [ga_, gb_, gc_] = d_conic;
    // conic = (c, -b, a) / det
    let g_a = ga_ * (-c * c / det2) + gb_ * (b * c / det2) + gc_ * (-b * b / det2);
    let g_b = ga_ * (2.0 * b * c / det2) + gb_ * (-1.0 / det - 2.0 * b * b / det2)
        + gc_ * (2.0 * a * b / det2);
    let g_c = ga_ * (-b * b / det2) + gb_ * (a * b / det2) + gc_ * (-a * a / det2);
    let g2 = nalgebra::Matrix2::new(g_a, 0.5 * g_b, 0.5 * g_b, g_c);

    let d_cov_cam = j.transpose() * g2 * j;
    let d_j = 2.0 * g2 * j * cov_cam;
    let d_cov = w.transpose() * d_cov_cam * w;

    let [fx, fy] = cam.focal;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vec3::zeros();
    // Jacobian entries as functions of t.
    d_t.x += d_j[(0, 2)] * (-fx * iz2);
    d_t.y += d_j[(1, 2)] * (-fy * iz2);
    d_t.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    // Pixel mean.
    d_t.x += d_mean[0] * fx * iz;
    d_t.y += d_mean[1] * fy * iz;
    d_t.z += -d_mean[0] * fx * t.x * iz2 - d_mean[1] * fy * t.y * iz2;

    (w.transpose() * d_t, d_cov)
}

/// Which scale axis is the normal, and whether it was flipped to face the camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalAxis {
    pub axis: usize,
    pub flipped: bool,
}

/// Rotated basis vector of the smallest scale axis, oriented so that
/// `n · to_camera >= 0`. Ties go to the lowest axis index.
pub fn shortest_axis_normal(rotation: &Quat, log_scale: &Vec3, to_camera: &Vec3) -> (Vec3, NormalAxis) {
    let mut axis = 0;
    for k in 1..3 {
        if log_scale[k] < log_scale[axis] {
            axis = k;
        }
    }
    let r = quat_to_matrix(&normalize_quat(rotation));
    let n = r.column(axis).into_owned();
    let flipped = n.dot(to_camera) < 0.0;
    (if flipped { -n } else { n }, NormalAxis { axis, flipped })
}

/// Gradient of [`shortest_axis_normal`] w.r.t. the raw quaternion.
pub fn shortest_axis_normal_backward(rotation: &Quat, which: NormalAxis, d_n: &Vec3) -> Quat {
    let unit = normalize_quat(rotation);
    let sign = if which.flipped { -1.0 } else { 1.0 };
    let mut d_r = Mat3::zeros();
    for i in 0..3 {
        d_r[(i, which.axis)] = sign * d_n[i];
    }
    normalize_quat_backward(rotation, &quat_to_matrix_backward(&unit, &d_r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> Quat {
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        normalize_quat(&q)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Rotation matrix from axis-angle (Rodrigues), independent of the quaternion path.
    fn quat_matrix_oracle(q: &Quat) -> [[f64; 3]; 3] {
        let half = q[0].clamp(-1.0, 1.0).acos();
        let angle = 2.0 * half;
        let s = half.sin();
        let (kx, ky, kz) = if s.abs() < 1e-12 {
            (1.0, 0.0, 0.0)
        } else {
            (q[1] / s, q[2] / s, q[3] / s)
        };
        let (c, sn) = (angle.cos(), angle.sin());
        let t = 1.0 - c;
        [
            [t * kx * kx + c, t * kx * ky - sn * kz, t * kx * kz + sn * ky],
            [t * kx * ky + sn * kz, t * ky * ky + c, t * ky * kz - sn * kx],
            [t * kx * kz - sn * ky, t * ky * kz + sn * kx, t * kz * kz + c],
        ]
    }

    #[test]
    fn axis_aligned_covariance() {
        let cov = covariance3d(&IDENTITY_QUAT, &Vec3::new(0.0, 2f64.ln(), 3f64.ln())).unwrap();
        let m = cov.to_matrix();
        let expected = Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 9.0));
        assert!((m - expected).abs().max() < 1e-12);
    }

    #[test]
    fn quarter_turn_permutes_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = [h.cos(), 0.0, 0.0, h.sin()];
        let cov = covariance3d(&q, &Vec3::new(2f64.ln(), 0.0, 0.0)).unwrap();
        let expected = Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0));
        assert!((cov.to_matrix() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let ls = Vec3::new(
                rng.random_range(-2.0..1.0),
                rng.random_range(-2.0..1.0),
                rng.random_range(-2.0..1.0),
            );
            let r = quat_matrix_oracle(&q);
            let s2 = [(2.0 * ls[0]).exp(), (2.0 * ls[1]).exp(), (2.0 * ls[2]).exp()];
            let cov = covariance3d(&q, &ls).unwrap().to_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += r[i][k] * s2[k] * r[j][k];
                    }
                    assert!((cov[(i, j)] - acc).abs() < 1e-10);
                }
            }
            // Eigenvalues are the squared scales.
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut expect = s2.to_vec();
            expect.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(covariance3d(&[f64::NAN, 0.0, 0.0, 0.0], &Vec3::zeros()).is_err());
        assert!(covariance3d(&IDENTITY_QUAT, &Vec3::new(f64::INFINITY, 0.0, 0.0)).is_err());
        assert!(covariance3d(&[2.0, 0.0, 0.0, 0.0], &Vec3::zeros()).is_err());
        // Slightly off unit length is renormalized.
        let c = covariance3d(&[1.0 + 5e-4, 0.0, 0.0, 0.0], &Vec3::zeros()).unwrap();
        assert!((c.xx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let ls = Vec3::new(
                rng.random_range(-1.0..0.5),
                rng.random_range(-1.0..0.5),
                rng.random_range(-1.0..0.5),
            );
            let mut g = Mat3::zeros();
            for v in g.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let g = g + g.transpose();
            let f = |q: &Quat, ls: &Vec3| covariance3d(q, ls).unwrap().to_matrix().component_mul(&g).sum();
            let (dq, dls) = covariance3d_backward(&q, &ls, &g);
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (f(&qp, &ls) - f(&qm, &ls)) / (2.0 * h);
                assert!(rel_err(dq[k], fd) < 1e-3, "dq[{k}] {} vs {fd}", dq[k]);
            }
            for k in 0..3 {
                let mut lp = ls;
                let mut lm = ls;
                lp[k] += h;
                lm[k] -= h;
                let fd = (f(&q, &lp) - f(&q, &lm)) / (2.0 * h);
                assert!(rel_err(dls[k], fd) < 1e-3);
            }
        }
    }

    fn axis_camera(focal: f64) -> Camera {
        Camera::new(
            Mat3::identity(),
            Vec3::zeros(),
            [focal, focal],
            [16.0, 16.0],
            32,
            32,
            0.01,
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn on_axis_projection_scales_with_focal() {
        let cov = Sym3::from_matrix(&Mat3::identity());
        let p = Vec3::new(0.0, 0.0, 2.0);
        let s = screen_covariance(&p, &cov, &axis_camera(2.0));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12 && (s[2] - 1.0).abs() < 1e-12);
        let s = screen_covariance(&p, &cov, &axis_camera(4.0));
        assert!((s[0] - 4.0).abs() < 1e-12 && (s[2] - 4.0).abs() < 1e-12);

        let splat = project_gaussian(&p, &cov, &axis_camera(2.0)).unwrap();
        assert_eq!(splat.mean, [16.0, 16.0]);
        assert!((splat.conic[0] - 1.0 / 1.3).abs() < 1e-12);
        assert!((splat.screen_radius - 3.0 * 1.3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = Camera::look_at(
            Vec3::new(0.3, -0.2, -3.0),
            Vec3::new(0.1, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            40.0,
            64,
            48,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-4;
        for _ in 0..20 {
            let t = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.5..4.0),
            );
            let j = cam.jacobian(&t);
            for k in 0..3 {
                let mut tp = t;
                let mut tm = t;
                tp[k] += h;
                tm[k] -= h;
                let (pp, pm) = (cam.project(&tp), cam.project(&tm));
                for r in 0..2 {
                    let fd = (pp[r] - pm[r]) / (2.0 * h);
                    assert!((j[(r, k)] - fd).abs() <= 1e-4 * fd.abs().max(1e-8) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn conic_inverts_dilated_covariance() {
        let cam = axis_camera(30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            let ls = Vec3::new(
                rng.random_range(-3.0..-1.0),
                rng.random_range(-3.0..-1.0),
                rng.random_range(-3.0..-1.0),
            );
            let cov = covariance3d(&q, &ls).unwrap();
            let p = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 3.0);
            let s = screen_covariance(&p, &cov, &cam);
            let splat = project_gaussian(&p, &cov, &cam).unwrap();
            let sig = nalgebra::Matrix2::new(s[0] + 0.3, s[1], s[1], s[2] + 0.3);
            let con = nalgebra::Matrix2::new(splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2]);
            assert!((sig * con - nalgebra::Matrix2::identity()).abs().max() < 1e-6);
        }
    }

    #[test]
    fn projection_culls_outside_clip_range() {
        let cam = axis_camera(2.0);
        let cov = Sym3::from_matrix(&Mat3::identity());
        assert!(project_gaussian(&Vec3::new(0.0, 0.0, -1.0), &cov, &cam).is_none());
        assert!(project_gaussian(&Vec3::new(0.0, 0.0, 0.005), &cov, &cam).is_none());
        assert!(project_gaussian(&Vec3::new(0.0, 0.0, 200.0), &cov, &cam).is_none());
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let cam = Camera::look_at(
            Vec3::new(0.5, 0.4, -3.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            50.0,
            64,
            64,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-4;
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let ls = Vec3::new(
                rng.random_range(-2.5..-1.0),
                rng.random_range(-2.5..-1.0),
                rng.random_range(-2.5..-1.0),
            );
            let cov = covariance3d(&q, &ls).unwrap();
            let p = Vec3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            let wm: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let wc: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let f = |p: &Vec3, cov: &Sym3| {
                let s = project_gaussian(p, cov, &cam).unwrap();
                wm[0] * s.mean[0] + wm[1] * s.mean[1] + (0..3).map(|i| wc[i] * s.conic[i]).sum::<f64>()
            };
            let (dp, dcov) = project_gaussian_backward(&p, &cov, &cam, wm, wc);
            for k in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[k] += h;
                pm[k] -= h;
                let fd = (f(&pp, &cov) - f(&pm, &cov)) / (2.0 * h);
                assert!(rel_err(dp[k], fd) < 1e-3, "dp[{k}] {} vs {fd}", dp[k]);
            }
            // Perturb covariance entries symmetrically.
            for (i, j) in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)] {
                let mut cp = cov.to_matrix();
                let mut cm = cov.to_matrix();
                let hh = h * 1e-2;
                cp[(i, j)] += hh;
                cm[(i, j)] -= hh;
                if i != j {
                    cp[(j, i)] += hh;
                    cm[(j, i)] -= hh;
                }
                let fd = (f(&p, &Sym3::from_matrix(&cp)) - f(&p, &Sym3::from_matrix(&cm))) / (2.0 * hh);
                let an = if i == j { dcov[(i, j)] } else { dcov[(i, j)] + dcov[(j, i)] };
                assert!(rel_err(an, fd) < 1e-3, "dcov[{i}{j}] {an} vs {fd}");
            }
        }
    }

    #[test]
    fn normal_examples() {
        let ls = Vec3::new(0.0, 0.0, 0.1f64.ln());
        let (n, _) = shortest_axis_normal(&IDENTITY_QUAT, &ls, &Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(n, Vec3::new(0.0, 0.0, 1.0));
        let (n, w) = shortest_axis_normal(&IDENTITY_QUAT, &ls, &Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(n, Vec3::new(0.0, 0.0, -1.0));
        assert!(w.flipped);
        let (n, w) = shortest_axis_normal(&IDENTITY_QUAT, &Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(n, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(w.axis, 0);
    }

    #[test]
    fn normal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-4;
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let ls = Vec3::new(rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0));
            let view = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let w = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (n0, which) = shortest_axis_normal(&q, &ls, &view);
            if n0.dot(&view).abs() < 1e-2 {
                continue;
            }
            let dq = shortest_axis_normal_backward(&q, which, &w);
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (shortest_axis_normal(&qp, &ls, &view).0.dot(&w)
                    - shortest_axis_normal(&qm, &ls, &view).0.dot(&w))
                    / (2.0 * h);
                assert!(rel_err(dq[k], fd) < 1e-3);
            }
        }
    }

    #[test]
    fn world_to_camera_examples() {
        let id = Camera::new(Mat3::identity(), Vec3::zeros(), [1.0, 1.0], [0.5, 0.5], 1, 1, 0.1, 10.0).unwrap();
        assert_eq!(id.world_to_camera(&Vec3::new(1.0, 2.0, 3.0)), Vec3::new(1.0, 2.0, 3.0));
        let tr = Camera { translation: Vec3::new(0.0, 0.0, 5.0), ..id.clone() };
        assert_eq!(world_to_camera(&tr, &Vec3::zeros()), Vec3::new(0.0, 0.0, 5.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let r = quat_to_matrix(&random_quat(&mut rng));
            let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let cam = Camera { rotation: r, translation: t, ..id.clone() };
            let p = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let back = cam.camera_to_world(&cam.world_to_camera(&p));
            assert!((back - p).norm() < 1e-6);
        }
    }

    #[test]
    fn camera_validation() {
        let bad = Camera::new(Mat3::identity() * 2.0, Vec3::zeros(), [1.0, 1.0], [0.0, 0.0], 4, 4, 0.1, 1.0);
        assert!(bad.is_err());
        let reflect = Camera::new(Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0)), Vec3::zeros(), [1.0, 1.0], [0.0, 0.0], 4, 4, 0.1, 1.0);
        assert!(reflect.is_err());
        assert!(Camera::new(Mat3::identity(), Vec3::zeros(), [1.0, 1.0], [0.0, 0.0], 0, 4, 0.1, 1.0).is_err());
        assert!(Camera::new(Mat3::identity(), Vec3::zeros(), [1.0, 1.0], [0.0, 0.0], 4, 4, 1.0, 1.0).is_err());
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), 10.0, 8, 8);
        cam.validate().unwrap();
        assert!((cam.center() - Vec3::new(0.0, 0.0, -3.0)).norm() < 1e-12);
    }

    #[test]
    fn param_flattening_round_trips() {
        let mut g = Gaussian::new(Vec3::new(1.0, 2.0, 3.0), 0.1, 0.3);
        g.sh[5][2] = 0.7;
        g.feature[23] = -1.5;
        let p = g.params();
        let mut h = Gaussian::new(Vec3::zeros(), 1.0, 0.5);
        h.read_params(&p);
        assert_eq!(g, h);
        assert_eq!(p[Gaussian::SH_REST.start + 3 * 4 + 2], 0.7);
    }
}
