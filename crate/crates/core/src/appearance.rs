//! View-dependent color.
//!
//! A splat's color is split into a smooth diffuse part, evaluated from its
//! real SH coefficients along the view direction, and a specular part. The
//! specular part comes from a small pipeline: a per-splat feature vector is
//! decoded by the parameter network (`theta`) into sharpness and amplitude
//! values for a fixed bank of anisotropic spherical Gaussian (ASG) lobes, the
//! lobes are queried along the reflected view direction, and the stacked lobe
//! responses are decoded by the color network (`psi`) together with an
//! encoded view direction and the normal-view cosine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    shortest_axis_normal, shortest_axis_normal_backward, softplus, sigmoid, Gaussian, NormalAxis, Quat,
    Vec3, FEATURE_DIM, SH_COEFFS,
};
use crate::nn::{Activation, Mlp, Tape};

/// Number of ASG lobes in the default bank.
pub const NUM_LOBES: usize = 32;
/// Frequency bands used to encode the view direction.
pub const PE_ORDER: usize = 2;
/// Floor added after the softplus on both sharpness values.
pub const SHARPNESS_FLOOR: f64 = 1e-4;

/// Degree-0 SH basis constant; `rgb = SH_C0 · c + 0.5`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real SH basis values, degrees 0–3, for a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShEval {
    pub basis: [f64; SH_COEFFS],
}

impl ShEval {
    pub fn new(dir: &Vec3) -> Self {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        ShEval {
            basis: [
                SH_C0,
                -SH_C1 * y,
                SH_C1 * z,
                -SH_C1 * x,
                SH_C2[0] * x * y,
                SH_C2[1] * y * z,
                SH_C2[2] * (2.0 * zz - xx - yy),
                SH_C2[3] * x * z,
                SH_C2[4] * (xx - yy),
                SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy),
            ],
        }
    }

    /// Gradient of every basis function w.r.t. the (unnormalized) direction components.
    pub fn gradients(dir: &Vec3) -> [[f64; 3]; SH_COEFFS] {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c2 = SH_C2;
        let c3 = SH_C3;
        [
            [0.0, 0.0, 0.0],
            [0.0, -SH_C1, 0.0],
            [0.0, 0.0, SH_C1],
            [-SH_C1, 0.0, 0.0],
            [c2[0] * y, c2[0] * x, 0.0],
            [0.0, c2[1] * z, c2[1] * y],
            [-2.0 * c2[2] * x, -2.0 * c2[2] * y, 4.0 * c2[2] * z],
            [c2[3] * z, 0.0, c2[3] * x],
            [2.0 * c2[4] * x, -2.0 * c2[4] * y, 0.0],
            [6.0 * c3[0] * x * y, c3[0] * (3.0 * xx - 3.0 * yy), 0.0],
            [c3[1] * y * z, c3[1] * x * z, c3[1] * x * y],
            [-2.0 * c3[2] * x * y, c3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c3[2] * y * z],
            [-6.0 * c3[3] * x * z, -6.0 * c3[3] * y * z, c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
            [c3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c3[4] * x * y, 8.0 * c3[4] * x * z],
            [2.0 * c3[5] * x * z, -2.0 * c3[5] * y * z, c3[5] * (xx - yy)],
            [c3[6] * (3.0 * xx - 3.0 * yy), -6.0 * c3[6] * x * y, 0.0],
        ]
    }
}

/// Raw SH sum plus the 0.5 offset, before the clamp at zero.
fn sh_unclamped(coeffs: &[[f64; 3]; SH_COEFFS], dir: &Vec3) -> [f64; 3] {
    let basis = ShEval::new(dir).basis;
    let mut rgb = [0.5; 3];
    for (b, c) in basis.iter().zip(coeffs) {
        for ch in 0..3 {
            rgb[ch] += b * c[ch];
        }
    }
    rgb
}

/// `max(Σ c_lm Y_lm(dir) + 0.5, 0)` per channel.
pub fn eval_sh_diffuse(coeffs: &[[f64; 3]; SH_COEFFS], dir: &Vec3) -> [f64; 3] {
    sh_unclamped(coeffs, dir).map(|v| v.max(0.0))
}

/// Gradients of [`eval_sh_diffuse`] w.r.t. the coefficients and the direction.
pub fn eval_sh_diffuse_backward(
    coeffs: &[[f64; 3]; SH_COEFFS],
    dir: &Vec3,
    d_rgb: &[f64; 3],
) -> ([[f64; 3]; SH_COEFFS], Vec3) {
    let raw = sh_unclamped(coeffs, dir);
    let g = [0, 1, 2].map(|c| if raw[c] > 0.0 { d_rgb[c] } else { 0.0 });
    let basis = ShEval::new(dir).basis;
    let grads = ShEval::gradients(dir);
    let mut d_coeffs = [[0.0; 3]; SH_COEFFS];
    let mut d_dir = Vec3::zeros();
    for k in 0..SH_COEFFS {
        let mut s = 0.0;
        for c in 0..3 {
            d_coeffs[k][c] = g[c] * basis[k];
            s += g[c] * coeffs[k][c];
        }
        d_dir += Vec3::new(grads[k][0], grads[k][1], grads[k][2]) * s;
    }
    (d_coeffs, d_dir)
}

/// One orthonormal lobe frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LobeFrame {
    pub tangent: Vec3,
    pub bitangent: Vec3,
    pub axis: Vec3,
}

/// The fixed lobe frames shared by every splat.
#[derive(Clone, Debug, PartialEq)]
pub struct AsgBank {
    pub frames: Vec<LobeFrame>,
}

impl AsgBank {
    pub fn num_lobes(&self) -> usize {
        self.frames.len()
    }

    /// Applies a rotation to every frame.
    pub fn rotated(&self, r: &crate::geometry::Mat3) -> AsgBank {
        AsgBank {
            frames: self
                .frames
                .iter()
                .map(|f| LobeFrame {
                    tangent: r * f.tangent,
                    bitangent: r * f.bitangent,
                    axis: r * f.axis,
                })
                .collect(),
        }
    }
}

/// Lobe axes on a Fibonacci spiral over the upper hemisphere, the first at
/// the pole. `seed` only rotates the spiral about the pole.
pub fn init_asg_axes(num_lobes: usize, seed: u64) -> Result<AsgBank> {
    if num_lobes == 0 {
        return Err(Error::InvalidParameter("an ASG bank needs at least one lobe".into()));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let offset = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..std::f64::consts::TAU);
    let frames = (0..num_lobes)
        .map(|i| {
            let cos_t = 1.0 - i as f64 / num_lobes as f64;
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi = offset + golden * i as f64;
            let axis = Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
            let mut reference = Vec3::new(0.0, 1.0, 0.0);
            if axis.dot(&reference).abs() > 0.99 {
                reference = Vec3::new(1.0, 0.0, 0.0);
            }
            let tangent = (reference - axis * axis.dot(&reference)).normalize();
            let bitangent = axis.cross(&tangent);
            LobeFrame {
                tangent,
                bitangent,
                axis,
            }
        })
        .collect();
    Ok(AsgBank { frames })
}

/// Activated per-lobe ASG parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AsgParams {
    pub sharpness_x: Vec<f64>,
    pub sharpness_y: Vec<f64>,
    pub amplitude: Vec<[f64; 2]>,
}

impl AsgParams {
    /// Raw layout: `[λ_raw; N] ++ [μ_raw; N] ++ [ξ; 2N]`.
    pub fn from_raw(raw: &[f64], num_lobes: usize) -> Self {
        let n = num_lobes;
        assert_eq!(raw.len(), 4 * n);
        AsgParams {
            sharpness_x: raw[..n].iter().map(|&v| softplus(v) + SHARPNESS_FLOOR).collect(),
            sharpness_y: raw[n..2 * n].iter().map(|&v| softplus(v) + SHARPNESS_FLOOR).collect(),
            amplitude: (0..n).map(|i| [raw[2 * n + 2 * i], raw[2 * n + 2 * i + 1]]).collect(),
        }
    }
}

/// Gradients of the lobe responses w.r.t. the query direction and the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AsgGrads {
    pub direction: Vec3,
    pub sharpness_x: Vec<f64>,
    pub sharpness_y: Vec<f64>,
    pub amplitude: Vec<[f64; 2]>,
}

impl AsgGrads {
    /// Chain through [`AsgParams::from_raw`].
    pub fn to_raw(&self, raw: &[f64]) -> Vec<f64> {
        let n = self.sharpness_x.len();
        let mut out = vec![0.0; 4 * n];
        for i in 0..n {
            out[i] = self.sharpness_x[i] * sigmoid(raw[i]);
            out[n + i] = self.sharpness_y[i] * sigmoid(raw[n + i]);
            out[2 * n + 2 * i] = self.amplitude[i][0];
            out[2 * n + 2 * i + 1] = self.amplitude[i][1];
        }
        out
    }
}

/// `ξ_i · max(ν·z_i, 0) · exp(−λ_i (ν·x_i)² − μ_i (ν·y_i)²)` for every lobe.
pub fn eval_asg(nu: &Vec3, bank: &AsgBank, params: &AsgParams) -> Vec<[f64; 2]> {
    bank.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let smooth = nu.dot(&f.axis).max(0.0);
            if smooth == 0.0 {
                return [0.0, 0.0];
            }
            let a = nu.dot(&f.tangent);
            let b = nu.dot(&f.bitangent);
            let e = (-params.sharpness_x[i] * a * a - params.sharpness_y[i] * b * b).exp();
            let w = smooth * e;
            [params.amplitude[i][0] * w, params.amplitude[i][1] * w]
        })
        .collect()
}

pub fn eval_asg_backward(nu: &Vec3, bank: &AsgBank, params: &AsgParams, d_out: &[[f64; 2]]) -> AsgGrads {
    let n = bank.num_lobes();
    let mut grads = AsgGrads {
        direction: Vec3::zeros(),
        sharpness_x: vec![0.0; n],
        sharpness_y: vec![0.0; n],
        amplitude: vec![[0.0; 2]; n],
    };
    for (i, f) in bank.frames.iter().enumerate() {
        let c = nu.dot(&f.axis);
        if c <= 0.0 {
            continue;
        }
        let a = nu.dot(&f.tangent);
        let b = nu.dot(&f.bitangent);
        let (lam, mu) = (params.sharpness_x[i], params.sharpness_y[i]);
        let e = (-lam * a * a - mu * b * b).exp();
        let g = d_out[i];
        grads.amplitude[i] = [g[0] * c * e, g[1] * c * e];
        let gx = g[0] * params.amplitude[i][0] + g[1] * params.amplitude[i][1];
        let d_e = gx * c;
        grads.sharpness_x[i] = -d_e * e * a * a;
        grads.sharpness_y[i] = -d_e * e * b * b;
        let d_a = -2.0 * lam * a * e * d_e;
        let d_b = -2.0 * mu * b * e * d_e;
        let d_c = gx * e;
        grads.direction += f.tangent * d_a + f.bitangent * d_b + f.axis * d_c;
    }
    grads
}

/// Mirror of `to_camera` about `normal`: `2(ω·n)n − ω`.
pub fn reflect(to_camera: &Vec3, normal: &Vec3) -> Vec3 {
    normal * (2.0 * to_camera.dot(normal)) - to_camera
}

/// Returns `(d_to_camera, d_normal)`.
pub fn reflect_backward(to_camera: &Vec3, normal: &Vec3, d_out: &Vec3) -> (Vec3, Vec3) {
    let ng = normal.dot(d_out);
    let d_w = normal * (2.0 * ng) - d_out;
    let d_n = d_out * (2.0 * to_camera.dot(normal)) + to_camera * (2.0 * ng);
    (d_w, d_n)
}

/// `[d, sin(2⁰πd), cos(2⁰πd), …, sin(2^{L−1}πd), cos(2^{L−1}πd)]`.
pub fn positional_encoding(d: &Vec3, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * order);
    out.extend_from_slice(d.as_slice());
    for k in 0..order {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out.extend(d.iter().map(|v| (w * v).sin()));
        out.extend(d.iter().map(|v| (w * v).cos()));
    }
    out
}

pub fn positional_encoding_len(order: usize) -> usize {
    3 + 6 * order
}

pub fn positional_encoding_backward(d: &Vec3, order: usize, d_out: &[f64]) -> Vec3 {
    let mut g = Vec3::new(d_out[0], d_out[1], d_out[2]);
    for k in 0..order {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        let base = 3 + 6 * k;
        for c in 0..3 {
            let t = w * d[c];
            g[c] += w * (t.cos() * d_out[base + c] - t.sin() * d_out[base + 3 + c]);
        }
    }
    g
}

/// `max(c_d + c_s, 0)`; the upper clamp happens only at image write-out.
pub fn compose_color(diffuse: &[f64; 3], specular: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|c| (diffuse[c] + specular[c]).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppearanceMode {
    /// Diffuse SH only (the baseline).
    ShOnly,
    /// SH diffuse plus the ASG specular field.
    AsgField,
}

/// The fixed lobe bank and the color network, for any producer of raw ASG parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecularDecoder {
    pub bank: AsgBank,
    pub psi: Mlp,
    pub pe_order: usize,
}

/// Everything [`SpecularDecoder::backward`] needs.
#[derive(Clone, Debug)]
pub struct SpecularTape {
    asg_raw: Vec<f64>,
    params: AsgParams,
    normal: Vec3,
    view_dir: Vec3,
    omega_r: Vec3,
    psi_tape: Tape,
}

#[derive(Clone, Debug)]
pub struct SpecularGrads {
    pub asg_raw: Vec<f64>,
    pub normal: Vec3,
    /// Gradient w.r.t. the unit camera-to-splat direction.
    pub view_dir: Vec3,
}

impl SpecularDecoder {
    pub fn psi_input_dim(num_lobes: usize, pe_order: usize) -> usize {
        2 * num_lobes + positional_encoding_len(pe_order) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let want = Self::psi_input_dim(self.bank.num_lobes(), self.pe_order);
        if self.psi.input_dim() != want || self.psi.output_dim() != 3 {
            return Err(Error::Config(format!(
                "color network must map {want} inputs to 3 outputs, has {} -> {}",
                self.psi.input_dim(),
                self.psi.output_dim()
            )));
        }
        Ok(())
    }

    /// `normal` faces the camera; `view_dir` points from the camera to the splat.
    pub fn forward(&self, asg_raw: &[f64], normal: &Vec3, view_dir: &Vec3) -> ([f64; 3], SpecularTape) {
        let params = AsgParams::from_raw(asg_raw, self.bank.num_lobes());
        let to_camera = -view_dir;
        let omega_r = reflect(&to_camera, normal);
        let kappa = eval_asg(&omega_r, &self.bank, &params);
        let mut input = Vec::with_capacity(self.psi.input_dim());
        for k in &kappa {
            input.extend_from_slice(k);
        }
        input.extend(positional_encoding(view_dir, self.pe_order));
        input.push(normal.dot(&to_camera));
        let (y, psi_tape) = self.psi.forward(&input).expect("validated decoder");
        (
            [y[0], y[1], y[2]],
            SpecularTape {
                asg_raw: asg_raw.to_vec(),
                params,
                normal: *normal,
                view_dir: *view_dir,
                omega_r,
                psi_tape,
            },
        )
    }

    pub fn backward(&self, tape: &SpecularTape, d_rgb: &[f64; 3], psi_grads: &mut [f64]) -> SpecularGrads {
        let d_in = self.psi.backward(&tape.psi_tape, d_rgb, psi_grads);
        let n = self.bank.num_lobes();
        let d_kappa: Vec<[f64; 2]> = (0..n).map(|i| [d_in[2 * i], d_in[2 * i + 1]]).collect();
        let pe_len = positional_encoding_len(self.pe_order);
        let d_pe = &d_in[2 * n..2 * n + pe_len];
        let d_cos = d_in[2 * n + pe_len];

        let asg = eval_asg_backward(&tape.omega_r, &self.bank, &tape.params, &d_kappa);
        let to_camera = -tape.view_dir;
        let (d_to_cam, mut d_normal) = reflect_backward(&to_camera, &tape.normal, &asg.direction);
        d_normal += to_camera * d_cos;
        let mut d_view = -d_to_cam - tape.normal * d_cos;
        d_view += positional_encoding_backward(&tape.view_dir, self.pe_order, d_pe);
        SpecularGrads {
            asg_raw: asg.to_raw(&tape.asg_raw),
            normal: d_normal,
            view_dir: d_view,
        }
    }
}

/// Per-splat appearance for the explicit (non-anchor) model.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceField {
    pub mode: AppearanceMode,
    /// Feature → raw ASG parameters.
    pub theta: Mlp,
    pub decoder: SpecularDecoder,
}

/// Intermediate values of [`AppearanceField::color`].
#[derive(Clone, Debug)]
pub struct ColorTape {
    offset: Vec3,
    view_dir: Vec3,
    diffuse: [f64; 3],
    specular: Option<(Tape, NormalAxis, SpecularTape)>,
    specular_rgb: [f64; 3],
}

/// Gradients of a splat's color w.r.t. its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorGrads {
    pub position: Vec3,
    pub rotation: Quat,
    pub sh: [[f64; 3]; SH_COEFFS],
    pub feature: [f64; FEATURE_DIM],
}

impl AppearanceField {
    pub fn theta_widths(num_lobes: usize) -> Vec<usize> {
        vec![FEATURE_DIM, 64, 64, 4 * num_lobes]
    }

    pub fn psi_widths(num_lobes: usize, pe_order: usize) -> Vec<usize> {
        vec![SpecularDecoder::psi_input_dim(num_lobes, pe_order), 64, 64, 64, 3]
    }

    /// Default field: 32 lobes, `theta` 24→64→64→128, `psi` 80→64→64→64→3.
    pub fn new(mode: AppearanceMode, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = init_asg_axes(NUM_LOBES, seed)?;
        let theta = Mlp::new(&Self::theta_widths(NUM_LOBES), Activation::Relu, Activation::Linear, &mut rng)?;
        let psi = Mlp::new(&Self::psi_widths(NUM_LOBES, PE_ORDER), Activation::Relu, Activation::Sigmoid, &mut rng)?;
        Self::from_parts(mode, bank, theta, psi, PE_ORDER)
    }

    pub fn from_parts(mode: AppearanceMode, bank: AsgBank, theta: Mlp, psi: Mlp, pe_order: usize) -> Result<Self> {
        let field = AppearanceField {
            mode,
            theta,
            decoder: SpecularDecoder { bank, psi, pe_order },
        };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.decoder.bank.num_lobes();
        if self.theta.input_dim() != FEATURE_DIM || self.theta.output_dim() != 4 * n {
            return Err(Error::Config(format!(
                "parameter network must map {FEATURE_DIM} inputs to {} outputs, has {} -> {}",
                4 * n,
                self.theta.input_dim(),
                self.theta.output_dim()
            )));
        }
        self.decoder.validate()
    }

    pub fn bank(&self) -> &AsgBank {
        &self.decoder.bank
    }

    pub fn psi(&self) -> &Mlp {
        &self.decoder.psi
    }

    /// Specular color only; see [`AppearanceField::color`] for the full composition.
    pub fn specular_color(&self, g: &Gaussian, camera_center: &Vec3) -> [f64; 3] {
        let view_dir = (g.position - camera_center).normalize();
        let (raw, _) = self.theta.forward(&g.feature).expect("validated field");
        let (normal, _) = shortest_axis_normal(&g.rotation, &g.log_scale, &-view_dir);
        self.decoder.forward(&raw, &normal, &view_dir).0
    }

    /// Composed color of `g` seen from `camera_center`.
    pub fn color(&self, g: &Gaussian, camera_center: &Vec3) -> ([f64; 3], ColorTape) {
        let offset = g.position - camera_center;
        let view_dir = offset.normalize();
        let diffuse = eval_sh_diffuse(&g.sh, &view_dir);
        let (specular_rgb, specular) = match self.mode {
            AppearanceMode::ShOnly => ([0.0; 3], None),
            AppearanceMode::AsgField => {
                let (raw, theta_tape) = self.theta.forward(&g.feature).expect("validated field");
                let (normal, which) = shortest_axis_normal(&g.rotation, &g.log_scale, &-view_dir);
                let (rgb, tape) = self.decoder.forward(&raw, &normal, &view_dir);
                (rgb, Some((theta_tape, which, tape)))
            }
        };
        (
            compose_color(&diffuse, &specular_rgb),
            ColorTape {
                offset,
                view_dir,
                diffuse,
                specular,
                specular_rgb,
            },
        )
    }

    /// Backward of [`AppearanceField::color`]; network gradients are accumulated.
    pub fn color_backward(
        &self,
        g: &Gaussian,
        tape: &ColorTape,
        d_rgb: &[f64; 3],
        theta_grads: &mut [f64],
        psi_grads: &mut [f64],
    ) -> ColorGrads {
        let composed = compose_color(&tape.diffuse, &tape.specular_rgb);
        let d = [0, 1, 2].map(|c| if composed[c] > 0.0 { d_rgb[c] } else { 0.0 });
        let (d_sh, mut d_view) = eval_sh_diffuse_backward(&g.sh, &tape.view_dir, &d);
        let mut out = ColorGrads {
            position: Vec3::zeros(),
            rotation: [0.0; 4],
            sh: d_sh,
            feature: [0.0; FEATURE_DIM],
        };
        if let Some((theta_tape, which, spec_tape)) = &tape.specular {
            let sg = self.decoder.backward(spec_tape, &d, psi_grads);
            d_view += sg.view_dir;
            let d_feature = self.theta.backward(theta_tape, &sg.asg_raw, theta_grads);
            out.feature.copy_from_slice(&d_feature);
            // The normal is oriented by a test on the view direction, which is
            // piecewise constant, so it only carries gradient to the rotation.
            out.rotation = shortest_axis_normal_backward(&g.rotation, *which, &sg.normal);
        }
        let dist = tape.offset.norm();
        let v = tape.view_dir;
        out.position = (d_view - v * v.dot(&d_view)) / dist;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_to_matrix, normalize_quat, Mat3};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, n: usize) -> AsgParams {
        AsgParams {
            sharpness_x: (0..n).map(|_| rng.random_range(0.1..8.0)).collect(),
            sharpness_y: (0..n).map(|_| rng.random_range(0.1..8.0)).collect(),
            amplitude: (0..n).map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)]).collect(),
        }
    }

    /// Associated Legendre polynomial with the Condon–Shortley phase.
    fn legendre(l: i32, m: i32, x: f64) -> f64 {
        let mut pmm = 1.0;
        let somx2 = (1.0 - x * x).max(0.0).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * somx2;
            fact += 2.0;
        }
        if l == m {
            return pmm;
        }
        let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
        if l == m + 1 {
            return pmmp1;
        }
        let mut pll = 0.0;
        for ll in (m + 2)..=l {
            pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
            pmm = pmmp1;
            pmmp1 = pll;
        }
        pll
    }

    fn factorial(n: i32) -> f64 {
        (1..=n).map(|v| v as f64).product()
    }

    /// Real SH from spherical coordinates, indexed `l² + l + m`.
    fn sh_oracle(dir: &Vec3) -> [f64; 16] {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let mut out = [0.0; 16];
        for l in 0..=3i32 {
            for m in -l..=l {
                let am = m.abs();
                let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am) / factorial(l + am)).sqrt();
                let p = legendre(l, am, theta.cos());
                let v = match m.cmp(&0) {
                    std::cmp::Ordering::Equal => k * p,
                    std::cmp::Ordering::Greater => 2f64.sqrt() * k * (m as f64 * phi).cos() * p,
                    std::cmp::Ordering::Less => 2f64.sqrt() * k * (am as f64 * phi).sin() * p,
                };
                out[(l * l + l + m) as usize] = v;
            }
        }
        out
    }

    #[test]
    fn sh_zero_and_dc() {
        let d = Vec3::new(0.3, -0.4, 0.8).normalize();
        assert_eq!(eval_sh_diffuse(&[[0.0; 3]; 16], &d), [0.5; 3]);
        let mut c = [[0.0; 3]; 16];
        c[0] = [1.0, -0.5, 2.0];
        let rgb = eval_sh_diffuse(&c, &d);
        for ch in 0..3 {
            let want = (0.2820948 * c[0][ch] + 0.5f64).max(0.0);
            assert!((rgb[ch] - want).abs() < 1e-6);
        }
        assert!((ShEval::new(&d).basis[0] - 0.2820948).abs() < 1e-6);
    }

    #[test]
    fn sh_matches_legendre_oracle() {
        let mut r = rng(1);
        for _ in 0..200 {
            let d = unit(&mut r);
            let ours = ShEval::new(&d).basis;
            let oracle = sh_oracle(&d);
            for k in 0..16 {
                assert!((ours[k] - oracle[k]).abs() < 1e-6, "basis {k}: {} vs {}", ours[k], oracle[k]);
            }
            let mut coeffs = [[0.0; 3]; 16];
            for c in coeffs.iter_mut() {
                for v in c.iter_mut() {
                    *v = r.random_range(-0.3..0.3);
                }
            }
            let rgb = eval_sh_diffuse(&coeffs, &d);
            for ch in 0..3 {
                let s: f64 = (0..16).map(|k| coeffs[k][ch] * oracle[k]).sum::<f64>() + 0.5;
                assert!((rgb[ch] - s.max(0.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sh_dc_only_is_direction_invariant() {
        let mut c = [[0.0; 3]; 16];
        c[0] = [0.4, 0.1, -0.2];
        let mut r = rng(3);
        let base = eval_sh_diffuse(&c, &Vec3::new(0.0, 0.0, 1.0));
        for _ in 0..50 {
            let rgb = eval_sh_diffuse(&c, &unit(&mut r));
            for ch in 0..3 {
                assert!((rgb[ch] - base[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sh_direction_gradient_matches_finite_differences() {
        let mut r = rng(4);
        let h = 1e-5;
        for _ in 0..50 {
            let d = unit(&mut r);
            let mut coeffs = [[0.0; 3]; 16];
            for c in coeffs.iter_mut() {
                for v in c.iter_mut() {
                    *v = r.random_range(-0.3..0.3);
                }
            }
            let w = [0.3, -0.6, 0.9];
            let f = |d: &Vec3| eval_sh_diffuse(&coeffs, d).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let (_, dd) = eval_sh_diffuse_backward(&coeffs, &d, &w);
            for k in 0..3 {
                let mut p = d;
                let mut m = d;
                p[k] += h;
                m[k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - dd[k]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn asg_closed_forms() {
        let bank = init_asg_axes(4, 0).unwrap();
        let mut r = rng(5);
        let params = random_params(&mut r, 4);
        for (i, f) in bank.frames.iter().enumerate() {
            let out = eval_asg(&f.axis, &bank, &params);
            assert!((out[i][0] - params.amplitude[i][0]).abs() < 1e-12);
            assert!((out[i][1] - params.amplitude[i][1]).abs() < 1e-12);

            let below = eval_asg(&-f.axis, &bank, &params);
            assert_eq!(below[i], [0.0, 0.0]);

            let nu = (f.axis + f.tangent).normalize();
            let out = eval_asg(&nu, &bank, &params);
            let want = std::f64::consts::FRAC_1_SQRT_2 * (-params.sharpness_x[i] / 2.0).exp();
            assert!((out[i][0] - params.amplitude[i][0] * want).abs() < 1e-12);
        }
    }

    #[test]
    fn asg_is_rotation_equivariant_and_non_negative() {
        let bank = init_asg_axes(NUM_LOBES, 2).unwrap();
        let mut r = rng(6);
        for _ in 0..200 {
            let params = random_params(&mut r, NUM_LOBES);
            let q = normalize_quat(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
            let rot: Mat3 = quat_to_matrix(&q);
            let nu = unit(&mut r);
            let a = eval_asg(&nu, &bank, &params);
            let b = eval_asg(&(rot * nu), &bank.rotated(&rot), &params);
            for (x, y) in a.iter().zip(&b) {
                assert!((x[0] - y[0]).abs() < 1e-6 && (x[1] - y[1]).abs() < 1e-6);
                assert!(x[0] >= 0.0 && x[1] >= 0.0);
            }
        }
    }

    #[test]
    fn asg_backward_matches_finite_differences() {
        let bank = init_asg_axes(6, 1).unwrap();
        let mut r = rng(7);
        let h = 1e-6;
        for _ in 0..30 {
            let params = random_params(&mut r, 6);
            let nu = unit(&mut r);
            let w: Vec<[f64; 2]> = (0..6).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
            let f = |nu: &Vec3, p: &AsgParams| -> f64 {
                eval_asg(nu, &bank, p).iter().zip(&w).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum()
            };
            let g = eval_asg_backward(&nu, &bank, &params, &w);
            for k in 0..3 {
                let mut p = nu;
                let mut m = nu;
                p[k] += h;
                m[k] -= h;
                let fd = (f(&p, &params) - f(&m, &params)) / (2.0 * h);
                assert!((fd - g.direction[k]).abs() < 1e-5 * fd.abs().max(1.0));
            }
            for i in 0..6 {
                let mut p = params.clone();
                let mut m = params.clone();
                p.sharpness_x[i] += h;
                m.sharpness_x[i] -= h;
                let fd = (f(&nu, &p) - f(&nu, &m)) / (2.0 * h);
                assert!((fd - g.sharpness_x[i]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reflect_examples() {
        let n = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(reflect(&n, &n), n);
        let perp = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(reflect(&perp, &n), -perp);
        let w = reflect(&Vec3::new(0.6, 0.0, 0.8), &n);
        assert!((w - Vec3::new(-0.6, 0.0, 0.8)).norm() < 1e-12);
        let mut r = rng(8);
        for _ in 0..100 {
            let (a, b) = (unit(&mut r), unit(&mut r));
            let once = reflect(&a, &b);
            assert!((once.norm() - 1.0).abs() < 1e-6);
            assert!((reflect(&once, &b) - a).norm() < 1e-6);
        }
    }

    #[test]
    fn positional_encoding_examples() {
        let z = positional_encoding(&Vec3::zeros(), 2);
        assert_eq!(z.len(), 15);
        assert_eq!(&z[3..6], &[0.0; 3]);
        assert_eq!(&z[6..9], &[1.0; 3]);
        assert_eq!(&z[9..12], &[0.0; 3]);
        assert_eq!(&z[12..15], &[1.0; 3]);
        let d = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(positional_encoding(&d, 0), vec![0.1, 0.2, 0.3]);
        let e = positional_encoding(&Vec3::new(0.5, 0.0, 0.0), 1);
        assert!((e[3] - 1.0).abs() < 1e-15 && e[4] == 0.0 && e[5] == 0.0);
        assert!(e[6].abs() < 1e-15 && e[7] == 1.0 && e[8] == 1.0);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose_color(&[0.5; 3], &[0.0; 3]), [0.5; 3]);
        assert_eq!(compose_color(&[0.2, 0.0, 0.0], &[0.3, 0.0, 0.0]), [0.5, 0.0, 0.0]);
        assert_eq!(compose_color(&[0.9; 3], &[0.9; 3]), [1.8; 3]);
    }

    #[test]
    fn single_lobe_bank_sits_at_pole() {
        let b = init_asg_axes(1, 99).unwrap();
        assert!((b.frames[0].axis - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        assert!(init_asg_axes(0, 0).is_err());
    }

    #[test]
    fn bank_frames_are_orthonormal_and_spread() {
        for seed in 0..4 {
            let b = init_asg_axes(NUM_LOBES, seed).unwrap();
            for f in &b.frames {
                assert!(f.axis.z >= 0.0);
                for v in [f.tangent, f.bitangent, f.axis] {
                    assert!((v.norm() - 1.0).abs() < 1e-6);
                }
                assert!(f.tangent.dot(&f.bitangent).abs() < 1e-6);
                assert!(f.tangent.dot(&f.axis).abs() < 1e-6);
                assert!(f.bitangent.dot(&f.axis).abs() < 1e-6);
            }
            let mut min_angle = f64::INFINITY;
            for i in 0..b.frames.len() {
                for j in i + 1..b.frames.len() {
                    let c = b.frames[i].axis.dot(&b.frames[j].axis).clamp(-1.0, 1.0);
                    min_angle = min_angle.min(c.acos().to_degrees());
                }
            }
            assert!(min_angle > 10.0, "min angle {min_angle}");
        }
    }

    fn zero_field() -> AppearanceField {
        let bank = init_asg_axes(NUM_LOBES, 0).unwrap();
        let theta = Mlp::zeros(&AppearanceField::theta_widths(NUM_LOBES), Activation::Relu, Activation::Linear).unwrap();
        let psi = Mlp::zeros(&AppearanceField::psi_widths(NUM_LOBES, PE_ORDER), Activation::Relu, Activation::Sigmoid).unwrap();
        AppearanceField::from_parts(AppearanceMode::AsgField, bank, theta, psi, PE_ORDER).unwrap()
    }

    #[test]
    fn zero_networks_give_half_specular() {
        let field = zero_field();
        let g = Gaussian::new(Vec3::new(0.1, 0.2, 0.3), 0.1, 0.5);
        let c = field.specular_color(&g, &Vec3::new(0.0, 0.0, -3.0));
        assert_eq!(c, [0.5; 3]);
    }

    #[test]
    fn mismatched_networks_are_rejected() {
        let bank = init_asg_axes(8, 0).unwrap();
        let theta = Mlp::zeros(&AppearanceField::theta_widths(NUM_LOBES), Activation::Relu, Activation::Linear).unwrap();
        let psi = Mlp::zeros(&AppearanceField::psi_widths(NUM_LOBES, PE_ORDER), Activation::Relu, Activation::Sigmoid).unwrap();
        assert!(matches!(
            AppearanceField::from_parts(AppearanceMode::AsgField, bank, theta, psi, PE_ORDER),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_lobe_readout_reproduces_closed_form() {
        // psi reads out the first kappa channel through a linear head.
        let reflect_dir = Vec3::new(0.0, 0.0, 1.0);
        let frame = LobeFrame {
            tangent: Vec3::new(1.0, 0.0, 0.0),
            bitangent: Vec3::new(0.0, 1.0, 0.0),
            axis: reflect_dir,
        };
        let bank = AsgBank { frames: vec![frame] };
        let mut psi = Mlp::zeros(&[SpecularDecoder::psi_input_dim(1, PE_ORDER), 3], Activation::Relu, Activation::Linear).unwrap();
        psi.weights_mut(0)[0] = 1.0;
        let decoder = SpecularDecoder { bank, psi, pe_order: PE_ORDER };
        decoder.validate().unwrap();
        // Normal (0,0,1), camera straight above: reflect direction equals the lobe axis.
        let view_dir = Vec3::new(0.0, 0.0, -1.0);
        let raw = [0.3, -0.2, 0.7, 0.1];
        let (rgb, _) = decoder.forward(&raw, &Vec3::new(0.0, 0.0, 1.0), &view_dir);
        assert!((rgb[0] - 0.7).abs() < 1e-12);

        // Tilted view: compare against the closed form along the reflected direction.
        let view_dir = Vec3::new(0.6, 0.0, -0.8);
        let (rgb, _) = decoder.forward(&raw, &Vec3::new(0.0, 0.0, 1.0), &view_dir);
        let w = Vec3::new(0.6, 0.0, 0.8); // reflect(-view_dir) about z
        let p = AsgParams::from_raw(&raw, 1);
        let want = 0.7 * w.z * (-p.sharpness_x[0] * w.x * w.x).exp();
        assert!((rgb[0] - want).abs() < 1e-12);
    }

    #[test]
    fn color_gradient_matches_finite_differences() {
        let field = AppearanceField::new(AppearanceMode::AsgField, 17).unwrap();
        let mut r = rng(18);
        let cam = Vec3::new(0.2, -0.1, -3.0);
        let h = 1e-5;
        for _ in 0..5 {
            let mut g = Gaussian::new(Vec3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)), 0.1, 0.5);
            g.rotation = normalize_quat(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
            g.log_scale = Vec3::new(-2.0, -2.5, -3.0);
            for f in g.feature.iter_mut() {
                *f = r.random_range(-1.0..1.0);
            }
            for c in g.sh.iter_mut() {
                for v in c.iter_mut() {
                    *v = r.random_range(-0.2..0.2);
                }
            }
            let w = [0.7, -0.4, 1.1];
            let loss = |g: &Gaussian| field.color(g, &cam).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let (_, tape) = field.color(&g, &cam);
            let mut tg = vec![0.0; field.theta.param_len()];
            let mut pg = vec![0.0; field.psi().param_len()];
            let grads = field.color_backward(&g, &tape, &w, &mut tg, &mut pg);
            let base = g.params();
            let mut analytic = vec![0.0; Gaussian::PARAM_LEN];
            analytic[0..3].copy_from_slice(grads.position.as_slice());
            analytic[3..7].copy_from_slice(&grads.rotation);
            for k in 0..16 {
                analytic[11 + 3 * k..14 + 3 * k].copy_from_slice(&grads.sh[k]);
            }
            analytic[59..83].copy_from_slice(&grads.feature);
            for i in 0..Gaussian::PARAM_LEN {
                if Gaussian::LOG_SCALE.contains(&i) || Gaussian::OPACITY.contains(&i) {
                    continue;
                }
                let mut p = base;
                let mut m = base;
                p[i] += h;
                m[i] -= h;
                let mut gp = g.clone();
                gp.read_params(&p);
                let mut gm = g.clone();
                gm.read_params(&m);
                let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(err < 1e-3, "param {i}: {} vs {fd}", analytic[i]);
            }
        }
    }
}
