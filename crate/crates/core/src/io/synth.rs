//! Procedural test scene: a sphere of flattened splats with a smooth diffuse
//! texture and one anisotropic specular lobe planted on the reflected view
//! direction.
//!
//! The ground-truth color of splat `i` seen from a camera is
//! `c_d(i) + A · max(ω_r·z, 0) · exp(−λ(ω_r·x)² − μ(ω_r·y)²)` where
//! `ω_r` reflects the direction to the camera about the splat normal and
//! `(x, y, z)` is the lobe frame. Views are rendered with the reference
//! renderer, so they are exact for the scene they describe.

use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{reflect, SH_C0};
use crate::error::{Error, Result};
use crate::geometry::{shortest_axis_normal, Camera, Gaussian, Mat3, Quat, Vec3};
use crate::imaging::Image;
use crate::raster::{reference_render, FrameBuffer, Primitive};
use crate::trainer::TrainView;

#[derive(Clone, Debug, PartialEq)]
pub struct AnisoSceneSpec {
    pub num_gaussians: usize,
    pub radius: f64,
    pub train_views: usize,
    pub eval_views: usize,
    pub width: usize,
    pub height: usize,
    pub camera_distance: f64,
    pub camera_angle_x: f64,
    /// Peak added brightness `A` of the lobe.
    pub amplitude: f64,
    /// `[λ, μ]`, sharpness along the lobe tangent and bitangent.
    pub sharpness: [f64; 2],
    pub opacity: f64,
    /// Splat thickness along the normal relative to its tangential size.
    pub flatness: f64,
    pub background: [f64; 3],
}

impl Default for AnisoSceneSpec {
    fn default() -> Self {
        AnisoSceneSpec {
            num_gaussians: 500,
            radius: 1.0,
            train_views: 24,
            eval_views: 8,
            width: 64,
            height: 64,
            camera_distance: 3.2,
            camera_angle_x: 0.75,
            amplitude: 0.6,
            sharpness: [10.0, 1.5],
            opacity: 0.95,
            flatness: 0.1,
            background: [0.0; 3],
        }
    }
}

/// The planted lobe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecularLobe {
    pub tangent: Vec3,
    pub bitangent: Vec3,
    pub axis: Vec3,
    pub sharpness: [f64; 2],
    pub amplitude: f64,
}

impl SpecularLobe {
    pub fn eval(&self, nu: &Vec3) -> f64 {
        let s = nu.dot(&self.axis).max(0.0);
        let (a, b) = (nu.dot(&self.tangent), nu.dot(&self.bitangent));
        self.amplitude * s * (-self.sharpness[0] * a * a - self.sharpness[1] * b * b).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Geometry, with the diffuse color in the SH DC term.
    pub gaussians: Vec<Gaussian>,
    pub diffuse: Vec<[f64; 3]>,
    pub lobe: SpecularLobe,
}

impl GroundTruth {
    /// View-dependent color of every splat for a camera at `center`.
    pub fn colors(&self, center: &Vec3) -> Vec<[f64; 3]> {
        self.gaussians
            .iter()
            .zip(&self.diffuse)
            .map(|(g, d)| {
                let to_camera = (center - g.position).normalize();
                let (n, _) = shortest_axis_normal(&g.rotation, &g.log_scale, &to_camera);
                let s = self.lobe.eval(&reflect(&to_camera, &n));
                [d[0] + s, d[1] + s, d[2] + s]
            })
            .collect()
    }

    pub fn primitives(&self, center: &Vec3) -> Vec<Primitive> {
        self.gaussians
            .iter()
            .zip(self.colors(center))
            .map(|(g, color)| Primitive {
                position: g.position,
                rotation: g.rotation,
                log_scale: g.log_scale,
                opacity: g.opacity(),
                color,
            })
            .collect()
    }

    pub fn render(&self, cam: &Camera, background: [f64; 3]) -> FrameBuffer {
        reference_render(&self.primitives(&cam.center()), cam, background)
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: AnisoSceneSpec,
    pub truth: GroundTruth,
    pub train: Vec<TrainView>,
    pub eval: Vec<TrainView>,
}

fn fibonacci_sphere(n: usize, i: usize) -> Vec3 {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = golden * i as f64;
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn orthonormal_frame(axis: &Vec3, spin: f64) -> (Vec3, Vec3) {
    let reference = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t0 = (reference - axis * axis.dot(&reference)).normalize();
    let b0 = axis.cross(&t0);
    let t = t0 * spin.cos() + b0 * spin.sin();
    (t, axis.cross(&t))
}

fn matrix_to_quat(m: &Mat3) -> Quat {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    [q.w, q.i, q.j, q.k]
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    *q.to_rotation_matrix().matrix()
}

/// Ground truth geometry, the lobe and the cameras for `seed`.
pub fn generate_truth(seed: u64, spec: &AnisoSceneSpec) -> Result<(GroundTruth, Vec<Camera>)> {
    if spec.num_gaussians == 0 || spec.train_views == 0 {
        return Err(Error::InvalidParameter("the scene needs splats and training views".into()));
    }
    if !(spec.radius > 0.0 && spec.camera_distance > spec.radius) {
        return Err(Error::InvalidParameter("cameras must sit outside the sphere".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.num_gaussians;
    let tangential = spec.radius * (4.0 * std::f64::consts::PI / n as f64).sqrt() * 0.6;
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let freq: [Vec3; 3] = std::array::from_fn(|_| {
        Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
    });
    let mut gaussians = Vec::with_capacity(n);
    let mut diffuse = Vec::with_capacity(n);
    for i in 0..n {
        let u = fibonacci_sphere(n, i);
        let p = u * spec.radius;
        let (t, b) = orthonormal_frame(&u, rng.random_range(0.0..std::f64::consts::TAU));
        let rot = Mat3::from_columns(&[t, b, u]);
        let mut g = Gaussian::new(p, tangential, spec.opacity);
        g.rotation = matrix_to_quat(&rot);
        let stretch = rng.random_range(0.85..1.15);
        g.log_scale = Vec3::new(
            (tangential * stretch).ln(),
            (tangential / stretch).ln(),
            (tangential * spec.flatness).ln(),
        );
        let d: [f64; 3] = std::array::from_fn(|c| 0.3 + 0.15 * (freq[c].dot(&p) + phases[c]).sin());
        for c in 0..3 {
            g.sh[0][c] = (d[c] - 0.5) / SH_C0;
        }
        gaussians.push(g);
        diffuse.push(d);
    }
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.0)).normalize();
    let (tangent, bitangent) = orthonormal_frame(&axis, rng.random_range(0.0..std::f64::consts::TAU));
    let lobe = SpecularLobe {
        tangent,
        bitangent,
        axis,
        sharpness: spec.sharpness,
        amplitude: spec.amplitude,
    };

    let total = spec.train_views + spec.eval_views;
    let spin = random_rotation(&mut rng);
    let focal = 0.5 * spec.width as f64 / (0.5 * spec.camera_angle_x).tan();
    let cameras = (0..total)
        .map(|i| {
            let eye = spin * fibonacci_sphere(total, i) * spec.camera_distance;
            Camera::look_at(eye, Vec3::zeros(), Vec3::z(), focal, spec.width, spec.height)
        })
        .collect();
    Ok((GroundTruth { gaussians, diffuse, lobe }, cameras))
}

/// Whether view `i` of `total` belongs to the evaluation set; evaluation
/// views are spread evenly through the camera sequence.
pub fn is_eval_view(i: usize, train: usize, eval: usize) -> bool {
    if eval == 0 {
        return false;
    }
    let total = train + eval;
    (0..eval).any(|k| (k * total) / eval + total / (2 * eval) == i)
}

pub fn generate_aniso_scene(seed: u64, spec: &AnisoSceneSpec) -> Result<SynthScene> {
    let (truth, cameras) = generate_truth(seed, spec)?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, cam) in cameras.into_iter().enumerate() {
        let image = Image::from(&truth.render(&cam, spec.background)).clamped();
        let v = TrainView { camera: cam, image };
        if is_eval_view(i, spec.train_views, spec.eval_views) {
            eval.push(v);
        } else {
            train.push(v);
        }
    }
    Ok(SynthScene {
        spec: spec.clone(),
        truth,
        train,
        eval,
    })
}

/// Writes the scene as a NeRF-synthetic dataset plus `points3d.ply` with
/// the ground-truth splats.
pub fn write_scene(dir: &Path, scene: &SynthScene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let angle = scene.spec.camera_angle_x;
    crate::io::dataset::write_nerf_split(dir, "train", angle, &scene.train)?;
    crate::io::dataset::write_nerf_split(dir, "test", angle, &scene.eval)?;
    crate::io::ply::export_gs_ply(&dir.join("points3d.ply"), &scene.truth.gaussians)
}
