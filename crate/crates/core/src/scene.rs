//! Explicit-Gaussian scenes: appearance evaluation plus rasterization, and
//! the full reverse pass to every Gaussian parameter and network weight.

use rayon::prelude::*;

use crate::appearance::{AppearanceField, ColorTape};
use crate::geometry::{sigmoid, Camera, Gaussian, Vec3};
use crate::raster::{rasterize, rasterize_backward, reference_render, FrameBuffer, Primitive, RasterContext};

/// Gaussians handled per parallel work item in appearance passes. Fixed so
/// the reduction order of network gradients does not depend on threads.
pub const APPEARANCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub field: AppearanceField,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, field: AppearanceField) -> Self {
        Scene { gaussians, field }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Gradients of one rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffers {
    /// `Gaussian::PARAM_LEN` entries per Gaussian, in `Gaussian::write_params` layout.
    pub gaussians: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    /// `Σ_pixels |dL/dmean|` per screen axis, NDC units.
    pub mean_abs: Vec<[f64; 2]>,
    /// `Σ_pixels dL/dmean`, NDC units.
    pub mean_signed: Vec<[f64; 2]>,
    /// `dL/dposition` (world space) from the rasterizer only.
    pub position: Vec<Vec3>,
    pub touched: Vec<bool>,
    /// 3σ screen radius in pixels, 0 for culled Gaussians.
    pub screen_radius: Vec<f64>,
}

impl GradBuffers {
    pub fn zeros(num_gaussians: usize, theta_len: usize, psi_len: usize) -> Self {
        GradBuffers {
            gaussians: vec![0.0; num_gaussians * Gaussian::PARAM_LEN],
            theta: vec![0.0; theta_len],
            psi: vec![0.0; psi_len],
            mean_abs: vec![[0.0; 2]; num_gaussians],
            mean_signed: vec![[0.0; 2]; num_gaussians],
            position: vec![Vec3::zeros(); num_gaussians],
            touched: vec![false; num_gaussians],
            screen_radius: vec![0.0; num_gaussians],
        }
    }

    pub fn gaussian(&self, i: usize) -> &[f64] {
        &self.gaussians[i * Gaussian::PARAM_LEN..(i + 1) * Gaussian::PARAM_LEN]
    }
}

/// Forward state of [`render`].
#[derive(Clone, Debug)]
pub struct RenderContext {
    /// Scene index of each rasterized primitive.
    pub visible: Vec<usize>,
    pub prims: Vec<Primitive>,
    pub tapes: Vec<ColorTape>,
    pub raster: RasterContext,
}

impl RenderContext {
    pub fn image(&self) -> &FrameBuffer {
        &self.raster.image
    }
}

fn in_depth_range(g: &Gaussian, camera: &Camera) -> bool {
    let z = camera.world_to_camera(&g.position).z;
    z > camera.near && z < camera.far
}

/// Gaussians inside the depth range, with their composed colors.
fn visible_primitives(scene: &Scene, camera: &Camera) -> (Vec<usize>, Vec<Primitive>, Vec<ColorTape>) {
    let center = camera.center();
    let visible: Vec<usize> = (0..scene.len())
        .filter(|&i| scene.gaussians[i].opacity() > 0.0 && in_depth_range(&scene.gaussians[i], camera))
        .collect();
    let evaluated: Vec<(Primitive, ColorTape)> = visible
        .par_iter()
        .with_min_len(APPEARANCE_CHUNK)
        .map(|&i| {
            let g = &scene.gaussians[i];
            let (color, tape) = scene.field.color(g, &center);
            let prim = Primitive {
                position: g.position,
                rotation: g.rotation,
                log_scale: g.log_scale,
                opacity: g.opacity(),
                color,
            };
            (prim, tape)
        })
        .collect();
    let (prims, tapes) = evaluated.into_iter().unzip();
    (visible, prims, tapes)
}

/// Renders `scene` through the tiled rasterizer.
pub fn render(scene: &Scene, camera: &Camera, background: [f64; 3]) -> RenderContext {
    let (visible, prims, tapes) = visible_primitives(scene, camera);
    let raster = rasterize(&prims, camera, background);
    RenderContext { visible, prims, tapes, raster }
}

/// Same appearance evaluation, composited by the brute-force renderer.
pub fn render_reference(scene: &Scene, camera: &Camera, background: [f64; 3]) -> FrameBuffer {
    let (_, prims, _) = visible_primitives(scene, camera);
    reference_render(&prims, camera, background)
}

/// Gradients of a loss with image gradient `d_image` w.r.t. everything in `scene`.
pub fn render_backward(scene: &Scene, ctx: &RenderContext, d_image: &[[f64; 3]]) -> GradBuffers {
    let pgrads = rasterize_backward(&ctx.prims, &ctx.raster, d_image);
    let radii = ctx.raster.screen_radii();

    let field = &scene.field;
    let theta_len = field.theta.param_len();
    let psi_len = field.psi().param_len();
    let mut out = GradBuffers::zeros(scene.len(), theta_len, psi_len);

    let chunks: Vec<(Vec<(usize, [f64; Gaussian::PARAM_LEN])>, Vec<f64>, Vec<f64>)> = (0..ctx.visible.len())
        .collect::<Vec<_>>()
        .par_chunks(APPEARANCE_CHUNK)
        .map(|ks| {
            let mut theta = vec![0.0; theta_len];
            let mut psi = vec![0.0; psi_len];
            let mut rows = Vec::with_capacity(ks.len());
            for &k in ks {
                let i = ctx.visible[k];
                let g = &scene.gaussians[i];
                let pg = &pgrads[k];
                let cg = field.color_backward(g, &ctx.tapes[k], &pg.color, &mut theta, &mut psi);
                let mut row = [0.0; Gaussian::PARAM_LEN];
                let pos = pg.position + cg.position;
                row[Gaussian::POSITION].copy_from_slice(pos.as_slice());
                for a in 0..4 {
                    row[Gaussian::ROTATION.start + a] = pg.rotation[a] + cg.rotation[a];
                }
                row[Gaussian::LOG_SCALE].copy_from_slice(pg.log_scale.as_slice());
                let s = sigmoid(g.opacity_logit);
                row[Gaussian::OPACITY.start] = pg.opacity * s * (1.0 - s);
                for (c, sh) in cg.sh.iter().enumerate() {
                    row[Gaussian::SH_DC.start + 3 * c..Gaussian::SH_DC.start + 3 * c + 3].copy_from_slice(sh);
                }
                row[Gaussian::FEATURE].copy_from_slice(&cg.feature);
                rows.push((k, row));
            }
            (rows, theta, psi)
        })
        .collect();
    for (rows, theta, psi) in chunks {
        for (k, row) in rows {
            let i = ctx.visible[k];
            out.gaussians[i * Gaussian::PARAM_LEN..(i + 1) * Gaussian::PARAM_LEN].copy_from_slice(&row);
            let pg = &pgrads[k];
            out.mean_abs[i] = pg.mean_abs_ndc;
            out.mean_signed[i] = pg.mean_signed_ndc;
            out.position[i] = pg.position;
            out.touched[i] = pg.touched;
            out.screen_radius[i] = radii[k];
        }
        for (a, b) in out.theta.iter_mut().zip(&theta) {
            *a += b;
        }
        for (a, b) in out.psi.iter_mut().zip(&psi) {
            *a += b;
        }
    }
    out
}
