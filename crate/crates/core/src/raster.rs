//! Tile-binned front-to-back alpha compositing and its reverse pass.
//!
//! Each pixel composites the depth-sorted fragments of its tile:
//! `α = min(σ·exp(−½ dᵀ Q d), 0.99)`; fragments with `α < 1/255` are
//! skipped and a pixel stops once its transmittance falls below `1e-4`.
//! The reverse pass re-walks every pixel back to front, recovering each
//! fragment's transmittance by division instead of storing fragment lists.
//!
//! Work is split per tile. Tiles are independent in both passes and
//! per-tile partial gradients are reduced serially in tile order, so the
//! results do not depend on the number of worker threads.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    covariance3d, covariance3d_backward, project_gaussian, project_gaussian_backward, Camera, Quat, Splat2D,
    Sym3, Vec3,
};

pub const TILE_SIZE: usize = 16;
/// Fragments below this opacity are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// A pixel stops compositing once its transmittance drops below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Upper clamp on a single fragment's opacity; keeps `1 − α` invertible.
pub const ALPHA_MAX: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    pub width: usize,
    pub height: usize,
    /// Row-major linear RGB. Not clamped; see [`FrameBuffer::to_rgb8`].
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub final_transmittance: Vec<f64>,
}

impl FrameBuffer {
    pub fn filled(width: usize, height: usize, background: [f64; 3]) -> Self {
        FrameBuffer {
            width,
            height,
            color: vec![background; width * height],
            alpha: vec![0.0; width * height],
            final_transmittance: vec![1.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.color[y * self.width + x]
    }

    /// Clamp to `[0, 1]`, scale by 255 and round to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.color.len() * 3);
        for c in &self.color {
            for v in c {
                out.push(quantize(*v));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-tile fragment lists, front to back.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// `(splat index, depth)`, sorted by depth with ties broken by index.
    pub lists: Vec<Vec<(usize, f64)>>,
}

impl TileGrid {
    pub fn tile_rect(&self, tile: usize) -> [usize; 4] {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        [
            tx * TILE_SIZE,
            ty * TILE_SIZE,
            ((tx + 1) * TILE_SIZE).min(self.width),
            ((ty + 1) * TILE_SIZE).min(self.height),
        ]
    }
}

/// Radius outside which every fragment of the splat falls under
/// [`ALPHA_SKIP`]: the level set `σ·exp(−½q) = 1/255` bounded by the major
/// axis. `None` when the splat can never reach the threshold.
pub fn footprint_radius(splat: &Splat2D, opacity: f64) -> Option<f64> {
    let peak = opacity * 255.0;
    if !(peak >= 1.0) {
        return None;
    }
    Some((2.0 * peak.ln()).sqrt() * splat.max_variance().sqrt())
}

/// Does the disk intersect the closed rectangle?
pub fn disk_hits_rect(center: [f64; 2], radius: f64, rect: [f64; 4]) -> bool {
    let cx = center[0].clamp(rect[0], rect[2]);
    let cy = center[1].clamp(rect[1], rect[3]);
    let dx = center[0] - cx;
    let dy = center[1] - cy;
    dx * dx + dy * dy <= radius * radius
}

/// Bins every visible splat into the tiles its footprint disk touches.
pub fn cull_and_bin(splats: &[Option<Splat2D>], opacities: &[f64], width: usize, height: usize) -> TileGrid {
    assert_eq!(splats.len(), opacities.len());
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut grid = TileGrid {
        width,
        height,
        tiles_x,
        tiles_y,
        lists: vec![Vec::new(); tiles_x * tiles_y],
    };
    for (idx, s) in splats.iter().enumerate() {
        let Some(s) = s else { continue };
        let Some(r) = footprint_radius(s, opacities[idx]) else { continue };
        let x0 = ((s.mean[0] - r) / TILE_SIZE as f64).floor().max(0.0);
        let y0 = ((s.mean[1] - r) / TILE_SIZE as f64).floor().max(0.0);
        let x1 = ((s.mean[0] + r) / TILE_SIZE as f64).floor().min(tiles_x as f64 - 1.0);
        let y1 = ((s.mean[1] + r) / TILE_SIZE as f64).floor().min(tiles_y as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            continue;
        }
        for ty in y0 as usize..=y1 as usize {
            for tx in x0 as usize..=x1 as usize {
                let t = ty * tiles_x + tx;
                let rect = grid.tile_rect(t).map(|v| v as f64);
                if disk_hits_rect(s.mean, r, rect) {
                    grid.lists[t].push((idx, s.depth));
                }
            }
        }
    }
    for list in &mut grid.lists {
        list.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    }
    grid
}

/// `(α, Gaussian falloff, whether the 0.99 clamp is active)` at a pixel center.
#[inline]
fn fragment_alpha(s: &Splat2D, opacity: f64, px: f64, py: f64) -> (f64, f64, f64, f64, bool) {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    let g = power.exp();
    let raw = opacity * g;
    if raw > ALPHA_MAX {
        (ALPHA_MAX, g, dx, dy, true)
    } else {
        (raw, g, dx, dy, false)
    }
}

struct TileForward {
    color: Vec<[f64; 3]>,
    final_t: Vec<f64>,
    contrib: Vec<u32>,
}

fn forward_tile(
    grid: &TileGrid,
    tile: usize,
    splats: &[Option<Splat2D>],
    colors: &[[f64; 3]],
    opacities: &[f64],
    background: [f64; 3],
) -> TileForward {
    let [x0, y0, x1, y1] = grid.tile_rect(tile);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileForward {
        color: Vec::with_capacity(n),
        final_t: Vec::with_capacity(n),
        contrib: Vec::with_capacity(n),
    };
    let list = &grid.lists[tile];
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut last = 0u32;
            for (k, &(idx, _)) in list.iter().enumerate() {
                let s = splats[idx].as_ref().expect("binned splats are visible");
                let (alpha, ..) = fragment_alpha(s, opacities[idx], px, py);
                if alpha < ALPHA_SKIP {
                    continue;
                }
                let w = t * alpha;
                for ch in 0..3 {
                    c[ch] += w * colors[idx][ch];
                }
                t *= 1.0 - alpha;
                last = k as u32 + 1;
                if t < TRANSMITTANCE_STOP {
                    break;
                }
            }
            for ch in 0..3 {
                c[ch] += t * background[ch];
            }
            out.color.push(c);
            out.final_t.push(t);
            out.contrib.push(last);
        }
    }
    out
}

/// Per-pixel record of the forward pass needed by [`blend_backward`].
#[derive(Clone, Debug)]
pub struct BlendRecord {
    /// Number of list entries walked for each pixel.
    pub contrib: Vec<u32>,
}

/// Composites the binned splats. `colors` and `opacities` are indexed like `splats`.
pub fn blend_forward(
    grid: &TileGrid,
    splats: &[Option<Splat2D>],
    colors: &[[f64; 3]],
    opacities: &[f64],
    background: [f64; 3],
) -> (FrameBuffer, BlendRecord) {
    let tiles: Vec<TileForward> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| forward_tile(grid, t, splats, colors, opacities, background))
        .collect();
    let mut fb = FrameBuffer::filled(grid.width, grid.height, background);
    let mut contrib = vec![0u32; grid.width * grid.height];
    for (t, tile) in tiles.into_iter().enumerate() {
        let [x0, y0, x1, y1] = grid.tile_rect(t);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * grid.width + x;
                fb.color[p] = tile.color[k];
                fb.final_transmittance[p] = tile.final_t[k];
                fb.alpha[p] = 1.0 - tile.final_t[k];
                contrib[p] = tile.contrib[k];
                k += 1;
            }
        }
    }
    (fb, BlendRecord { contrib })
}

/// Gradients of one splat's screen-space quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    /// `dL/dmean` in pixels.
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub color: [f64; 3],
    /// W.r.t. the activated opacity.
    pub opacity: f64,
    /// `Σ_pixels |dL/dmean|` per component, in NDC units (pixel gradient × half the image size).
    pub mean_abs_ndc: [f64; 2],
    /// `Σ_pixels dL/dmean`, in NDC units.
    pub mean_signed_ndc: [f64; 2],
    /// Contributed a non-skipped fragment to at least one pixel.
    pub touched: bool,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
            self.mean_abs_ndc[i] += o.mean_abs_ndc[i];
            self.mean_signed_ndc[i] += o.mean_signed_ndc[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
        self.touched |= o.touched;
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_tile(
    grid: &TileGrid,
    tile: usize,
    splats: &[Option<Splat2D>],
    colors: &[[f64; 3]],
    opacities: &[f64],
    background: [f64; 3],
    image: &FrameBuffer,
    record: &BlendRecord,
    d_image: &[[f64; 3]],
) -> Vec<SplatGrad> {
    let list = &grid.lists[tile];
    let mut grads = vec![SplatGrad::default(); list.len()];
    let [x0, y0, x1, y1] = grid.tile_rect(tile);
    let half_w = 0.5 * grid.width as f64;
    let half_h = 0.5 * grid.height as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = y * grid.width + x;
            let dpix = d_image[p];
            if dpix == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t_final = image.final_transmittance[p];
            let bg_dot: f64 = (0..3).map(|c| background[c] * dpix[c]).sum();
            let mut t = t_final;
            let mut behind = [0.0; 3];
            let mut next_alpha = 0.0;
            let mut next_color = [0.0; 3];
            for k in (0..record.contrib[p] as usize).rev() {
                let idx = list[k].0;
                let s = splats[idx].as_ref().expect("binned splats are visible");
                let opacity = opacities[idx];
                let (alpha, g, dx, dy, clamped) = fragment_alpha(s, opacity, px, py);
                if alpha < ALPHA_SKIP {
                    continue;
                }
                t /= 1.0 - alpha;
                let c = colors[idx];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    behind[ch] = next_alpha * next_color[ch] + (1.0 - next_alpha) * behind[ch];
                    d_alpha += (c[ch] - behind[ch]) * dpix[ch];
                }
                d_alpha *= t;
                d_alpha -= t_final / (1.0 - alpha) * bg_dot;
                next_alpha = alpha;
                next_color = c;

                let gr = &mut grads[k];
                gr.touched = true;
                let w = alpha * t;
                for ch in 0..3 {
                    gr.color[ch] += w * dpix[ch];
                }
                if clamped {
                    continue;
                }
                gr.opacity += g * d_alpha;
                let d_g = opacity * d_alpha;
                let [a, b, cc] = s.conic;
                // power = −½(a dx² + c dy²) − b dx dy with d = pixel − mean.
                let d_power = d_g * g;
                let gm = [d_power * (a * dx + b * dy), d_power * (cc * dy + b * dx)];
                gr.mean[0] += gm[0];
                gr.mean[1] += gm[1];
                gr.conic[0] += -0.5 * dx * dx * d_power;
                gr.conic[1] += -dx * dy * d_power;
                gr.conic[2] += -0.5 * dy * dy * d_power;
                let ndc = [gm[0] * half_w, gm[1] * half_h];
                gr.mean_abs_ndc[0] += ndc[0].abs();
                gr.mean_abs_ndc[1] += ndc[1].abs();
                gr.mean_signed_ndc[0] += ndc[0];
                gr.mean_signed_ndc[1] += ndc[1];
            }
        }
    }
    grads
}

/// Screen-space gradients of every splat given `dL/dimage`.
#[allow(clippy::too_many_arguments)]
pub fn blend_backward(
    grid: &TileGrid,
    splats: &[Option<Splat2D>],
    colors: &[[f64; 3]],
    opacities: &[f64],
    background: [f64; 3],
    image: &FrameBuffer,
    record: &BlendRecord,
    d_image: &[[f64; 3]],
) -> Vec<SplatGrad> {
    assert_eq!(d_image.len(), grid.width * grid.height);
    let partials: Vec<Vec<SplatGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| backward_tile(grid, t, splats, colors, opacities, background, image, record, d_image))
        .collect();
    let mut out = vec![SplatGrad::default(); splats.len()];
    for (t, partial) in partials.iter().enumerate() {
        for (k, g) in partial.iter().enumerate() {
            out[grid.lists[t][k].0].add(g);
        }
    }
    out
}

/// A renderable splat with an already-evaluated color.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub position: Vec3,
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: Quat,
    pub log_scale: Vec3,
    /// Activated opacity; primitives with `opacity <= 0` are never drawn.
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Forward state kept for [`rasterize_backward`].
#[derive(Clone, Debug)]
pub struct RasterContext {
    pub camera: Camera,
    pub background: [f64; 3],
    /// Canonical drawing order; `order[k]` is the caller's index of splat `k`.
    pub order: Vec<usize>,
    pub covariances: Vec<Option<Sym3>>,
    pub splats: Vec<Option<Splat2D>>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub grid: TileGrid,
    pub record: BlendRecord,
    pub image: FrameBuffer,
}

impl RasterContext {
    /// Screen radius (3σ) of each caller-indexed primitive; 0 when culled.
    pub fn screen_radii(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.order.len()];
        for (k, &i) in self.order.iter().enumerate() {
            if let Some(s) = &self.splats[k] {
                out[i] = s.screen_radius;
            }
        }
        out
    }
}

/// Gradient of the loss w.r.t. one primitive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub position: Vec3,
    pub rotation: Quat,
    pub log_scale: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
    pub mean2d: [f64; 2],
    pub mean_abs_ndc: [f64; 2],
    pub mean_signed_ndc: [f64; 2],
    pub touched: bool,
}

fn cmp_slices(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn canonical_key(p: &Primitive) -> [f64; 15] {
    [
        p.position.x,
        p.position.y,
        p.position.z,
        p.opacity,
        p.color[0],
        p.color[1],
        p.color[2],
        p.log_scale.x,
        p.log_scale.y,
        p.log_scale.z,
        p.rotation[0],
        p.rotation[1],
        p.rotation[2],
        p.rotation[3],
        0.0,
    ]
}

/// Projects, bins and composites the primitives.
///
/// Primitives are first put into a canonical order by their contents so the
/// image does not depend on the caller's ordering, including at depth ties.
pub fn rasterize(prims: &[Primitive], camera: &Camera, background: [f64; 3]) -> RasterContext {
    let mut order: Vec<usize> = (0..prims.len()).collect();
    order.sort_by(|&a, &b| cmp_slices(&canonical_key(&prims[a]), &canonical_key(&prims[b])).then(a.cmp(&b)));
    let projected: Vec<(Option<Sym3>, Option<Splat2D>)> = order
        .par_iter()
        .map(|&i| {
            let p = &prims[i];
            if !(p.opacity > 0.0) {
                return (None, None);
            }
            match covariance3d(&p.rotation, &p.log_scale) {
                Ok(cov) => (Some(cov), project_gaussian(&p.position, &cov, camera)),
                Err(_) => (None, None),
            }
        })
        .collect();
    let (covariances, splats): (Vec<_>, Vec<_>) = projected.into_iter().unzip();
    let colors: Vec<[f64; 3]> = order.iter().map(|&i| prims[i].color).collect();
    let opacities: Vec<f64> = order.iter().map(|&i| prims[i].opacity).collect();
    let grid = cull_and_bin(&splats, &opacities, camera.width, camera.height);
    let (image, record) = blend_forward(&grid, &splats, &colors, &opacities, background);
    RasterContext {
        camera: camera.clone(),
        background,
        order,
        covariances,
        splats,
        colors,
        opacities,
        grid,
        record,
        image,
    }
}

/// Gradients w.r.t. every primitive, in the caller's order.
pub fn rasterize_backward(prims: &[Primitive], ctx: &RasterContext, d_image: &[[f64; 3]]) -> Vec<PrimitiveGrad> {
    let screen = blend_backward(
        &ctx.grid,
        &ctx.splats,
        &ctx.colors,
        &ctx.opacities,
        ctx.background,
        &ctx.image,
        &ctx.record,
        d_image,
    );
    let per: Vec<(usize, PrimitiveGrad)> = ctx
        .order
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let sg = &screen[k];
            let mut out = PrimitiveGrad {
                color: sg.color,
                opacity: sg.opacity,
                mean2d: sg.mean,
                mean_abs_ndc: sg.mean_abs_ndc,
                mean_signed_ndc: sg.mean_signed_ndc,
                touched: sg.touched,
                ..Default::default()
            };
            if let (Some(cov), Some(_)) = (&ctx.covariances[k], &ctx.splats[k]) {
                let p = &prims[i];
                let (d_pos, d_cov) = project_gaussian_backward(&p.position, cov, &ctx.camera, sg.mean, sg.conic);
                let (d_rot, d_ls) = covariance3d_backward(&p.rotation, &p.log_scale, &d_cov);
                out.position = d_pos;
                out.rotation = d_rot;
                out.log_scale = d_ls;
            }
            (i, out)
        })
        .collect();
    let mut grads = vec![PrimitiveGrad::default(); prims.len()];
    for (i, g) in per {
        grads[i] = g;
    }
    grads
}

/// Brute-force renderer: every visible primitive at every pixel, globally
/// depth-sorted, with the same fragment cutoffs as the tiled path.
pub fn reference_render(prims: &[Primitive], camera: &Camera, background: [f64; 3]) -> FrameBuffer {
    let mut visible: Vec<(f64, usize, Splat2D)> = Vec::new();
    for (i, p) in prims.iter().enumerate() {
        if !(p.opacity > 0.0) {
            continue;
        }
        let Ok(cov) = covariance3d(&p.rotation, &p.log_scale) else { continue };
        if let Some(s) = project_gaussian(&p.position, &cov, camera) {
            visible.push((s.depth, i, s));
        }
    }
    visible.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| cmp_slices(&canonical_key(&prims[a.1]), &canonical_key(&prims[b.1])))
            .then(a.1.cmp(&b.1))
    });
    let mut fb = FrameBuffer::filled(camera.width, camera.height, background);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0f64;
            let mut c = [0.0f64; 3];
            for (_, i, s) in &visible {
                let dx = px - s.mean[0];
                let dy = py - s.mean[1];
                let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                let alpha = (prims[*i].opacity * (-0.5 * q).exp()).min(ALPHA_MAX);
                if alpha < ALPHA_SKIP {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += t * alpha * prims[*i].color[ch];
                }
                t *= 1.0 - alpha;
                if t < TRANSMITTANCE_STOP {
                    break;
                }
            }
            let p = y * camera.width + x;
            for ch in 0..3 {
                fb.color[p][ch] = c[ch] + t * background[ch];
            }
            fb.alpha[p] = 1.0 - t;
            fb.final_transmittance[p] = t;
        }
    }
    fb
}
