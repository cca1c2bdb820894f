//! Anchor-based variant: voxel anchors carrying a feature vector spawn `k`
//! neural Gaussians per view through small prediction heads.
//!
//! For anchor `v` seen from camera center `c`, the heads read
//! `[f_v, ‖c − P_v‖, unit(P_v − c)]` and predict, per child `j`, the opacity
//! (`tanh`, children with `σ ≤ 0` are dropped), a quaternion, and a scale
//! `|η_v| ⊙ sigmoid(·)`. Child positions are `P_v + O_j ⊙ η_v`. The diffuse
//! color `φ(f_v)` is shared by the children; each child's ASG parameters come
//! from `Θ_anchor(f_v, d_j)` with `d_j` the unit direction from the camera to
//! the child, and are decoded by the shared lobe bank and color network.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::appearance::{compose_color, init_asg_axes, AppearanceField, SpecularDecoder, SpecularTape, NUM_LOBES, PE_ORDER};
use crate::error::{Error, Result};
use crate::geometry::{
    normalize_quat, normalize_quat_backward, shortest_axis_normal, shortest_axis_normal_backward, sigmoid, softplus,
    Camera, NormalAxis, Quat, Vec3,
};
use crate::imaging::Image;
use crate::nn::{adam_step, adam_update, bias_corrections, Activation, AdamState, Mlp, Tape};
use crate::raster::{rasterize, rasterize_backward, FrameBuffer, Primitive, RasterContext};
use crate::trainer::{iteration_resolution, loss, psnr, LogRecord, TargetCache, TrainConfig, TrainView, ViewSampler};

pub const ANCHOR_FEATURE_DIM: usize = 32;
pub const DEFAULT_CHILDREN: usize = 10;
/// Feature, camera distance, camera-to-anchor direction.
pub const HEAD_INPUT_DIM: usize = ANCHOR_FEATURE_DIM + 4;
const HEAD_HIDDEN: usize = 32;
/// Output bias of `F_σ` at initialization, so children start alive.
pub const OPACITY_BIAS_INIT: f64 = 0.5;
/// Anchors spawned per parallel work item; fixed for a thread-independent reduction order.
pub const ANCHOR_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGaussian {
    /// Voxel center; fixed after initialization.
    pub position: Vec3,
    pub feature: [f64; ANCHOR_FEATURE_DIM],
    pub eta: Vec3,
    pub offsets: Vec<Vec3>,
}

impl AnchorGaussian {
    pub fn param_len(children: usize) -> usize {
        ANCHOR_FEATURE_DIM + 3 + 3 * children
    }

    /// `[feature][eta][offsets row-major]`.
    pub fn write_params(&self, out: &mut [f64]) {
        out[..ANCHOR_FEATURE_DIM].copy_from_slice(&self.feature);
        out[ANCHOR_FEATURE_DIM..ANCHOR_FEATURE_DIM + 3].copy_from_slice(self.eta.as_slice());
        for (j, o) in self.offsets.iter().enumerate() {
            let b = ANCHOR_FEATURE_DIM + 3 + 3 * j;
            out[b..b + 3].copy_from_slice(o.as_slice());
        }
    }

    pub fn read_params(&mut self, src: &[f64]) {
        self.feature.copy_from_slice(&src[..ANCHOR_FEATURE_DIM]);
        self.eta = Vec3::from_column_slice(&src[ANCHOR_FEATURE_DIM..ANCHOR_FEATURE_DIM + 3]);
        for (j, o) in self.offsets.iter_mut().enumerate() {
            let b = ANCHOR_FEATURE_DIM + 3 + 3 * j;
            *o = Vec3::from_column_slice(&src[b..b + 3]);
        }
    }
}

/// Integer voxel coordinates `floor(p/ε + 0.5)` per axis.
pub fn voxel_key(p: &Vec3, eps: f64) -> [i64; 3] {
    [0, 1, 2].map(|a| (p[a] / eps + 0.5).floor() as i64)
}

/// Distinct voxel centers of `points`, in lexicographic voxel order.
pub fn voxel_centers(points: &[Vec3], eps: f64) -> Vec<Vec3> {
    let keys: BTreeSet<[i64; 3]> = points.iter().map(|p| voxel_key(p, eps)).collect();
    keys.into_iter()
        .map(|k| Vec3::new(k[0] as f64 * eps, k[1] as f64 * eps, k[2] as f64 * eps))
        .collect()
}

/// One anchor per occupied voxel; zero features, `η = (ε, ε, ε)`, offsets
/// uniform in `[−½, ½)³` (voxel units).
pub fn voxelize_init(points: &[Vec3], eps: f64, children: usize, seed: u64) -> Result<Vec<AnchorGaussian>> {
    if points.is_empty() {
        return Err(Error::InvalidParameter("cannot voxelize an empty point list".into()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("voxel size must be positive, got {eps}")));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidParameter("point list contains non-finite coordinates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(voxel_centers(points, eps)
        .into_iter()
        .map(|position| AnchorGaussian {
            position,
            feature: [0.0; ANCHOR_FEATURE_DIM],
            eta: Vec3::repeat(eps),
            offsets: (0..children)
                .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
                .collect(),
        })
        .collect())
}

/// Prediction heads shared by every anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorHeads {
    pub children: usize,
    /// `F_σ`: head input → k opacities, `tanh`.
    pub opacity: Mlp,
    /// `F_r`: head input → k quaternions, normalized afterwards.
    pub rotation: Mlp,
    /// `F_s`: head input → k scale gates, `sigmoid` applied afterwards.
    pub scale: Mlp,
    /// `φ`: feature → diffuse rgb.
    pub color: Mlp,
    /// `Θ_anchor`: feature and child view direction → raw ASG parameters.
    pub theta: Mlp,
}

impl AnchorHeads {
    pub const NAMES: [&'static str; 5] = ["anchor_opacity", "anchor_rotation", "anchor_scale", "anchor_color", "anchor_theta"];

    pub fn new(children: usize, num_lobes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut heads = AnchorHeads {
            children,
            opacity: Mlp::new(&[HEAD_INPUT_DIM, HEAD_HIDDEN, children], Activation::Relu, Activation::Tanh, rng)?,
            rotation: Mlp::new(&[HEAD_INPUT_DIM, HEAD_HIDDEN, 4 * children], Activation::Relu, Activation::Linear, rng)?,
            scale: Mlp::new(&[HEAD_INPUT_DIM, HEAD_HIDDEN, 3 * children], Activation::Relu, Activation::Linear, rng)?,
            color: Mlp::new(&[ANCHOR_FEATURE_DIM, HEAD_HIDDEN, 3], Activation::Relu, Activation::Sigmoid, rng)?,
            theta: Mlp::new(&[ANCHOR_FEATURE_DIM + 3, 64, 64, 4 * num_lobes], Activation::Relu, Activation::Linear, rng)?,
        };
        heads.opacity.bias_mut(1).fill(OPACITY_BIAS_INIT);
        Ok(heads)
    }

    pub fn validate(&self, num_lobes: usize) -> Result<()> {
        let k = self.children;
        let want = [
            (&self.opacity, HEAD_INPUT_DIM, k),
            (&self.rotation, HEAD_INPUT_DIM, 4 * k),
            (&self.scale, HEAD_INPUT_DIM, 3 * k),
            (&self.color, ANCHOR_FEATURE_DIM, 3),
            (&self.theta, ANCHOR_FEATURE_DIM + 3, 4 * num_lobes),
        ];
        for ((net, i, o), name) in want.iter().zip(Self::NAMES) {
            if net.input_dim() != *i || net.output_dim() != *o {
                return Err(Error::Config(format!(
                    "{name} must map {i} inputs to {o} outputs, has {} -> {}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn nets(&self) -> [&Mlp; 5] {
        [&self.opacity, &self.rotation, &self.scale, &self.color, &self.theta]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp; 5] {
        [&mut self.opacity, &mut self.rotation, &mut self.scale, &mut self.color, &mut self.theta]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorScene {
    pub anchors: Vec<AnchorGaussian>,
    pub heads: AnchorHeads,
    pub decoder: SpecularDecoder,
}

impl AnchorScene {
    /// Fresh heads, lobe bank and color network around `anchors`.
    pub fn new(anchors: Vec<AnchorGaussian>, children: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = AnchorHeads::new(children, NUM_LOBES, &mut rng)?;
        let psi = Mlp::new(&AppearanceField::psi_widths(NUM_LOBES, PE_ORDER), Activation::Relu, Activation::Sigmoid, &mut rng)?;
        let decoder = SpecularDecoder {
            bank: init_asg_axes(NUM_LOBES, seed)?,
            psi,
            pe_order: PE_ORDER,
        };
        let scene = AnchorScene { anchors, heads, decoder };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.heads.validate(self.decoder.bank.num_lobes())?;
        for (i, a) in self.anchors.iter().enumerate() {
            if a.offsets.len() != self.heads.children {
                return Err(Error::Config(format!(
                    "anchor {i} has {} offsets, heads predict {} children",
                    a.offsets.len(),
                    self.heads.children
                )));
            }
        }
        Ok(())
    }
}

/// A renderable child of an anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralGaussian {
    pub position: Vec3,
    pub rotation: Quat,
    pub log_scale: Vec3,
    pub opacity: f64,
    pub diffuse: [f64; 3],
    pub color: [f64; 3],
    pub child: usize,
}

impl NeuralGaussian {
    fn primitive(&self) -> Primitive {
        Primitive {
            position: self.position,
            rotation: self.rotation,
            log_scale: self.log_scale,
            opacity: self.opacity,
            color: self.color,
        }
    }
}

#[derive(Clone, Debug)]
struct ChildTape {
    child: usize,
    raw_rotation: Quat,
    view_dir: Vec3,
    dist: f64,
    which: NormalAxis,
    theta_tape: Tape,
    spec_tape: SpecularTape,
    /// Channels where the composed color was not clamped.
    live: [bool; 3],
}

#[derive(Clone, Debug)]
struct AnchorTape {
    anchor: usize,
    opacity: Tape,
    rotation: Tape,
    scale: Tape,
    color: Tape,
    children: Vec<ChildTape>,
}

/// Frustum test on the anchor center: inside the depth range and projecting
/// within the image grown by half its size on every side.
pub fn anchor_visible(anchor: &AnchorGaussian, cam: &Camera) -> bool {
    let t = cam.world_to_camera(&anchor.position);
    if !(t.z > cam.near && t.z < cam.far) {
        return false;
    }
    let [u, v] = cam.project(&t);
    let (w, h) = (cam.width as f64, cam.height as f64);
    u > -0.5 * w && u < 1.5 * w && v > -0.5 * h && v < 1.5 * h
}

fn head_input(anchor: &AnchorGaussian, center: &Vec3) -> Vec<f64> {
    let off = anchor.position - center;
    let dist = off.norm();
    let d = off / dist;
    let mut x = Vec::with_capacity(HEAD_INPUT_DIM);
    x.extend_from_slice(&anchor.feature);
    x.push(dist);
    x.extend_from_slice(d.as_slice());
    x
}

fn spawn_with_tape(
    index: usize,
    anchor: &AnchorGaussian,
    cam: &Camera,
    heads: &AnchorHeads,
    decoder: &SpecularDecoder,
    keep_all: bool,
) -> (Vec<NeuralGaussian>, AnchorTape) {
    let center = cam.center();
    let input = head_input(anchor, &center);
    let (sigma, t_opacity) = heads.opacity.forward(&input).expect("validated heads");
    let (rot, t_rotation) = heads.rotation.forward(&input).expect("validated heads");
    let (gate, t_scale) = heads.scale.forward(&input).expect("validated heads");
    let (diffuse, t_color) = heads.color.forward(&anchor.feature).expect("validated heads");
    let diffuse = [diffuse[0], diffuse[1], diffuse[2]];
    let log_eta = anchor.eta.map(|e| e.abs().ln());
    let mut out = Vec::new();
    let mut tapes = Vec::new();
    for j in 0..heads.children {
        if !(sigma[j] > 0.0) && !keep_all {
            continue;
        }
        let position = anchor.position + anchor.offsets[j].component_mul(&anchor.eta);
        let raw_rotation = [rot[4 * j], rot[4 * j + 1], rot[4 * j + 2], rot[4 * j + 3]];
        let rotation = normalize_quat(&raw_rotation);
        // ln sigmoid(g) = −softplus(−g).
        let log_scale = Vec3::new(
            log_eta.x - softplus(-gate[3 * j]),
            log_eta.y - softplus(-gate[3 * j + 1]),
            log_eta.z - softplus(-gate[3 * j + 2]),
        );
        let off = position - center;
        let dist = off.norm();
        let view_dir = off / dist;
        let mut tin = Vec::with_capacity(ANCHOR_FEATURE_DIM + 3);
        tin.extend_from_slice(&anchor.feature);
        tin.extend_from_slice(view_dir.as_slice());
        let (asg_raw, theta_tape) = heads.theta.forward(&tin).expect("validated heads");
        let (normal, which) = shortest_axis_normal(&rotation, &log_scale, &-view_dir);
        let (spec, spec_tape) = decoder.forward(&asg_raw, &normal, &view_dir);
        let color = compose_color(&diffuse, &spec);
        let live = [0, 1, 2].map(|c| diffuse[c] + spec[c] > 0.0);
        out.push(NeuralGaussian {
            position,
            rotation,
            log_scale,
            opacity: sigma[j],
            diffuse,
            color,
            child: j,
        });
        tapes.push(ChildTape {
            child: j,
            raw_rotation,
            view_dir,
            dist,
            which,
            theta_tape,
            spec_tape,
            live,
        });
    }
    let tape = AnchorTape {
        anchor: index,
        opacity: t_opacity,
        rotation: t_rotation,
        scale: t_scale,
        color: t_color,
        children: tapes,
    };
    (out, tape)
}

/// Children of `anchor` seen from `cam` with positive opacity.
pub fn spawn_neural(anchor: &AnchorGaussian, cam: &Camera, heads: &AnchorHeads, decoder: &SpecularDecoder) -> Vec<NeuralGaussian> {
    spawn_with_tape(0, anchor, cam, heads, decoder, false).0
}

/// All `k` children, including those a render would drop.
pub fn spawn_neural_unfiltered(
    anchor: &AnchorGaussian,
    cam: &Camera,
    heads: &AnchorHeads,
    decoder: &SpecularDecoder,
) -> Vec<NeuralGaussian> {
    spawn_with_tape(0, anchor, cam, heads, decoder, true).0
}

pub struct AnchorRenderContext {
    tapes: Vec<AnchorTape>,
    pub prims: Vec<Primitive>,
    pub raster: RasterContext,
}

impl AnchorRenderContext {
    pub fn image(&self) -> &FrameBuffer {
        &self.raster.image
    }
}

pub fn render_anchor_scene(scene: &AnchorScene, cam: &Camera, background: [f64; 3]) -> AnchorRenderContext {
    let visible: Vec<usize> = (0..scene.anchors.len())
        .filter(|&i| anchor_visible(&scene.anchors[i], cam))
        .collect();
    let spawned: Vec<(Vec<NeuralGaussian>, AnchorTape)> = visible
        .par_iter()
        .with_min_len(ANCHOR_CHUNK)
        .map(|&i| spawn_with_tape(i, &scene.anchors[i], cam, &scene.heads, &scene.decoder, false))
        .collect();
    let mut prims = Vec::new();
    let mut tapes = Vec::with_capacity(spawned.len());
    for (children, tape) in spawned {
        prims.extend(children.iter().map(NeuralGaussian::primitive));
        tapes.push(tape);
    }
    let raster = rasterize(&prims, cam, background);
    AnchorRenderContext { tapes, prims, raster }
}

/// Gradients of one anchor-scene render.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrads {
    /// `AnchorGaussian::param_len` entries per anchor.
    pub anchors: Vec<f64>,
    /// In [`AnchorHeads::nets`] order.
    pub heads: [Vec<f64>; 5],
    pub psi: Vec<f64>,
}

impl AnchorGrads {
    pub fn zeros(scene: &AnchorScene) -> Self {
        let n = AnchorGaussian::param_len(scene.heads.children);
        AnchorGrads {
            anchors: vec![0.0; scene.anchors.len() * n],
            heads: scene.heads.nets().map(|m| vec![0.0; m.param_len()]),
            psi: vec![0.0; scene.decoder.psi.param_len()],
        }
    }

    fn add_nets(&mut self, other: &AnchorGrads) {
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.psi.iter_mut().zip(&other.psi) {
            *x += y;
        }
    }
}

pub fn render_anchor_backward(scene: &AnchorScene, ctx: &AnchorRenderContext, d_image: &[[f64; 3]]) -> AnchorGrads {
    let pgrads = rasterize_backward(&ctx.prims, &ctx.raster, d_image);
    let mut starts = Vec::with_capacity(ctx.tapes.len());
    let mut s = 0;
    for t in &ctx.tapes {
        starts.push(s);
        s += t.children.len();
    }
    let k = scene.heads.children;
    let plen = AnchorGaussian::param_len(k);
    let heads = &scene.heads;
    let partials: Vec<(Vec<(usize, Vec<f64>)>, AnchorGrads)> = (0..ctx.tapes.len())
        .collect::<Vec<_>>()
        .par_chunks(ANCHOR_CHUNK)
        .map(|ids| {
            let mut nets = AnchorGrads {
                anchors: Vec::new(),
                heads: heads.nets().map(|m| vec![0.0; m.param_len()]),
                psi: vec![0.0; scene.decoder.psi.param_len()],
            };
            let mut rows = Vec::with_capacity(ids.len());
            for &t in ids {
                let tape = &ctx.tapes[t];
                let a = &scene.anchors[tape.anchor];
                let mut row = vec![0.0; plen];
                let mut d_sigma = vec![0.0; k];
                let mut d_rot = vec![0.0; 4 * k];
                let mut d_gate = vec![0.0; 3 * k];
                let mut d_diffuse = [0.0; 3];
                let mut d_feature = [0.0; ANCHOR_FEATURE_DIM];
                let mut d_eta = Vec3::zeros();
                let gate = tape.scale.output();
                for (c, ct) in tape.children.iter().enumerate() {
                    let pg = &pgrads[starts[t] + c];
                    let j = ct.child;
                    let d = [0, 1, 2].map(|ch| if ct.live[ch] { pg.color[ch] } else { 0.0 });
                    for ch in 0..3 {
                        d_diffuse[ch] += d[ch];
                    }
                    let sg = scene.decoder.backward(&ct.spec_tape, &d, &mut nets.psi);
                    let d_tin = heads.theta.backward(&ct.theta_tape, &sg.asg_raw, &mut nets.heads[4]);
                    for f in 0..ANCHOR_FEATURE_DIM {
                        d_feature[f] += d_tin[f];
                    }
                    let d_view = sg.view_dir + Vec3::new(d_tin[32], d_tin[33], d_tin[34]);
                    let unit = normalize_quat(&ct.raw_rotation);
                    let dq_n = shortest_axis_normal_backward(&unit, ct.which, &sg.normal);
                    let dq_unit = [0, 1, 2, 3].map(|q| pg.rotation[q] + dq_n[q]);
                    let dq_raw = normalize_quat_backward(&ct.raw_rotation, &dq_unit);
                    d_rot[4 * j..4 * j + 4].copy_from_slice(&dq_raw);
                    for ax in 0..3 {
                        let g = gate[3 * j + ax];
                        d_gate[3 * j + ax] = pg.log_scale[ax] * (1.0 - sigmoid(g));
                        d_eta[ax] += pg.log_scale[ax] / a.eta[ax];
                    }
                    d_sigma[j] = pg.opacity;
                    let v = ct.view_dir;
                    let d_pos = pg.position + (d_view - v * v.dot(&d_view)) / ct.dist;
                    let o = &a.offsets[j];
                    let b = ANCHOR_FEATURE_DIM + 3 + 3 * j;
                    for ax in 0..3 {
                        row[b + ax] += d_pos[ax] * a.eta[ax];
                        d_eta[ax] += d_pos[ax] * o[ax];
                    }
                }
                let d_in_s = heads.opacity.backward(&tape.opacity, &d_sigma, &mut nets.heads[0]);
                let d_in_r = heads.rotation.backward(&tape.rotation, &d_rot, &mut nets.heads[1]);
                let d_in_g = heads.scale.backward(&tape.scale, &d_gate, &mut nets.heads[2]);
                let d_in_c = heads.color.backward(&tape.color, &d_diffuse, &mut nets.heads[3]);
                for f in 0..ANCHOR_FEATURE_DIM {
                    row[f] += d_feature[f] + d_in_s[f] + d_in_r[f] + d_in_g[f] + d_in_c[f];
                }
                row[ANCHOR_FEATURE_DIM..ANCHOR_FEATURE_DIM + 3].copy_from_slice(d_eta.as_slice());
                rows.push((tape.anchor, row));
            }
            (rows, nets)
        })
        .collect();
    let mut out = AnchorGrads::zeros(scene);
    for (rows, nets) in &partials {
        for (i, row) in rows {
            out.anchors[i * plen..(i + 1) * plen].copy_from_slice(row);
        }
        out.add_nets(nets);
    }
    out
}

/// Mean PSNR of an anchor scene over `views`, renders clamped to `[0, 1]`.
pub fn evaluate_anchor_psnr(scene: &AnchorScene, views: &[TrainView], background: [f64; 3]) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        let ctx = render_anchor_scene(scene, &v.camera, background);
        total += psnr(&Image::from(ctx.image()).clamped(), &v.image)?;
    }
    Ok(total / views.len() as f64)
}

pub struct AnchorTrainOutput {
    pub scene: AnchorScene,
    pub log: Vec<LogRecord>,
    pub rng: ChaCha8Rng,
}

/// Fits an anchor scene. Anchors stay fixed; features, scaling factors,
/// offsets and every network are optimized. No densification.
pub fn train_anchor(
    mut scene: AnchorScene,
    views: &[TrainView],
    holdout: &[TrainView],
    config: &TrainConfig,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<AnchorTrainOutput> {
    config.validate()?;
    scene.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidParameter("training needs at least one view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = ViewSampler::new(views.len());
    let mut targets = TargetCache::new(views.len());
    let k = scene.heads.children;
    let plen = AnchorGaussian::param_len(k);
    let eta_scale = if scene.anchors.is_empty() {
        1.0
    } else {
        scene.anchors.iter().map(|a| a.eta.abs().mean()).sum::<f64>() / scene.anchors.len() as f64
    };
    let mut rates = vec![config.lr.anchor_feature; plen];
    rates[ANCHOR_FEATURE_DIM..ANCHOR_FEATURE_DIM + 3].fill(config.lr.anchor_eta * eta_scale);
    rates[ANCHOR_FEATURE_DIM + 3..].fill(config.lr.anchor_offset);
    let mut anchor_opt = AdamState::new(scene.anchors.len() * plen);
    let mut head_opt: Vec<AdamState> = scene.heads.nets().iter().map(|m| AdamState::new(m.param_len())).collect();
    let mut psi_opt = AdamState::new(scene.decoder.psi.param_len());
    let mut flat = vec![0.0; scene.anchors.len() * plen];
    let mut log = Vec::with_capacity(config.total_iters);

    for it in 1..=config.total_iters {
        let v = sampler.next(&mut rng);
        let (w, h) = iteration_resolution(config, &views[v], it - 1);
        let (cam, gt) = targets.target(views, v, w, h);
        let ctx = render_anchor_scene(&scene, &cam, config.background);
        let (l, d_image) = loss(&Image::from(ctx.image()), gt, config.lambda_dssim)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                diagnostic: format!("view {v} at {w}x{h}, {} anchors, {} neural Gaussians", scene.anchors.len(), ctx.prims.len()),
            });
        }
        let grads = render_anchor_backward(&scene, &ctx, &d_image);

        for (i, a) in scene.anchors.iter().enumerate() {
            a.write_params(&mut flat[i * plen..(i + 1) * plen]);
        }
        anchor_opt.step_count += 1;
        let (c1, c2) = bias_corrections(anchor_opt.step_count);
        for (j, p) in flat.iter_mut().enumerate() {
            adam_update(
                p,
                grads.anchors[j],
                &mut anchor_opt.first_moment[j],
                &mut anchor_opt.second_moment[j],
                rates[j % plen],
                c1,
                c2,
            );
        }
        for (i, a) in scene.anchors.iter_mut().enumerate() {
            a.read_params(&flat[i * plen..(i + 1) * plen]);
        }
        for ((net, g), st) in scene.heads.nets_mut().into_iter().zip(&grads.heads).zip(&mut head_opt) {
            adam_step(net.params_mut(), g, st, config.lr.mlp);
        }
        adam_step(scene.decoder.psi.params_mut(), &grads.psi, &mut psi_opt, config.lr.mlp);

        let psnr_holdout = if !holdout.is_empty() && (it % config.eval_interval == 0 || it == config.total_iters) {
            Some(evaluate_anchor_psnr(&scene, holdout, config.background)?)
        } else {
            None
        };
        let record = LogRecord {
            iteration: it,
            loss: l,
            psnr_holdout,
            num_gaussians: ctx.prims.len(),
            width: w,
            height: h,
        };
        observer(&record);
        log.push(record);
    }
    Ok(AnchorTrainOutput { scene, log, rng })
}
