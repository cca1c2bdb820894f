//! The optimization loop for explicit-Gaussian scenes.
//!
//! Each iteration renders one training view, optionally at a reduced
//! resolution that grows linearly until the coarse-to-fine threshold
//! iteration, and takes one Adam step on every Gaussian parameter and on the
//! appearance networks. Densification statistics are collected from the
//! screen-space positional gradients and periodically drive clone, split
//! and prune events.

pub mod densify;
pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::appearance::AppearanceMode;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Gaussian, Vec3};
use crate::imaging::Image;
use crate::nn::{adam_step, adam_update, bias_corrections, AdamState};
use crate::scene::{render, render_backward, Scene};

pub use densify::{
    accumulate_densify_stats, densify_and_prune, reset_opacity, DensifyOutcome, DensifyParams, DensifyRule,
    DensifyStats,
};
pub use loss::{loss, psnr, ssim};

/// Per-class Adam learning rates.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    /// Position rate at iteration 0, multiplied by the scene extent.
    pub position_init: f64,
    /// Position rate at the last iteration; decays exponentially in between.
    pub position_final: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub feature: f64,
    /// Appearance networks and anchor heads.
    pub mlp: f64,
    pub anchor_feature: f64,
    /// Relative to the mean initial scaling factor.
    pub anchor_eta: f64,
    pub anchor_offset: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
            feature: 2.5e-3,
            mlp: 2e-3,
            anchor_feature: 7.5e-3,
            anchor_eta: 7e-3,
            anchor_offset: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lambda_dssim: f64,
    pub c2f_enabled: bool,
    /// Iteration at which full resolution is reached.
    pub c2f_tau: usize,
    /// Start resolution is the full resolution divided by this, rounded.
    pub c2f_start_divisor: usize,
    pub densify_enabled: bool,
    pub densify_rule: DensifyRule,
    /// Flagging threshold on the window-averaged positional statistic.
    pub densify_threshold: f64,
    pub densify_interval: usize,
    pub densify_start: usize,
    /// `None` means three quarters of `total_iters`.
    pub densify_stop: Option<usize>,
    pub opacity_reset_interval: usize,
    pub prune_opacity: f64,
    pub percent_dense: f64,
    pub max_screen_radius: f64,
    pub max_world_scale: f64,
    pub eval_interval: usize,
    pub appearance: AppearanceMode,
    /// Iterations trained with the diffuse SH term only before the
    /// specular field is switched on.
    pub specular_warmup: usize,
    pub background: [f64; 3],
    pub lr: LearningRates,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 7000,
            lambda_dssim: 0.2,
            c2f_enabled: true,
            c2f_tau: 5000,
            c2f_start_divisor: 4,
            densify_enabled: true,
            densify_rule: DensifyRule::L1,
            densify_threshold: 0.0002,
            densify_interval: 100,
            densify_start: 500,
            densify_stop: None,
            opacity_reset_interval: 3000,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            max_screen_radius: 20.0,
            max_world_scale: 0.1,
            eval_interval: 200,
            appearance: AppearanceMode::AsgField,
            specular_warmup: 1000,
            background: [0.0; 3],
            lr: LearningRates::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_dssim > 0.0 && self.lambda_dssim < 1.0) {
            return fail(format!("lambda_dssim must lie in (0, 1), got {}", self.lambda_dssim));
        }
        if !(self.densify_threshold > 0.0) {
            return fail(format!("densify_threshold must be positive, got {}", self.densify_threshold));
        }
        if self.c2f_enabled && self.c2f_tau > self.total_iters {
            return fail(format!(
                "c2f_tau ({}) must not exceed total_iters ({})",
                self.c2f_tau, self.total_iters
            ));
        }
        if self.densify_interval == 0 || self.eval_interval == 0 || self.opacity_reset_interval == 0 {
            return fail("intervals must be at least 1".into());
        }
        if self.c2f_start_divisor == 0 {
            return fail("c2f_start_divisor must be at least 1".into());
        }
        Ok(())
    }

    pub fn densify_stop_iter(&self) -> usize {
        self.densify_stop.unwrap_or(self.total_iters * 3 / 4)
    }

    pub fn densify_params(&self, iteration: usize) -> DensifyParams {
        DensifyParams {
            rule: self.densify_rule,
            threshold: self.densify_threshold,
            percent_dense: self.percent_dense,
            prune_opacity: self.prune_opacity,
            max_screen_radius: (iteration > self.opacity_reset_interval).then_some(self.max_screen_radius),
            max_world_scale: (iteration > self.opacity_reset_interval).then_some(self.max_world_scale),
            grow: self.densify_enabled,
        }
    }
}

/// `min(round(r_s + (r_e − r_s)·i/τ), r_e)`, rounding halves up.
pub fn resolution_schedule(i: usize, r_s: usize, r_e: usize, tau: usize) -> usize {
    if tau == 0 || i >= tau {
        return r_e;
    }
    let r = r_s as f64 + (r_e as f64 - r_s as f64) * i as f64 / tau as f64;
    ((r + 0.5).floor() as usize).min(r_e)
}

/// Coarse-to-fine start resolution for one axis.
pub fn c2f_start(r_e: usize, divisor: usize) -> usize {
    ((r_e as f64 / divisor as f64 + 0.5).floor() as usize).clamp(1, r_e)
}

/// Radius of the camera-center cloud around its mean, padded by 10%.
pub fn scene_extent(cameras: &[&Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// A posed ground-truth image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub image: Image,
}

/// Shuffled epochs over the training views.
#[derive(Clone, Debug)]
pub struct ViewSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl ViewSampler {
    pub fn new(n: usize) -> Self {
        ViewSampler {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Camera and ground truth for one iteration, downsampled as scheduled.
pub struct TargetCache {
    last: Vec<Option<(usize, usize, Image)>>,
}

impl TargetCache {
    pub fn new(n: usize) -> Self {
        TargetCache { last: vec![None; n] }
    }

    pub fn target<'a>(&'a mut self, views: &'a [TrainView], v: usize, width: usize, height: usize) -> (Camera, &'a Image) {
        let view = &views[v];
        if width == view.image.width && height == view.image.height {
            return (view.camera.clone(), &view.image);
        }
        let stale = !matches!(&self.last[v], Some((w, h, _)) if *w == width && *h == height);
        if stale {
            self.last[v] = Some((width, height, view.image.resize_area(width, height)));
        }
        let img = &self.last[v].as_ref().expect("filled above").2;
        (view.camera.scaled(width, height), img)
    }
}

/// Render resolution of `view` at iteration `i`.
pub fn iteration_resolution(config: &TrainConfig, view: &TrainView, i: usize) -> (usize, usize) {
    let (w, h) = (view.image.width, view.image.height);
    if !config.c2f_enabled {
        return (w, h);
    }
    let ws = c2f_start(w, config.c2f_start_divisor);
    let hs = c2f_start(h, config.c2f_start_divisor);
    (
        resolution_schedule(i, ws, w, config.c2f_tau),
        resolution_schedule(i, hs, h, config.c2f_tau),
    )
}

/// Exponential interpolation from `init` to `fin` over `[0, total]`.
pub fn exp_decay(init: f64, fin: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return fin;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    (init.ln() * (1.0 - t) + fin.ln() * t).exp()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Mean PSNR over the held-out views, on evaluation iterations only.
    pub psnr_holdout: Option<f64>,
    pub num_gaussians: usize,
    pub width: usize,
    pub height: usize,
}

impl LogRecord {
    pub const CSV_HEADER: &'static str = "iter,loss,psnr_holdout,num_gaussians,resolution";

    pub fn csv_line(&self) -> String {
        let psnr = self.psnr_holdout.map(|p| format!("{p:.6}")).unwrap_or_default();
        format!(
            "{},{:.9},{},{},{}x{}",
            self.iteration, self.loss, psnr, self.num_gaussians, self.width, self.height
        )
    }
}

pub fn log_to_csv(log: &[LogRecord]) -> String {
    let mut s = String::from(LogRecord::CSV_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Things a caller may want to observe during training.
pub enum TrainEvent<'a> {
    Iteration(&'a LogRecord),
    /// Fired just before a densification step consumes `stats`.
    Densify {
        iteration: usize,
        stats: &'a DensifyStats,
        params: &'a DensifyParams,
    },
}

pub struct TrainOutput {
    pub scene: Scene,
    pub log: Vec<LogRecord>,
    pub rng: ChaCha8Rng,
}

/// Adam state for the Gaussian arrays, one moment pair per scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOptimizer {
    pub state: AdamState,
}

impl GaussianOptimizer {
    pub fn new(n: usize) -> Self {
        GaussianOptimizer {
            state: AdamState::new(n * Gaussian::PARAM_LEN),
        }
    }

    /// Per-slot learning rates of one Gaussian.
    pub fn rates(lr: &LearningRates, position_lr: f64) -> [f64; Gaussian::PARAM_LEN] {
        let mut r = [0.0; Gaussian::PARAM_LEN];
        r[Gaussian::POSITION].fill(position_lr);
        r[Gaussian::ROTATION].fill(lr.rotation);
        r[Gaussian::LOG_SCALE].fill(lr.scale);
        r[Gaussian::OPACITY].fill(lr.opacity);
        r[Gaussian::SH_DC].fill(lr.sh_dc);
        r[Gaussian::SH_REST].fill(lr.sh_rest);
        r[Gaussian::FEATURE].fill(lr.feature);
        r
    }

    pub fn step(&mut self, gaussians: &mut [Gaussian], grads: &[f64], rates: &[f64; Gaussian::PARAM_LEN]) {
        let n = Gaussian::PARAM_LEN;
        assert_eq!(grads.len(), gaussians.len() * n);
        self.state.step_count += 1;
        let (c1, c2) = bias_corrections(self.state.step_count);
        let mut p = [0.0; Gaussian::PARAM_LEN];
        for (i, g) in gaussians.iter_mut().enumerate() {
            g.write_params(&mut p);
            for j in 0..n {
                let k = i * n + j;
                adam_update(
                    &mut p[j],
                    grads[k],
                    &mut self.state.first_moment[k],
                    &mut self.state.second_moment[k],
                    rates[j],
                    c1,
                    c2,
                );
            }
            g.read_params(&p);
            g.normalize_rotation();
        }
    }

    /// Carries moments across a densification step; new Gaussians start at zero.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let n = Gaussian::PARAM_LEN;
        let mut m = vec![0.0; origin.len() * n];
        let mut v = vec![0.0; origin.len() * n];
        for (i, o) in origin.iter().enumerate() {
            if let Some(o) = o {
                m[i * n..(i + 1) * n].copy_from_slice(&self.state.first_moment[o * n..(o + 1) * n]);
                v[i * n..(i + 1) * n].copy_from_slice(&self.state.second_moment[o * n..(o + 1) * n]);
            }
        }
        self.state.first_moment = m;
        self.state.second_moment = v;
    }

    pub fn reset_slot(&mut self, slot: usize) {
        let n = Gaussian::PARAM_LEN;
        for i in 0..self.state.first_moment.len() / n {
            self.state.first_moment[i * n + slot] = 0.0;
            self.state.second_moment[i * n + slot] = 0.0;
        }
    }
}

/// Mean PSNR of `scene` over `views`, renders clamped to `[0, 1]`.
pub fn evaluate_psnr(scene: &Scene, views: &[TrainView], background: [f64; 3]) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        let ctx = render(scene, &v.camera, background);
        total += psnr(&Image::from(ctx.image()).clamped(), &v.image)?;
    }
    Ok(total / views.len() as f64)
}

/// Fits `scene` to `views`.
pub fn train(
    mut scene: Scene,
    views: &[TrainView],
    holdout: &[TrainView],
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutput> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidParameter("training needs at least one view".into()));
    }
    scene.field.mode = config.appearance;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
    let extent = scene_extent(&cams);
    let mut sampler = ViewSampler::new(views.len());
    let mut targets = TargetCache::new(views.len());
    let mut gopt = GaussianOptimizer::new(scene.len());
    let mut theta_opt = AdamState::new(scene.field.theta.param_len());
    let mut psi_opt = AdamState::new(scene.field.psi().param_len());
    let mut stats = DensifyStats::new(scene.len());
    let stop = config.densify_stop_iter();
    let mut log = Vec::with_capacity(config.total_iters);

    for it in 1..=config.total_iters {
        scene.field.mode = if it > config.specular_warmup {
            config.appearance
        } else {
            AppearanceMode::ShOnly
        };
        let use_mlp = scene.field.mode == AppearanceMode::AsgField;
        let v = sampler.next(&mut rng);
        let (w, h) = iteration_resolution(config, &views[v], it - 1);
        let (cam, gt) = targets.target(views, v, w, h);
        let ctx = render(&scene, &cam, config.background);
        let (l, d_image) = loss(&Image::from(ctx.image()), gt, config.lambda_dssim)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                diagnostic: format!(
                    "view {v} at {w}x{h}, {} Gaussians ({} visible), loss {l}",
                    scene.len(),
                    ctx.visible.len()
                ),
            });
        }
        let grads = render_backward(&scene, &ctx, &d_image);
        if it < stop {
            accumulate_densify_stats(&mut stats, &grads);
        }

        let pos_lr = extent * exp_decay(config.lr.position_init, config.lr.position_final, it - 1, config.total_iters);
        let rates = GaussianOptimizer::rates(&config.lr, pos_lr);
        gopt.step(&mut scene.gaussians, &grads.gaussians, &rates);
        if use_mlp {
            adam_step(scene.field.theta.params_mut(), &grads.theta, &mut theta_opt, config.lr.mlp);
            adam_step(scene.field.decoder.psi.params_mut(), &grads.psi, &mut psi_opt, config.lr.mlp);
        }

        if it < stop && it > config.densify_start && it % config.densify_interval == 0 {
            let params = config.densify_params(it);
            observer(TrainEvent::Densify {
                iteration: it,
                stats: &stats,
                params: &params,
            });
            let outcome = densify_and_prune(&mut scene.gaussians, &mut stats, &params, extent, &mut rng);
            gopt.remap(&outcome.origin);
        }
        if it < stop && it % config.opacity_reset_interval == 0 {
            reset_opacity(&mut scene.gaussians, 0.01);
            gopt.reset_slot(Gaussian::OPACITY.start);
        }

        let psnr_holdout = if !holdout.is_empty() && (it % config.eval_interval == 0 || it == config.total_iters) {
            Some(evaluate_psnr(&scene, holdout, config.background)?)
        } else {
            None
        };
        let record = LogRecord {
            iteration: it,
            loss: l,
            psnr_holdout,
            num_gaussians: scene.len(),
            width: w,
            height: h,
        };
        observer(TrainEvent::Iteration(&record));
        log.push(record);
    }
    Ok(TrainOutput { scene, log, rng })
}
