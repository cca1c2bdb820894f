use specsplat::anchor::{train_anchor, voxelize_init, AnchorScene};
use specsplat::appearance::{AppearanceField, AppearanceMode, SH_C0};
use specsplat::geometry::{Camera, Gaussian, Vec3};
use specsplat::imaging::Image;
use specsplat::scene::{render, Scene};
use specsplat::trainer::{train, LogRecord, TrainConfig, TrainEvent, TrainView};

fn camera() -> Camera {
    Camera::look_at(Vec3::new(0.0, -3.0, 0.5), Vec3::zeros(), Vec3::z(), 30.0, 24, 24)
}

fn colored(position: Vec3, scale: f64, rgb: [f64; 3]) -> Gaussian {
    let mut g = Gaussian::new(position, scale, 0.8);
    for (ch, c) in rgb.iter().enumerate() {
        g.sh[0][ch] = (c - 0.5) / SH_C0;
    }
    g
}

fn target_view(mode: AppearanceMode) -> TrainView {
    let truth = Scene::new(
        vec![colored(Vec3::new(0.05, 0.0, 0.1), 0.35, [0.9, 0.3, 0.2])],
        AppearanceField::new(mode, 1).unwrap(),
    );
    let cam = camera();
    let image = Image::from(render(&truth, &cam, [0.0; 3]).image());
    TrainView { camera: cam, image }
}

fn fixed_config(iters: usize) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        c2f_enabled: false,
        densify_enabled: false,
        eval_interval: iters,
        appearance: AppearanceMode::ShOnly,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn window_means(log: &[LogRecord], window: usize) -> Vec<f64> {
    log.chunks(window).map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn single_view_fit_reduces_loss_every_window() {
    let view = target_view(AppearanceMode::ShOnly);
    let start = Scene::new(
        vec![colored(Vec3::new(-0.1, 0.0, -0.05), 0.25, [0.5, 0.5, 0.5])],
        AppearanceField::new(AppearanceMode::ShOnly, 2).unwrap(),
    );
    let out = train(start, std::slice::from_ref(&view), &[], &fixed_config(200), &mut |_| {}).unwrap();
    assert_eq!(out.log.len(), 200);
    let means = window_means(&out.log, 20);
    for pair in means.windows(2) {
        assert!(pair[1] < pair[0], "window means {means:?}");
    }
}

#[test]
fn without_densification_the_count_never_grows() {
    let view = target_view(AppearanceMode::ShOnly);
    let gs: Vec<Gaussian> = (0..12)
        .map(|i| {
            let t = i as f64 / 12.0 * std::f64::consts::TAU;
            colored(Vec3::new(0.4 * t.cos(), 0.0, 0.4 * t.sin()), 0.1, [0.4, 0.4, 0.4])
        })
        .collect();
    let start = Scene::new(gs, AppearanceField::new(AppearanceMode::ShOnly, 2).unwrap());
    let mut counts = Vec::new();
    let mut obs = |e: TrainEvent<'_>| {
        if let TrainEvent::Iteration(r) = e {
            counts.push(r.num_gaussians);
        }
    };
    train(start, std::slice::from_ref(&view), &[], &fixed_config(120), &mut obs).unwrap();
    assert_eq!(counts.len(), 120);
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn anchor_fit_lowers_the_loss() {
    let view = target_view(AppearanceMode::ShOnly);
    let points: Vec<Vec3> = (0..27)
        .map(|i| Vec3::new((i % 3) as f64 - 1.0, (i / 3 % 3) as f64 - 1.0, (i / 9) as f64 - 1.0) * 0.2)
        .collect();
    let anchors = voxelize_init(&points, 0.2, 4, 3).unwrap();
    assert_eq!(anchors.len(), 27);
    let scene = AnchorScene::new(anchors, 4, 3).unwrap();
    let cfg = TrainConfig {
        appearance: AppearanceMode::AsgField,
        specular_warmup: 20,
        ..fixed_config(100)
    };
    let out = train_anchor(scene, std::slice::from_ref(&view), &[], &cfg, &mut |_| {}).unwrap();
    let means = window_means(&out.log, 20);
    assert!(means.iter().all(|m| m.is_finite()));
    assert!(means[means.len() - 1] < 0.7 * means[0], "window means {means:?}");
}

#[test]
fn training_rejects_an_empty_view_set() {
    let scene = Scene::new(vec![Gaussian::new(Vec3::zeros(), 0.1, 0.5)], AppearanceField::new(AppearanceMode::ShOnly, 0).unwrap());
    assert!(train(scene, &[], &[], &fixed_config(10), &mut |_| {}).is_err());
}
