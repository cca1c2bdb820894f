//! End-to-end runs: initial model from a run configuration, training of
//! either variant, and rendering of a trained model.

use std::path::Path;

use crate::anchor::{render_anchor_scene, train_anchor, voxelize_init, AnchorScene};
use crate::appearance::AppearanceField;
use crate::error::Result;
use crate::geometry::{Camera, Gaussian, Vec3};
use crate::io::checkpoint::{Checkpoint, Model, RngState};
use crate::io::config::{InitSource, RunConfig, Variant};
use crate::io::init::{gaussians_from_points, random_points, randomize_features};
use crate::io::ply::import_gs_ply;
use crate::raster::FrameBuffer;
use crate::scene::{render, Scene};
use crate::trainer::{train, LogRecord, TrainEvent, TrainView};

/// Name of the optional initial point cloud inside a data directory.
pub const POINT_CLOUD_FILE: &str = "points3d.ply";

/// Starting Gaussians: the data directory's point cloud (geometry and SH
/// kept, features resampled) or uniform random points.
pub fn initial_gaussians(run: &RunConfig, data_dir: Option<&Path>) -> Result<Vec<Gaussian>> {
    let seed = run.train.seed;
    let ply = data_dir.map(|d| d.join(POINT_CLOUD_FILE));
    let use_ply = match run.init {
        InitSource::Random => false,
        InitSource::Ply => true,
        InitSource::Auto => ply.as_ref().is_some_and(|p| p.exists()),
    };
    match ply {
        Some(path) if use_ply => {
            let mut gs = import_gs_ply(&path)?;
            randomize_features(&mut gs, seed);
            Ok(gs)
        }
        None if use_ply => Err(crate::Error::Config("init = ply needs a data directory".into())),
        _ => Ok(gaussians_from_points(&random_points(run.init_points, run.init_extent, seed), None, seed)),
    }
}

/// Untrained model of the configured variant.
pub fn initial_model(run: &RunConfig, data_dir: Option<&Path>) -> Result<Model> {
    let gs = initial_gaussians(run, data_dir)?;
    let seed = run.train.seed;
    Ok(match run.variant {
        Variant::Vanilla => Model::Vanilla(Scene::new(gs, AppearanceField::new(run.train.appearance, seed)?)),
        Variant::Anchor => {
            let points: Vec<Vec3> = gs.iter().map(|g| g.position).collect();
            let anchors = voxelize_init(&points, run.voxel_size, run.anchor_children, seed)?;
            Model::Anchor(AnchorScene::new(anchors, run.anchor_children, seed)?)
        }
    })
}

/// Trains `model` and packages the result as a checkpoint.
pub fn train_model(
    model: Model,
    views: &[TrainView],
    holdout: &[TrainView],
    run: &RunConfig,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<(Checkpoint, Vec<LogRecord>)> {
    let (model, log, rng) = match model {
        Model::Vanilla(scene) => {
            let mut obs = |e: TrainEvent<'_>| {
                if let TrainEvent::Iteration(r) = e {
                    observer(r)
                }
            };
            let out = train(scene, views, holdout, &run.train, &mut obs)?;
            (Model::Vanilla(out.scene), out.log, out.rng)
        }
        Model::Anchor(scene) => {
            let out = train_anchor(scene, views, holdout, &run.train, observer)?;
            (Model::Anchor(out.scene), out.log, out.rng)
        }
    };
    let ckpt = Checkpoint {
        model,
        config: run.clone(),
        rng: RngState::capture(&rng),
    };
    Ok((ckpt, log))
}

pub fn render_model(model: &Model, camera: &Camera, background: [f64; 3]) -> FrameBuffer {
    match model {
        Model::Vanilla(scene) => render(scene, camera, background).image().clone(),
        Model::Anchor(scene) => render_anchor_scene(scene, camera, background).image().clone(),
    }
}
