//! Screen-space gradient statistics and the clone / split / prune step.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::{logit, quat_to_matrix, Gaussian, Vec3};
use crate::scene::GradBuffers;

/// Split children have their scales divided by this.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Children produced by one split.
pub const SPLIT_CHILDREN: usize = 2;

/// How the positional statistics are reduced before thresholding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensifyRule {
    /// Sum of per-pixel absolute gradient contributions.
    L1,
    /// Norm of the summed signed contributions; opposing pixels cancel.
    Signed,
}

/// Per-Gaussian statistics over one densification window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub l1_accum: Vec<f64>,
    pub signed_accum: Vec<[f64; 2]>,
    pub touch_count: Vec<u32>,
    /// Summed world-space positional gradient; gives the clone direction.
    pub position_grad: Vec<Vec3>,
    /// Largest 3σ screen radius seen in the window.
    pub max_radius: Vec<f64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            l1_accum: vec![0.0; n],
            signed_accum: vec![[0.0; 2]; n],
            touch_count: vec![0; n],
            position_grad: vec![Vec3::zeros(); n],
            max_radius: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.l1_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l1_accum.is_empty()
    }

    pub fn reset(&mut self, n: usize) {
        *self = DensifyStats::new(n);
    }

    /// Window-averaged statistic used for flagging; 0 for untouched Gaussians.
    pub fn normalized(&self, i: usize, rule: DensifyRule) -> f64 {
        let t = self.touch_count[i];
        if t == 0 {
            return 0.0;
        }
        let total = match rule {
            DensifyRule::L1 => self.l1_accum[i],
            DensifyRule::Signed => {
                let [x, y] = self.signed_accum[i];
                x.hypot(y)
            }
        };
        total / t as f64
    }

    pub fn flags(&self, rule: DensifyRule, threshold: f64) -> Vec<bool> {
        (0..self.len()).map(|i| self.normalized(i, rule) > threshold).collect()
    }
}

/// Adds the contributions of one backward pass.
pub fn accumulate_densify_stats(stats: &mut DensifyStats, grads: &GradBuffers) {
    assert_eq!(stats.len(), grads.touched.len());
    for i in 0..stats.len() {
        stats.max_radius[i] = stats.max_radius[i].max(grads.screen_radius[i]);
        if !grads.touched[i] {
            continue;
        }
        let [ax, ay] = grads.mean_abs[i];
        let [sx, sy] = grads.mean_signed[i];
        stats.l1_accum[i] += ax + ay;
        stats.signed_accum[i][0] += sx;
        stats.signed_accum[i][1] += sy;
        stats.touch_count[i] += 1;
        stats.position_grad[i] += grads.position[i];
        let [tx, ty] = stats.signed_accum[i];
        assert!(
            tx.hypot(ty) <= stats.l1_accum[i] * (1.0 + 1e-12),
            "signed statistic exceeds L1 statistic for Gaussian {i}"
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyParams {
    pub rule: DensifyRule,
    pub threshold: f64,
    /// Clone when the largest scale is at most this fraction of the scene extent, else split.
    pub percent_dense: f64,
    pub prune_opacity: f64,
    /// Prune Gaussians whose screen radius exceeded this many pixels.
    pub max_screen_radius: Option<f64>,
    /// Prune Gaussians whose largest scale exceeds this fraction of the scene extent.
    pub max_world_scale: Option<f64>,
    /// Clone and split are skipped, pruning still runs.
    pub grow: bool,
}

/// What happened to the Gaussian list.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    /// For each Gaussian after the step, its index before the step if it is a
    /// surviving original, `None` if it was created by clone or split.
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

fn max_scale(g: &Gaussian) -> f64 {
    g.scale().max()
}

/// Clones or splits flagged Gaussians, prunes, and resets `stats` to the new count.
pub fn densify_and_prune(
    gaussians: &mut Vec<Gaussian>,
    stats: &mut DensifyStats,
    params: &DensifyParams,
    scene_extent: f64,
    rng: &mut impl Rng,
) -> DensifyOutcome {
    assert_eq!(gaussians.len(), stats.len());
    let flags = if params.grow {
        stats.flags(params.rule, params.threshold)
    } else {
        vec![false; gaussians.len()]
    };
    let size_limit = params.percent_dense * scene_extent;
    let mut kept: Vec<(Gaussian, Option<usize>)> = Vec::with_capacity(gaussians.len());
    let mut born: Vec<Gaussian> = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    for (i, g) in gaussians.iter().enumerate() {
        if !flags[i] {
            kept.push((g.clone(), Some(i)));
            continue;
        }
        if max_scale(g) <= size_limit {
            let mut c = g.clone();
            let dir = stats.position_grad[i];
            if dir.norm() > 0.0 {
                c.position -= dir.normalize() * max_scale(g);
            }
            kept.push((g.clone(), Some(i)));
            born.push(c);
            cloned += 1;
        } else {
            let r = quat_to_matrix(&g.rotation);
            let s = g.scale();
            for _ in 0..SPLIT_CHILDREN {
                let z = Vec3::new(
                    rng.sample::<f64, _>(StandardNormal) * s.x,
                    rng.sample::<f64, _>(StandardNormal) * s.y,
                    rng.sample::<f64, _>(StandardNormal) * s.z,
                );
                let mut c = g.clone();
                c.position = g.position + r * z;
                c.log_scale = g.log_scale.map(|v| v - SPLIT_SCALE_DIVISOR.ln());
                born.push(c);
            }
            split += 1;
        }
    }
    let before = kept.len() + born.len();
    let mut next: Vec<(Gaussian, Option<usize>)> = kept;
    next.extend(born.into_iter().map(|g| (g, None)));
    next.retain(|(g, origin)| {
        if g.opacity() < params.prune_opacity {
            return false;
        }
        if let (Some(limit), Some(o)) = (params.max_screen_radius, origin) {
            if stats.max_radius[*o] > limit {
                return false;
            }
        }
        if let Some(frac) = params.max_world_scale {
            if origin.is_some() && max_scale(g) > frac * scene_extent {
                return false;
            }
        }
        true
    });
    let pruned = before - next.len();
    let (list, origin): (Vec<Gaussian>, Vec<Option<usize>>) = next.into_iter().unzip();
    *gaussians = list;
    stats.reset(gaussians.len());
    DensifyOutcome {
        origin,
        cloned,
        split,
        pruned,
    }
}

/// Lowers every opacity to at most `ceiling`.
pub fn reset_opacity(gaussians: &mut [Gaussian], ceiling: f64) {
    let cap = logit(ceiling);
    for g in gaussians {
        if g.opacity_logit > cap {
            g.opacity_logit = cap;
        }
    }
}
