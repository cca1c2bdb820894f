//! Flat `key = value` run configuration.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Unknown keys and malformed values are errors carrying the file
//! and line.

use std::path::{Path, PathBuf};

use crate::appearance::AppearanceMode;
use crate::error::{Error, Result};
use crate::trainer::{DensifyRule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    Anchor,
}

/// Where the initial Gaussians (or anchor points) come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitSource {
    /// `points3d.ply` in the data directory if present, else random.
    Auto,
    Ply,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub variant: Variant,
    pub data_dir: Option<PathBuf>,
    pub init: InitSource,
    /// Random initialization: number of points.
    pub init_points: usize,
    /// Random initialization: half-width of the sampling cube.
    pub init_extent: f64,
    pub voxel_size: f64,
    pub anchor_children: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            variant: Variant::Vanilla,
            data_dir: None,
            init: InitSource::Auto,
            init_points: 2000,
            init_extent: 1.3,
            voxel_size: 0.05,
            anchor_children: crate::anchor::DEFAULT_CHILDREN,
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_on_off(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

pub fn parse_rgb(v: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected r,g,b, got {v:?}"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_num(p)?;
    }
    Ok(out)
}

impl RunConfig {
    /// Every setting in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let l = &t.lr;
        vec![
            ("variant", match self.variant {
                Variant::Vanilla => "vanilla".into(),
                Variant::Anchor => "anchor".into(),
            }),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("init", match self.init {
                InitSource::Auto => "auto".into(),
                InitSource::Ply => "ply".into(),
                InitSource::Random => "random".into(),
            }),
            ("init_points", self.init_points.to_string()),
            ("init_extent", self.init_extent.to_string()),
            ("voxel_size", self.voxel_size.to_string()),
            ("anchor_children", self.anchor_children.to_string()),
            ("total_iters", t.total_iters.to_string()),
            ("lambda_dssim", t.lambda_dssim.to_string()),
            ("c2f", on_off(t.c2f_enabled).into()),
            ("c2f_tau", t.c2f_tau.to_string()),
            ("c2f_start_divisor", t.c2f_start_divisor.to_string()),
            ("densify", on_off(t.densify_enabled).into()),
            ("densify_rule", match t.densify_rule {
                DensifyRule::L1 => "l1".into(),
                DensifyRule::Signed => "signed".into(),
            }),
            ("tau_g", t.densify_threshold.to_string()),
            ("densify_interval", t.densify_interval.to_string()),
            ("densify_start", t.densify_start.to_string()),
            ("densify_stop", t.densify_stop.map(|v| v.to_string()).unwrap_or_default()),
            ("opacity_reset_interval", t.opacity_reset_interval.to_string()),
            ("prune_opacity", t.prune_opacity.to_string()),
            ("percent_dense", t.percent_dense.to_string()),
            ("max_screen_radius", t.max_screen_radius.to_string()),
            ("max_world_scale", t.max_world_scale.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("appearance", match t.appearance {
                AppearanceMode::AsgField => "asg".into(),
                AppearanceMode::ShOnly => "sh".into(),
            }),
            ("specular_warmup", t.specular_warmup.to_string()),
            ("background", format!("{},{},{}", t.background[0], t.background[1], t.background[2])),
            ("seed", t.seed.to_string()),
            ("lr_position_init", l.position_init.to_string()),
            ("lr_position_final", l.position_final.to_string()),
            ("lr_sh_dc", l.sh_dc.to_string()),
            ("lr_sh_rest", l.sh_rest.to_string()),
            ("lr_opacity", l.opacity.to_string()),
            ("lr_scale", l.scale.to_string()),
            ("lr_rotation", l.rotation.to_string()),
            ("lr_feature", l.feature.to_string()),
            ("lr_mlp", l.mlp.to_string()),
            ("lr_anchor_feature", l.anchor_feature.to_string()),
            ("lr_anchor_eta", l.anchor_eta.to_string()),
            ("lr_anchor_offset", l.anchor_offset.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Applies one setting; the error is a human-readable reason.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let l = &mut t.lr;
        match key {
            "variant" => {
                self.variant = match value {
                    "vanilla" => Variant::Vanilla,
                    "anchor" => Variant::Anchor,
                    _ => return Err(format!("expected vanilla or anchor, got {value:?}")),
                }
            }
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "init" => {
                self.init = match value {
                    "auto" => InitSource::Auto,
                    "ply" => InitSource::Ply,
                    "random" => InitSource::Random,
                    _ => return Err(format!("expected auto, ply or random, got {value:?}")),
                }
            }
            "init_points" => self.init_points = parse_num(value)?,
            "init_extent" => self.init_extent = parse_num(value)?,
            "voxel_size" => self.voxel_size = parse_num(value)?,
            "anchor_children" => self.anchor_children = parse_num(value)?,
            "total_iters" => t.total_iters = parse_num(value)?,
            "lambda_dssim" => t.lambda_dssim = parse_num(value)?,
            "c2f" => t.c2f_enabled = parse_on_off(value)?,
            "c2f_tau" => t.c2f_tau = parse_num(value)?,
            "c2f_start_divisor" => t.c2f_start_divisor = parse_num(value)?,
            "densify" => t.densify_enabled = parse_on_off(value)?,
            "densify_rule" => {
                t.densify_rule = match value {
                    "l1" => DensifyRule::L1,
                    "signed" => DensifyRule::Signed,
                    _ => return Err(format!("expected l1 or signed, got {value:?}")),
                }
            }
            "tau_g" => t.densify_threshold = parse_num(value)?,
            "densify_interval" => t.densify_interval = parse_num(value)?,
            "densify_start" => t.densify_start = parse_num(value)?,
            "densify_stop" => t.densify_stop = if value.is_empty() { None } else { Some(parse_num(value)?) },
            "opacity_reset_interval" => t.opacity_reset_interval = parse_num(value)?,
            "prune_opacity" => t.prune_opacity = parse_num(value)?,
            "percent_dense" => t.percent_dense = parse_num(value)?,
            "max_screen_radius" => t.max_screen_radius = parse_num(value)?,
            "max_world_scale" => t.max_world_scale = parse_num(value)?,
            "eval_interval" => t.eval_interval = parse_num(value)?,
            "appearance" => {
                t.appearance = match value {
                    "asg" => AppearanceMode::AsgField,
                    "sh" => AppearanceMode::ShOnly,
                    _ => return Err(format!("expected asg or sh, got {value:?}")),
                }
            }
            "specular_warmup" => t.specular_warmup = parse_num(value)?,
            "background" => t.background = parse_rgb(value)?,
            "seed" => t.seed = parse_num(value)?,
            "lr_position_init" => l.position_init = parse_num(value)?,
            "lr_position_final" => l.position_final = parse_num(value)?,
            "lr_sh_dc" => l.sh_dc = parse_num(value)?,
            "lr_sh_rest" => l.sh_rest = parse_num(value)?,
            "lr_opacity" => l.opacity = parse_num(value)?,
            "lr_scale" => l.scale = parse_num(value)?,
            "lr_rotation" => l.rotation = parse_num(value)?,
            "lr_feature" => l.feature = parse_num(value)?,
            "lr_mlp" => l.mlp = parse_num(value)?,
            "lr_anchor_feature" => l.anchor_feature = parse_num(value)?,
            "lr_anchor_eta" => l.anchor_eta = parse_num(value)?,
            "lr_anchor_offset" => l.anchor_offset = parse_num(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(origin, format!("line {}", n + 1), "expected key = value"));
            };
            let key = k.trim();
            self.set(key, v.trim())
                .map_err(|m| Error::parse(origin, format!("line {}: {key}", n + 1), m))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text, origin)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.train.seed = 42;
        c.train.background = [0.25, 1.0, 0.0];
        c.train.densify_stop = Some(123);
        c.variant = Variant::Anchor;
        c.data_dir = Some(PathBuf::from("/tmp/x y"));
        c.train.lr.mlp = 1.0 / 3.0;
        let back = RunConfig::from_text(&c.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_blanks() {
        let c = RunConfig::from_text("# hi\n\n total_iters = 10 \nc2f=off\n", Path::new("f")).unwrap();
        assert_eq!(c.train.total_iters, 10);
        assert!(!c.train.c2f_enabled);
    }

    #[test]
    fn errors_name_file_and_line() {
        let e = RunConfig::from_text("total_iters = 1\nbogus = 3\n", Path::new("run.cfg")).unwrap_err();
        let m = e.to_string();
        assert!(m.contains("run.cfg") && m.contains("line 2") && m.contains("bogus"), "{m}");
        let e = RunConfig::from_text("tau_g = fast\n", Path::new("run.cfg")).unwrap_err();
        assert!(e.to_string().contains("tau_g"));
        assert!(RunConfig::from_text("novalue\n", Path::new("run.cfg")).is_err());
    }
}
