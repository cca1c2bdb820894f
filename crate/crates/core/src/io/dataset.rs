//! NeRF-synthetic style datasets: `transforms_{train,test}.json` next to
//! RGBA PNGs.
//!
//! Poses are camera-to-world matrices in the OpenGL convention (+y up, −z
//! forward); they are flipped into the OpenCV frame used by [`Camera`].
//! Focal length comes from `camera_angle_x` and the image width, with the
//! principal point at the image center. Frames keep their JSON order.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};
use crate::imaging::Image;
use crate::trainer::TrainView;

/// Without a test split, every frame whose index is a multiple of this is held out.
pub const HOLDOUT_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Frame {
    /// `file_path` as written in the JSON.
    pub file_path: String,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub camera_angle_x: f64,
    /// Frames of `transforms_train.json`.
    pub train: Vec<Frame>,
    /// Frames of `transforms_test.json`, if the file exists.
    pub test: Option<Vec<Frame>>,
}

impl Dataset {
    /// Indices into `train` that are held out for evaluation.
    pub fn holdout_indices(&self) -> Vec<usize> {
        if self.test.is_some() {
            Vec::new()
        } else {
            (0..self.train.len()).filter(|i| i % HOLDOUT_STRIDE == 0).collect()
        }
    }

    /// Frames of a split; `Test` falls back to the held-out training frames.
    pub fn frames(&self, split: Split) -> Vec<&Frame> {
        match (split, &self.test) {
            (Split::Test, Some(t)) => t.iter().collect(),
            (Split::Test, None) => self.train.iter().step_by(HOLDOUT_STRIDE).collect(),
            (Split::Train, Some(_)) => self.train.iter().collect(),
            (Split::Train, None) => self
                .train
                .iter()
                .enumerate()
                .filter(|(i, _)| i % HOLDOUT_STRIDE != 0)
                .map(|(_, f)| f)
                .collect(),
        }
    }

    pub fn views(&self, split: Split) -> Vec<TrainView> {
        self.frames(split)
            .into_iter()
            .map(|f| TrainView {
                camera: f.camera.clone(),
                image: f.image.clone(),
            })
            .collect()
    }
}

/// Camera for an OpenGL camera-to-world pose.
pub fn nerf_camera(c2w: &[[f64; 4]; 4], camera_angle_x: f64, width: usize, height: usize) -> Result<Camera> {
    let mut r = Mat3::zeros();
    let mut center = Vec3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            // Flip the y and z camera axes into the OpenCV frame.
            r[(i, j)] = if j == 0 { c2w[i][j] } else { -c2w[i][j] };
        }
        center[i] = c2w[i][3];
    }
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let ortho = u * vt;
    if (ortho - r).abs().max() > 1e-3 || ortho.determinant() < 0.0 {
        return Err(Error::InvalidParameter("pose rotation is not a proper rotation".into()));
    }
    let rotation = ortho.transpose();
    let focal = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
    Camera::new(
        rotation,
        -(rotation * center),
        [focal, focal],
        [width as f64 / 2.0, height as f64 / 2.0],
        width,
        height,
        Camera::DEFAULT_NEAR,
        Camera::DEFAULT_FAR,
    )
}

/// Inverse of [`nerf_camera`]'s pose conversion.
pub fn nerf_pose(cam: &Camera) -> [[f64; 4]; 4] {
    let c2w = cam.rotation.transpose();
    let c = cam.center();
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = if j == 0 { c2w[(i, j)] } else { -c2w[(i, j)] };
        }
        m[i][3] = c[i];
    }
    m[3][3] = 1.0;
    m
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, "json", e.to_string()))
}

fn load_split(root: &Path, json: &Path, background: [f64; 3]) -> Result<(f64, Vec<Frame>)> {
    let v = read_json(json)?;
    let angle = v
        .get("camera_angle_x")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::parse(json, "camera_angle_x", "missing or not a number"))?;
    if !(angle > 0.0 && angle < std::f64::consts::PI) {
        return Err(Error::parse(json, "camera_angle_x", format!("{angle} is outside (0, pi)")));
    }
    let frames = v
        .get("frames")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(json, "frames", "missing or not an array"))?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let key = |k: &str| format!("frames[{i}].{k}");
        let file_path = f
            .get("file_path")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse(json, key("file_path"), "missing or not a string"))?;
        let rows = f
            .get("transform_matrix")
            .and_then(Value::as_array)
            .filter(|r| r.len() == 4)
            .ok_or_else(|| Error::parse(json, key("transform_matrix"), "expected a 4x4 array"))?;
        let mut c2w = [[0.0; 4]; 4];
        for (r, row) in rows.iter().enumerate() {
            let row = row
                .as_array()
                .filter(|x| x.len() == 4)
                .ok_or_else(|| Error::parse(json, key("transform_matrix"), "expected a 4x4 array"))?;
            for (c, x) in row.iter().enumerate() {
                c2w[r][c] = x
                    .as_f64()
                    .ok_or_else(|| Error::parse(json, key("transform_matrix"), "entries must be numbers"))?;
            }
        }
        let mut rel = PathBuf::from(file_path);
        if rel.extension().is_none() {
            rel.set_extension("png");
        }
        let image = Image::load_png(&root.join(&rel), background)?;
        let camera = nerf_camera(&c2w, angle, image.width, image.height)
            .map_err(|e| Error::parse(json, key("transform_matrix"), e.to_string()))?;
        out.push(Frame {
            file_path: file_path.to_string(),
            camera,
            image,
        });
    }
    Ok((angle, out))
}

/// Loads `dir`, compositing transparent pixels over `background`.
pub fn load_nerf_synthetic(dir: &Path, background: [f64; 3]) -> Result<Dataset> {
    let (camera_angle_x, train) = load_split(dir, &dir.join("transforms_train.json"), background)?;
    let test_json = dir.join("transforms_test.json");
    let test = if test_json.exists() {
        Some(load_split(dir, &test_json, background)?.1)
    } else {
        None
    };
    Ok(Dataset {
        root: dir.to_path_buf(),
        camera_angle_x,
        train,
        test,
    })
}

/// Writes `views` as `<split>/r_<i>.png` plus `transforms_<split>.json`.
pub fn write_nerf_split(dir: &Path, split: &str, camera_angle_x: f64, views: &[TrainView]) -> Result<()> {
    let sub = dir.join(split);
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut frames = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let rel = format!("./{split}/r_{i}");
        v.image.save_png(&sub.join(format!("r_{i}.png")))?;
        frames.push(serde_json::json!({
            "file_path": rel,
            "transform_matrix": nerf_pose(&v.camera),
        }));
    }
    let doc = serde_json::json!({ "camera_angle_x": camera_angle_x, "frames": frames });
    let path = dir.join(format!("transforms_{split}.json"));
    let text = serde_json::to_string_pretty(&doc).expect("json values serialize");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(eye: Vec3, w: usize, h: usize, value: f64) -> TrainView {
        TrainView {
            camera: Camera::look_at(eye, Vec3::zeros(), Vec3::z(), 0.5 * w as f64 / 0.4f64.tan(), w, h),
            image: Image::filled(w, h, [value; 3]),
        }
    }

    #[test]
    fn blender_pose_conversion() {
        // Camera at +z looking down −z with +y up, in the OpenGL convention.
        let c2w = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 4.0], [0.0, 0.0, 0.0, 1.0]];
        let cam = nerf_camera(&c2w, 0.8, 40, 30).unwrap();
        assert!((cam.center() - Vec3::new(0.0, 0.0, 4.0)).norm() < 1e-12);
        let origin = cam.world_to_camera(&Vec3::zeros());
        assert!((origin - Vec3::new(0.0, 0.0, 4.0)).norm() < 1e-12);
        // World +y is up, so it lands above the center (smaller row).
        let up = cam.project(&cam.world_to_camera(&Vec3::new(0.0, 0.5, 0.0)));
        assert!((up[0] - 20.0).abs() < 1e-9 && up[1] < 15.0);
        assert!((cam.focal[0] - 20.0 / 0.4f64.tan()).abs() < 1e-9);
        let back = nerf_pose(&cam);
        for i in 0..4 {
            for j in 0..4 {
                assert!((back[i][j] - c2w[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn write_then_load_with_holdout() {
        let dir = tempfile::tempdir().unwrap();
        let views: Vec<TrainView> = (0..10)
            .map(|i| view(Vec3::new(3.0 * (i as f64).cos(), 3.0 * (i as f64).sin(), 1.0), 12, 8, i as f64 / 10.0))
            .collect();
        write_nerf_split(dir.path(), "train", 0.8, &views).unwrap();
        let ds = load_nerf_synthetic(dir.path(), [0.0; 3]).unwrap();
        assert!(ds.test.is_none());
        assert_eq!(ds.holdout_indices(), vec![0, 8]);
        assert_eq!(ds.frames(Split::Train).len(), 8);
        let test = ds.frames(Split::Test);
        assert_eq!(test.len(), 2);
        assert_eq!(test[1].file_path, "./train/r_8");
        for (f, v) in ds.train.iter().zip(&views) {
            assert!((f.camera.rotation - v.camera.rotation).abs().max() < 1e-12);
            assert!((f.camera.translation - v.camera.translation).abs().max() < 1e-12);
            assert!((f.camera.focal[0] - v.camera.focal[0]).abs() < 1e-9);
            assert!((f.image.pixels[0][0] - v.image.pixels[0][0]).abs() <= 0.5 / 255.0 + 1e-6);
        }

        write_nerf_split(dir.path(), "test", 0.8, &views[..3]).unwrap();
        let ds = load_nerf_synthetic(dir.path(), [0.0; 3]).unwrap();
        assert_eq!(ds.frames(Split::Train).len(), 10);
        assert_eq!(ds.frames(Split::Test).len(), 3);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("transforms_train.json");
        std::fs::write(&p, r#"{"camera_angle_x": 0.7, "frames": [{"file_path": "a", "transform_matrix": [[1,0,0]]}]}"#).unwrap();
        let m = load_nerf_synthetic(dir.path(), [0.0; 3]).unwrap_err().to_string();
        assert!(m.contains("frames[0].transform_matrix"), "{m}");
        std::fs::write(&p, r#"{"frames": []}"#).unwrap();
        let m = load_nerf_synthetic(dir.path(), [0.0; 3]).unwrap_err().to_string();
        assert!(m.contains("camera_angle_x"), "{m}");
        let m = load_nerf_synthetic(&dir.path().join("nowhere"), [0.0; 3]).unwrap_err().to_string();
        assert!(m.contains("transforms_train.json"), "{m}");
    }

    #[test]
    fn missing_image_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("transforms_train.json");
        std::fs::write(
            &p,
            r#"{"camera_angle_x": 0.7, "frames": [{"file_path": "./train/r_0", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]]}]}"#,
        )
        .unwrap();
        let m = load_nerf_synthetic(dir.path(), [0.0; 3]).unwrap_err().to_string();
        assert!(m.contains("r_0.png"), "{m}");
    }
}
