//! Linear RGB images, PNG decoding and area resampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{quantize, FrameBuffer};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "image of {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p.map(|v| v.clamp(0.0, 1.0))).collect(),
        }
    }

    /// Decodes a PNG; an alpha channel is composited over `background`.
    pub fn load_png(path: &Path, background: [f64; 3]) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgba = decoded.to_rgba32f();
        let (w, h) = (rgba.width() as usize, rgba.height() as usize);
        let pixels = rgba
            .pixels()
            .map(|p| {
                let a = p.0[3] as f64;
                [0, 1, 2].map(|c| p.0[c] as f64 * a + background[c] * (1.0 - a))
            })
            .collect();
        Image::new(w, h, pixels)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.map(quantize)).collect()
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

    /// Box-filter resampling: every output pixel is the area-weighted mean of
    /// the input pixels it covers.
    pub fn resize_area(&self, width: usize, height: usize) -> Image {
        assert!(width > 0 && height > 0);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let wx = area_weights(self.width, width);
        let wy = area_weights(self.height, height);
        // Horizontal pass into a (height_in × width) buffer, then vertical.
        let mut tmp = vec![[0.0; 3]; self.height * width];
        for y in 0..self.height {
            for (x, taps) in wx.iter().enumerate() {
                let mut acc = [0.0; 3];
                for &(sx, w) in taps {
                    let p = self.pixels[y * self.width + sx];
                    for c in 0..3 {
                        acc[c] += w * p[c];
                    }
                }
                tmp[y * width + x] = acc;
            }
        }
        let mut out = vec![[0.0; 3]; height * width];
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..width {
                let mut acc = [0.0; 3];
                for &(sy, w) in taps {
                    let p = tmp[sy * width + x];
                    for c in 0..3 {
                        acc[c] += w * p[c];
                    }
                }
                out[y * width + x] = acc;
            }
        }
        Image {
            width,
            height,
            pixels: out,
        }
    }
}

impl From<&FrameBuffer> for Image {
    fn from(fb: &FrameBuffer) -> Self {
        Image {
            width: fb.width,
            height: fb.height,
            pixels: fb.color.clone(),
        }
    }
}

/// Normalized overlap of each output cell with the input cells, along one axis.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let mut taps = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(from);
            for i in first..last {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / ratio));
                }
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_factor_is_block_mean() {
        let pixels: Vec<[f64; 3]> = (0..16).map(|i| [i as f64, 0.0, 1.0]).collect();
        let img = Image::new(4, 4, pixels).unwrap();
        let small = img.resize_area(2, 2);
        assert_eq!(small.pixel(0, 0), [(0.0 + 1.0 + 4.0 + 5.0) / 4.0, 0.0, 1.0]);
        assert_eq!(small.pixel(1, 1), [(10.0 + 11.0 + 14.0 + 15.0) / 4.0, 0.0, 1.0]);
    }

    #[test]
    fn fractional_factor_preserves_mean() {
        let pixels: Vec<[f64; 3]> = (0..35).map(|i| [(i * 7 % 11) as f64, 1.0, 0.0]).collect();
        let img = Image::new(7, 5, pixels).unwrap();
        let small = img.resize_area(3, 2);
        let mean_in: f64 = img.pixels.iter().map(|p| p[0]).sum::<f64>() / 35.0;
        let mean_out: f64 = small.pixels.iter().map(|p| p[0]).sum::<f64>() / 6.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
        assert!(small.pixels.iter().all(|p| (p[1] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip_and_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::new(2, 1, vec![[1.0, 0.0, 0.0], [0.0, 0.5, 1.0]]).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path, [0.0; 3]).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());

        let rgba = image::RgbaImage::from_raw(1, 1, vec![255, 0, 0, 0]).unwrap();
        let p2 = dir.path().join("b.png");
        rgba.save(&p2).unwrap();
        assert_eq!(Image::load_png(&p2, [0.0, 1.0, 0.0]).unwrap().pixel(0, 0), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = Image::load_png(Path::new("/nonexistent/x.png"), [0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
