//! Photometric loss `(1−λ)·L1 + λ·(1−SSIM)/2`, its image gradient, and PSNR.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied separably with zero
//! padding, `C1 = 0.01²`, `C2 = 0.03²`, averaged over pixels and channels.

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable zero-padded filter of one channel plane.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += t * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += t * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.pixels.iter().map(|p| p[c]).collect()
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Config(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean SSIM and, optionally, its gradient w.r.t. `x`.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> (f64, Option<Vec<[f64; 3]>>) {
    let (w, h) = (x.width, x.height);
    let n = w * h;
    let taps = ssim_taps();
    let count = (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; n]);
    for c in 0..3 {
        let xp = plane(x, c);
        let yp = plane(y, c);
        let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xp.iter().zip(&yp).map(|(a, b)| a * b).collect();
        let mx = blur(&xp, w, h, &taps);
        let my = blur(&yp, w, h, &taps);
        let exx = blur(&xx, w, h, &taps);
        let eyy = blur(&yy, w, h, &taps);
        let exy = blur(&xy, w, h, &taps);
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for p in 0..n {
            let sxx = exx[p] - mx[p] * mx[p];
            let syy = eyy[p] - my[p] * my[p];
            let sxy = exy[p] - mx[p] * my[p];
            let a1 = 2.0 * mx[p] * my[p] + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // S as a function of (μx, E[x²], E[xy]) with σ terms expanded.
                d_mx[p] = s * (2.0 * my[p] / a1 - 2.0 * my[p] / a2 - 2.0 * mx[p] / b1 + 2.0 * mx[p] / b2) / count;
                d_exx[p] = -s / b2 / count;
                d_exy[p] = 2.0 * s / a2 / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            // The window is symmetric, so the adjoint of the blur is the blur.
            let ga = blur(&d_mx, w, h, &taps);
            let gb = blur(&d_exx, w, h, &taps);
            let gc = blur(&d_exy, w, h, &taps);
            for p in 0..n {
                g[p][c] = ga[p] + 2.0 * xp[p] * gb[p] + yp[p] * gc[p];
            }
        }
    }
    (total / count, grad)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// Training loss of `rendered` against `gt` and `dL/drendered`.
pub fn loss(rendered: &Image, gt: &Image, lambda_dssim: f64) -> Result<(f64, Vec<[f64; 3]>)> {
    check_same_size(rendered, gt)?;
    let count = (3 * rendered.pixels.len()) as f64;
    let mut l1 = 0.0;
    let mut grad = vec![[0.0; 3]; rendered.pixels.len()];
    for (p, (r, g)) in rendered.pixels.iter().zip(&gt.pixels).enumerate() {
        for c in 0..3 {
            let d = r[c] - g[c];
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[p][c] = (1.0 - lambda_dssim) * sign / count;
        }
    }
    l1 /= count;
    let (s, d_s) = ssim_impl(rendered, gt, true);
    for (g, ds) in grad.iter_mut().zip(d_s.expect("gradient requested")) {
        for c in 0..3 {
            g[c] -= 0.5 * lambda_dssim * ds[c];
        }
    }
    Ok(((1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s) / 2.0, grad))
}

/// `10·log10(1/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let mut se = 0.0;
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        for c in 0..3 {
            se += (x[c] - y[c]) * (x[c] - y[c]);
        }
    }
    let mse = se / (3 * a.pixels.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 13, 9);
        let (l, g) = loss(&a, &a, 0.2).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-12));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_images_match_scalar_ssim() {
        let (w, h, a, b) = (20usize, 14usize, 0.3, 0.7);
        let x = Image::filled(w, h, [a; 3]);
        let y = Image::filled(w, h, [b; 3]);
        // Window mass at each pixel under zero padding, summed in 2-D directly.
        let mut expect = 0.0;
        for py in 0..h as i64 {
            for px in 0..w as i64 {
                let mut mass = 0.0;
                let mut norm = 0.0;
                for dy in -5i64..=5 {
                    for dx in -5i64..=5 {
                        let k = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                        norm += k;
                        let (sx, sy) = (px + dx, py + dy);
                        if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                            mass += k;
                        }
                    }
                }
                let m = mass / norm;
                let (mx, my) = (a * m, b * m);
                let (vx, vy, cxy) = (a * a * m - mx * mx, b * b * m - my * my, a * b * m - mx * my);
                expect += ((2.0 * mx * my + 0.0001) * (2.0 * cxy + 0.0009))
                    / ((mx * mx + my * my + 0.0001) * (vx + vy + 0.0009));
            }
        }
        expect /= (w * h) as f64;
        let s = ssim(&x, &y).unwrap();
        assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
        let (l, _) = loss(&x, &y, 0.2).unwrap();
        assert!((l - (0.8 * 0.4 + 0.2 * (1.0 - expect) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 17, 12);
        let y = random_image(&mut rng, 17, 12);
        let (_, g) = loss(&x, &y, 0.2).unwrap();
        let h = 1e-6;
        for _ in 0..20 {
            let p = rng.random_range(0..x.pixels.len());
            let c = rng.random_range(0..3);
            let mut plus = x.clone();
            plus.pixels[p][c] += h;
            let mut minus = x.clone();
            minus.pixels[p][c] -= h;
            let fd = (loss(&plus, &y, 0.2).unwrap().0 - loss(&minus, &y, 0.2).unwrap().0) / (2.0 * h);
            let rel = (fd - g[p][c]).abs() / fd.abs().max(g[p][c].abs()).max(1e-6);
            assert!(rel < 1e-3, "pixel {p} ch {c}: {} vs {fd}", g[p][c]);
        }
    }

    #[test]
    fn psnr_closed_form_and_recomputation() {
        let a = Image::filled(8, 8, [0.5; 3]);
        let b = Image::filled(8, 8, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 10, 7);
        let y = random_image(&mut rng, 10, 7);
        let flat_x: Vec<f64> = x.pixels.iter().flatten().copied().collect();
        let flat_y: Vec<f64> = y.pixels.iter().flatten().copied().collect();
        let diffs: Vec<f64> = flat_x.iter().zip(&flat_y).map(|(a, b)| a - b).collect();
        let mse = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((psnr(&x, &y).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_is_config_error() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 5, [0.0; 3]);
        assert!(matches!(loss(&a, &b, 0.2), Err(Error::Config(_))));
        assert!(matches!(psnr(&a, &b), Err(Error::Config(_))));
    }
}
