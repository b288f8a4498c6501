//! Confidence-weighted metric depth loss and photometric losses.

use serde::{Deserialize, Serialize};

use crate::camera_geom::DepthMap;
use crate::error::{Error, Result};
use crate::raster::{GrayImage, RgbImage};

/// Per-pixel depth-supervision weights over the LiDAR-valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    /// In `[0, 1]` on valid pixels, 0 elsewhere.
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_depth: f64,
    pub lambda_rgb: f64,
    pub lambda_ssim: f64,
    /// Weight of the normal-alignment term when enabled.
    pub lambda_normal: f64,
    pub use_normal: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_depth: 1.0,
            lambda_rgb: 0.8,
            lambda_ssim: 0.2,
            lambda_normal: 0.01,
            use_normal: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_depth, self.lambda_rgb, self.lambda_ssim, self.lambda_normal];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Only the depth term.
    pub fn depth_only() -> Self {
        LossWeights {
            lambda_depth: 1.0,
            lambda_rgb: 0.0,
            lambda_ssim: 0.0,
            lambda_normal: 0.0,
            use_normal: false,
        }
    }
}

/// Five-point Laplacian with replicated borders. RGB input goes through
/// [`RgbImage::luminance`] first.
pub fn laplacian(image: &GrayImage) -> Result<GrayImage> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(Error::ImageTooSmall("laplacian of an empty image".into()));
    }
    if let Some(i) = image.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("pixel {i} of laplacian input")));
    }
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        image.data[yc * w + xc]
    };
    let mut out = GrayImage::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            out.data[y as usize * w + x as usize] =
                at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
        }
    }
    Ok(out)
}

/// `w(p) = 1 - |∇²I(p)| / max_{q ∈ valid} |∇²I(q)|` on valid pixels.
/// A zero maximum gives weight 1 everywhere on the valid set.
pub fn confidence_weights(image: &RgbImage, valid: &[bool]) -> Result<ConfidenceMap> {
    if valid.len() != image.width * image.height {
        return Err(Error::LengthMismatch {
            what: "validity mask vs image",
            left: valid.len(),
            right: image.width * image.height,
        });
    }
    if !valid.iter().any(|v| *v) {
        return Err(Error::EmptyValidSet("confidence weights need at least one valid pixel".into()));
    }
    let lap = laplacian(&image.luminance())?;
    let max = lap
        .data
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(l, _)| l.abs())
        .fold(0.0, f64::max);
    let weights = lap
        .data
        .iter()
        .zip(valid)
        .map(|(l, &v)| match (v, max > 0.0) {
            (false, _) => 0.0,
            (true, false) => 1.0,
            (true, true) => (1.0 - l.abs() / max).clamp(0.0, 1.0),
        })
        .collect();
    Ok(ConfidenceMap {
        width: image.width,
        height: image.height,
        weights,
        valid: valid.to_vec(),
    })
}

/// Mean of `w(p) |D_lidar(p) - D̂(p)|` over pixels valid in both maps.
/// Returns 0 (with a warning) when no pixel is jointly valid.
pub fn depth_loss(lidar: &DepthMap, rendered: &DepthMap, conf: &ConfidenceMap) -> Result<f64> {
    let dims = |w: usize, h: usize| w * h;
    let n = dims(lidar.width, lidar.height);
    if (lidar.width, lidar.height) != (rendered.width, rendered.height)
        || (lidar.width, lidar.height) != (conf.width, conf.height)
    {
        return Err(Error::LengthMismatch {
            what: "depth map resolutions",
            left: n,
            right: dims(rendered.width, rendered.height),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if lidar.valid[i] && rendered.valid[i] {
            sum += conf.weights[i] * (lidar.depth[i] - rendered.depth[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("depth loss: no pixel is valid in both the LiDAR and rendered maps");
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

fn check_same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::LengthMismatch {
            what: "image shapes",
            left: a.width * a.height,
            right: b.width * b.height,
        });
    }
    Ok(())
}

/// Mean absolute error over pixels and channels.
pub fn l1_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs())
        .sum();
    Ok(sum / (3 * a.data.len()).max(1) as f64)
}

pub fn mse_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.data.len()).max(1) as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; infinite for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let mse = mse_rgb(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Per-position SSIM summed over the three channels, for the window
/// positions `ox0..=ox1`, `oy0..=oy1` (top-left corners). Pixels of the
/// first image come from `a`, which lets callers patch a region without
/// copying the image. Row-major output.
pub fn ssim_map_region<F>(a: F, b: &RgbImage, ox0: usize, oy0: usize, ox1: usize, oy1: usize) -> Vec<f64>
where
    F: Fn(usize, usize) -> [f64; 3],
{
    let k = gaussian_kernel();
    let ow = ox1 - ox0 + 1;
    let oh = oy1 - oy0 + 1;
    let pw = ow + SSIM_WINDOW - 1;
    let ph = oh + SSIM_WINDOW - 1;
    let mut out = vec![0.0; ow * oh];
    let mut pa = vec![0.0; pw * ph];
    let mut pb = vec![0.0; pw * ph];
    // stats: a, b, aa, bb, ab
    let mut horiz = vec![[0.0f64; 5]; ow * ph];
    for c in 0..3 {
        for y in 0..ph {
            for x in 0..pw {
                pa[y * pw + x] = a(ox0 + x, oy0 + y)[c];
                pb[y * pw + x] = b.get(ox0 + x, oy0 + y)[c];
            }
        }
        for y in 0..ph {
            for x in 0..ow {
                let mut h = [0.0; 5];
                for (i, kv) in k.iter().enumerate() {
                    let va = pa[y * pw + x + i];
                    let vb = pb[y * pw + x + i];
                    h[0] += va * kv;
                    h[1] += vb * kv;
                    h[2] += va * va * kv;
                    h[3] += vb * vb * kv;
                    h[4] += va * vb * kv;
                }
                horiz[y * ow + x] = h;
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                let mut m = [0.0; 5];
                for (j, kv) in k.iter().enumerate() {
                    let h = &horiz[(y + j) * ow + x];
                    for s in 0..5 {
                        m[s] += h[s] * kv;
                    }
                }
                let (ma, mb) = (m[0], m[1]);
                let va = m[2] - ma * ma;
                let vb = m[3] - mb * mb;
                let cov = m[4] - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                out[y * ow + x] += num / den;
            }
        }
    }
    out
}

/// Number of window positions along each axis.
pub fn ssim_positions(width: usize, height: usize) -> (usize, usize) {
    (width + 1 - SSIM_WINDOW, height + 1 - SSIM_WINDOW)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over the
/// three channels. Only windows fully inside the image are pooled.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let (ow, oh) = ssim_positions(a.width, a.height);
    let map = ssim_map_region(|x, y| a.get(x, y), b, 0, 0, ow - 1, oh - 1);
    Ok(map.iter().sum::<f64>() / (3 * ow * oh) as f64)
}

/// `1 - SSIM`.
pub fn ssim_loss(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(1.0 - ssim(a, b)?)
}

/// `λ_rgb·L_rgb + λ_ssim·L_ssim + λ_depth·L_depth`.
pub fn total_loss(rgb_l1: f64, ssim_loss: f64, depth: f64, w: &LossWeights) -> f64 {
    w.lambda_rgb * rgb_l1 + w.lambda_ssim * ssim_loss + w.lambda_depth * depth
}

/// [`total_loss`] plus the normal-alignment term when `w.use_normal` is set.
pub fn total_loss_with_normal(rgb_l1: f64, ssim_loss: f64, depth: f64, normal: f64, w: &LossWeights) -> f64 {
    let base = total_loss(rgb_l1, ssim_loss, depth, w);
    if w.use_normal {
        base + w.lambda_normal * normal
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> GrayImage {
        let mut g = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                g.data[y * w + x] = f(x, y);
            }
        }
        g
    }

    #[test]
    fn laplacian_cases() {
        let c = laplacian(&gray(5, 4, |_, _| 0.7)).unwrap();
        assert!(c.data.iter().all(|v| *v == 0.0));

        let ramp = laplacian(&gray(6, 5, |x, _| x as f64)).unwrap();
        for y in 0..5 {
            for x in 1..5 {
                assert_eq!(ramp.get(x, y), 0.0);
            }
        }

        let spike = laplacian(&gray(5, 5, |x, y| if (x, y) == (2, 2) { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(spike.get(2, 2), -4.0);
        for (x, y) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(spike.get(x, y), 1.0);
        }
        assert_eq!(spike.get(1, 1), 0.0);

        assert!(laplacian(&GrayImage::new(0, 0)).is_err());
    }

    #[test]
    fn confidence_cases() {
        let img = RgbImage::filled(6, 6, [0.3, 0.3, 0.3]);
        let conf = confidence_weights(&img, &vec![true; 36]).unwrap();
        assert!(conf.weights.iter().all(|w| *w == 1.0));

        let mut img = RgbImage::new(7, 7);
        img.set(3, 3, [1.0, 1.0, 1.0]);
        let conf = confidence_weights(&img, &vec![true; 49]).unwrap();
        assert_eq!(conf.weights[3 * 7 + 3], 0.0);
        // Neighbors have |L| = 1, max |L| = 4.
        assert!((conf.weights[3 * 7 + 2] - 0.75).abs() < 1e-12);

        assert!(confidence_weights(&img, &vec![false; 49]).is_err());
    }

    #[test]
    fn depth_loss_cases() {
        let mut lidar = DepthMap::invalid(2, 1);
        let mut rendered = DepthMap::invalid(2, 1);
        let conf = ConfidenceMap {
            width: 2,
            height: 1,
            weights: vec![1.0, 0.5],
            valid: vec![true, true],
        };
        lidar.depth = vec![2.0, 3.0];
        lidar.valid = vec![true, true];
        rendered.depth = vec![1.0, 1.0];
        rendered.valid = vec![true, true];
        assert_eq!(depth_loss(&lidar, &rendered, &conf).unwrap(), 1.0);
        assert_eq!(depth_loss(&lidar, &lidar, &conf).unwrap(), 0.0);
        rendered.valid = vec![false, false];
        assert_eq!(depth_loss(&lidar, &rendered, &conf).unwrap(), 0.0);
        let other = DepthMap::invalid(1, 2);
        assert!(depth_loss(&lidar, &other, &conf).is_err());
    }

    #[test]
    fn photometric_cases() {
        let zeros = RgbImage::new(12, 12);
        let ones = RgbImage::filled(12, 12, [1.0; 3]);
        let gray = RgbImage::filled(12, 12, [0.5; 3]);
        assert_eq!(l1_rgb(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(l1_rgb(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(l1_rgb(&gray, &zeros).unwrap(), 0.5);
        assert_eq!(psnr(&gray, &gray).unwrap(), f64::INFINITY);
        assert!((psnr(&gray, &zeros).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(ssim(&gray, &gray).unwrap(), 1.0);
        assert!(ssim(&RgbImage::new(10, 12), &RgbImage::new(10, 12)).is_err());
        assert!(l1_rgb(&zeros, &RgbImage::new(3, 3)).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_loss(0.0, 0.0, 0.5, &w), 0.5);
        assert_eq!(total_loss(1.0, 1.0, 0.0, &w), 1.0);
        assert_eq!(total_loss_with_normal(0.0, 0.0, 0.0, 1.0, &w), 0.0);
        let wn = LossWeights {
            use_normal: true,
            ..Default::default()
        };
        assert_eq!(total_loss_with_normal(0.0, 0.0, 0.0, 1.0, &wn), 0.01);
    }
}
