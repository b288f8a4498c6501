//! CPU forward renderer treating each Gaussian as a local plane.
//!
//! Each Gaussian contributes an effective per-pixel alpha from its
//! projected 2D footprint. Depth is the weighted ratio
//! `Σ ωᵢ 𝒟ᵢ / Σ ωᵢ (nᵢᵀ K⁻¹ p̃)`, where `nᵢ` is the camera-frame plane normal and
//! `𝒟ᵢ = nᵢ · μᵢ` the plane's distance from the camera. With a single
//! contributor this is exactly the z-depth where the pixel ray meets the
//! plane, independent of alpha.

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_geom::{CameraView, DepthMap};
use crate::raster::RgbImage;
use crate::splat_model::{gaussian_normal, GaussianSet, Gaussian};

/// Contributions below this alpha are ignored.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Upper clamp on per-pixel alpha.
pub const ALPHA_MAX: f64 = 0.999;
/// Isotropic variance (px²) added to every projected footprint.
pub const LOW_PASS_VARIANCE: f64 = 0.3;
pub const TILE_SIZE: usize = 16;
/// Pixels whose depth denominator falls below this are marked invalid.
pub const MIN_DENOMINATOR: f64 = 1e-9;

/// A Gaussian prepared for rasterization in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarSplat {
    /// Position in the source set.
    pub index: usize,
    pub normal_cam: Vector3<f64>,
    pub plane_distance: f64,
    pub mean_cam: Vector3<f64>,
    pub mean_px: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Pixel radius beyond which alpha is below [`ALPHA_MIN`].
    pub radius_px: f64,
}

/// Plane normal, distance and screen footprint of `g` in `view`. `None`
/// when the mean is behind the camera or the plane passes through the
/// camera center.
pub fn plane_params(g: &Gaussian, view: &CameraView) -> Option<PlanarSplat> {
    plane_params_indexed(g, 0, view)
}

pub(crate) fn plane_params_indexed(g: &Gaussian, index: usize, view: &CameraView) -> Option<PlanarSplat> {
    let mu = view.world_to_camera(&g.mean);
    if mu.z <= 1e-6 {
        return None;
    }
    let mut n = view.rotation * gaussian_normal(g);
    let mut d = n.dot(&mu);
    if d < 0.0 {
        n = -n;
        d = -d;
    }
    if d <= 1e-9 * mu.norm() {
        return None;
    }

    let w = view.rotation;
    let sigma_cam = w * g.covariance() * w.transpose();
    let (x, y, z) = (mu.x, mu.y, mu.z);
    let j = Matrix2x3::new(
        view.fx / z,
        0.0,
        -view.fx * x / (z * z),
        0.0,
        view.fy / z,
        -view.fy * y / (z * z),
    );
    let cov2 = j * sigma_cam * j.transpose() + Matrix2::identity() * LOW_PASS_VARIANCE;
    let conic = cov2.try_inverse()?;

    let opacity = g.opacity;
    if opacity * 255.0 <= 1.0 {
        return None;
    }
    let tr = cov2.trace();
    let det = cov2.determinant();
    let lambda_max = tr / 2.0 + ((tr * tr / 4.0 - det).max(0.0)).sqrt();
    let radius_px = (2.0 * (opacity * 255.0).ln() * lambda_max).sqrt();

    Some(PlanarSplat {
        index,
        normal_cam: n,
        plane_distance: d,
        mean_cam: mu,
        mean_px: Vector2::new(view.fx * x / z + view.cx, view.fy * y / z + view.cy),
        conic,
        opacity,
        color: [g.color.x, g.color.y, g.color.z],
        radius_px,
    })
}

/// `opacity · exp(-½ dᵀ conic d)` clamped to [`ALPHA_MAX`].
#[inline]
pub fn splat_alpha(s: &PlanarSplat, pixel: &Vector2<f64>) -> f64 {
    let d = pixel - s.mean_px;
    let q = d.dot(&(s.conic * d));
    (s.opacity * (-0.5 * q).exp()).min(ALPHA_MAX)
}

/// Per-contributor weight used in the depth ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthWeighting {
    /// `αᵢ · Tᵢ` with front-to-back transmittance.
    #[default]
    Transmittance,
    /// Bare `αᵢ`.
    RawAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub depth_weighting: DepthWeighting,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            depth_weighting: DepthWeighting::Transmittance,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub depth: DepthMap,
    pub color: RgbImage,
    /// Number of Gaussians contributing to each pixel.
    pub contributors: Vec<u32>,
    /// Pixels with contributors whose depth denominator was too small.
    pub invalid_denominators: usize,
}

struct TileOutput {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    depth: Vec<Option<f64>>,
    color: Vec<[f64; 3]>,
    contributors: Vec<u32>,
    invalid_denominators: usize,
}

/// Prepare every Gaussian visible in `view`.
pub fn prepare_splats(set: &GaussianSet, view: &CameraView) -> Vec<PlanarSplat> {
    set.gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| plane_params_indexed(g, i, view))
        .collect()
}

pub fn render(set: &GaussianSet, view: &CameraView, opts: &RenderOptions) -> RenderedFrame {
    let splats = prepare_splats(set, view);
    render_splats(&splats, view, opts)
}

pub fn render_splats(splats: &[PlanarSplat], view: &CameraView, opts: &RenderOptions) -> RenderedFrame {
    let (w, h) = (view.width, view.height);
    let tiles: Vec<(usize, usize)> = (0..h)
        .step_by(TILE_SIZE)
        .flat_map(|y| (0..w).step_by(TILE_SIZE).map(move |x| (x, y)))
        .collect();

    let outputs: Vec<TileOutput> = tiles
        .par_iter()
        .map(|&(x0, y0)| render_tile(splats, view, opts, x0, y0))
        .collect();

    let mut depth = DepthMap::invalid(w, h);
    let mut color = RgbImage::filled(w, h, opts.background);
    let mut contributors = vec![0u32; w * h];
    let mut invalid_denominators = 0;
    for t in outputs {
        invalid_denominators += t.invalid_denominators;
        for ty in 0..t.h {
            for tx in 0..t.w {
                let src = ty * t.w + tx;
                let dst = (t.y0 + ty) * w + t.x0 + tx;
                if let Some(d) = t.depth[src] {
                    depth.depth[dst] = d;
                    depth.valid[dst] = true;
                }
                color.data[dst] = t.color[src];
                contributors[dst] = t.contributors[src];
            }
        }
    }
    RenderedFrame {
        depth,
        color,
        contributors,
        invalid_denominators,
    }
}

/// Shaded result of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelOutput {
    pub depth: Option<f64>,
    pub color: [f64; 3],
    pub contributors: u32,
    pub invalid_denominator: bool,
}

/// Whether pixel `(x, y)` lies in the square footprint of `s`.
#[inline]
pub fn footprint_contains(s: &PlanarSplat, x: f64, y: f64) -> bool {
    (x - s.mean_px.x).abs() <= s.radius_px && (y - s.mean_px.y).abs() <= s.radius_px
}

/// Inclusive pixel box `(x0, y0, x1, y1)` of the footprint of `s` clipped
/// to the image, or `None` when it misses the image.
pub fn footprint_box(s: &PlanarSplat, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let lo_x = (s.mean_px.x - s.radius_px).ceil().max(0.0);
    let lo_y = (s.mean_px.y - s.radius_px).ceil().max(0.0);
    let hi_x = (s.mean_px.x + s.radius_px).floor().min(width as f64 - 1.0);
    let hi_y = (s.mean_px.y + s.radius_px).floor().min(height as f64 - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return None;
    }
    Some((lo_x as usize, lo_y as usize, hi_x as usize, hi_y as usize))
}

/// Scratch entry: (ray depth, index, alpha, n·r, plane distance, color).
pub type Hit = (f64, usize, f64, f64, f64, [f64; 3]);

/// Composite pixel `(x, y)` from `candidates`, which must include every
/// splat whose footprint covers the pixel; others are ignored. `hits` is
/// scratch space.
pub fn shade_pixel(
    candidates: &[&PlanarSplat],
    view: &CameraView,
    opts: &RenderOptions,
    x: usize,
    y: usize,
    hits: &mut Vec<Hit>,
) -> PixelOutput {
    let (u, v) = (x as f64, y as f64);
    let pixel = Vector2::new(u, v);
    let ray = view.ray(u, v);
    hits.clear();
    for s in candidates {
        if !footprint_contains(s, u, v) {
            continue;
        }
        let alpha = splat_alpha(s, &pixel);
        if alpha < ALPHA_MIN {
            continue;
        }
        let nr = s.normal_cam.dot(&ray);
        if nr <= 0.0 {
            continue;
        }
        hits.push((s.plane_distance / nr, s.index, alpha, nr, s.plane_distance, s.color));
    }
    let mut out = PixelOutput {
        depth: None,
        color: opts.background,
        contributors: 0,
        invalid_denominator: false,
    };
    if hits.is_empty() {
        return out;
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut transmittance = 1.0;
    let (mut num, mut den) = (0.0, 0.0);
    let mut rgb = [0.0; 3];
    // Depth weights are taken relative to the first contributor's so that a
    // lone contributor yields exactly 𝒟 / (n·r).
    let mut w0 = 0.0;
    for &(_, _, alpha, nr, dist, c) in hits.iter() {
        let composite = alpha * transmittance;
        let wd = match opts.depth_weighting {
            DepthWeighting::Transmittance => composite,
            DepthWeighting::RawAlpha => alpha,
        };
        if w0 == 0.0 {
            w0 = wd;
        }
        let wd = wd / w0;
        num += wd * dist;
        den += wd * nr;
        for k in 0..3 {
            rgb[k] += composite * c[k];
        }
        transmittance *= 1.0 - alpha;
    }
    for k in 0..3 {
        rgb[k] += transmittance * opts.background[k];
    }
    out.color = rgb;
    out.contributors = hits.len() as u32;
    if den >= MIN_DENOMINATOR {
        out.depth = Some(num / den);
    } else {
        out.invalid_denominator = true;
    }
    out
}

fn render_tile(splats: &[PlanarSplat], view: &CameraView, opts: &RenderOptions, x0: usize, y0: usize) -> TileOutput {
    let tw = TILE_SIZE.min(view.width - x0);
    let th = TILE_SIZE.min(view.height - y0);
    let (fx0, fy0) = (x0 as f64, y0 as f64);
    let (fx1, fy1) = ((x0 + tw - 1) as f64, (y0 + th - 1) as f64);
    let local: Vec<&PlanarSplat> = splats
        .iter()
        .filter(|s| {
            s.mean_px.x + s.radius_px >= fx0
                && s.mean_px.x - s.radius_px <= fx1
                && s.mean_px.y + s.radius_px >= fy0
                && s.mean_px.y - s.radius_px <= fy1
        })
        .collect();

    let mut out = TileOutput {
        x0,
        y0,
        w: tw,
        h: th,
        depth: vec![None; tw * th],
        color: vec![opts.background; tw * th],
        contributors: vec![0; tw * th],
        invalid_denominators: 0,
    };
    let mut hits = Vec::with_capacity(local.len());
    for ty in 0..th {
        for tx in 0..tw {
            let px = shade_pixel(&local, view, opts, x0 + tx, y0 + ty, &mut hits);
            let i = ty * tw + tx;
            out.color[i] = px.color;
            out.contributors[i] = px.contributors;
            out.depth[i] = px.depth;
            if px.invalid_denominator {
                out.invalid_denominators += 1;
            }
        }
    }
    out
}

/// Render with default options; the depth map is the part of interest.
pub fn render_depth(set: &GaussianSet, view: &CameraView) -> RenderedFrame {
    render(set, view, &RenderOptions::default())
}

pub fn render_color(set: &GaussianSet, view: &CameraView) -> RgbImage {
    render(set, view, &RenderOptions::default()).color
}
