//! Desk-scale optimization loop with finite-difference gradients and
//! curvature-gated densification.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_geom::{CameraView, DepthMap};
use crate::depth_render::{footprint_box, plane_params_indexed, render, render_splats, shade_pixel, PlanarSplat, RenderOptions, TILE_SIZE};
use crate::error::{Error, Result};
use crate::index::NeighborIndex;
use crate::losses::{self, ssim_map_region, ssim_positions, ConfidenceMap, LossWeights, SSIM_WINDOW};
use crate::pointcloud::PointCloud;
use crate::raster::RgbImage;
use crate::splat_model::{
    gaussian_normal, logit, normal_alignment_loss, online_curvature, select_split_candidates_with, split_gaussian,
    split_threshold, GateMode, Gaussian, GaussianSet, Param, ParamGroup, SplitSchedule,
};

/// Step sizes per attribute group, applied in the unconstrained
/// parameterization (log scale, logit opacity). Zero freezes a group and
/// skips its gradient probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mean: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mean: 0.01,
            log_scale: 0.05,
            rotation: 0.01,
            opacity_logit: 0.5,
            color: 0.5,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Mean => self.mean,
            ParamGroup::Scale => self.log_scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Opacity => self.opacity_logit,
            ParamGroup::Color => self.color,
        }
    }

    pub fn zero() -> Self {
        LearningRates {
            mean: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity_logit: 0.0,
            color: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Threshold schedule; `schedule.total_iters` is the run length T.
    pub schedule: SplitSchedule,
    pub densify_interval: usize,
    pub learning_rates: LearningRates,
    pub fd_epsilon: f64,
    pub loss: LossWeights,
    pub curvature_gate_mode: GateMode,
    /// Neighborhood size for curvature over the current means.
    pub online_k: usize,
    pub curvature_epsilon: f64,
    /// Fraction of Gaussians flagged per step by mean-gradient norm.
    pub grad_flag_fraction: f64,
    pub max_gaussians: usize,
    pub prune_opacity: f64,
    pub render: RenderOptions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: SplitSchedule::default(),
            densify_interval: 100,
            learning_rates: LearningRates::default(),
            fd_epsilon: 1e-4,
            loss: LossWeights::default(),
            curvature_gate_mode: GateMode::And,
            online_k: 16,
            curvature_epsilon: 1e-12,
            grad_flag_fraction: 0.1,
            max_gaussians: 200_000,
            prune_opacity: 0.005,
            render: RenderOptions::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.learning_rates;
        let rates = [lr.mean, lr.log_scale, lr.rotation, lr.opacity_logit, lr.color];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.fd_epsilon.is_finite() && self.fd_epsilon > 0.0) {
            return Err(Error::Config(format!("fd_epsilon must be positive, got {}", self.fd_epsilon)));
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be at least 1".into()));
        }
        if !(self.grad_flag_fraction > 0.0 && self.grad_flag_fraction <= 1.0) {
            return Err(Error::Config("grad_flag_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(Error::Config("prune_opacity must lie in [0, 1)".into()));
        }
        if self.online_k < 2 {
            return Err(Error::Config("online_k must be at least 2".into()));
        }
        if self.max_gaussians == 0 {
            return Err(Error::Config("max_gaussians must be positive".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub set: GaussianSet,
    pub t: usize,
    pub schedule: SplitSchedule,
    pub seed: u64,
    /// OR-accumulated gradient flags since the last densification.
    pub grad_flags: Vec<bool>,
}

impl TrainState {
    pub fn new(set: GaussianSet, schedule: SplitSchedule, seed: u64) -> Result<Self> {
        set.validate()?;
        let n = set.len();
        Ok(TrainState {
            set,
            t: 0,
            schedule,
            seed,
            grad_flags: vec![false; n],
        })
    }
}

/// One supervision view: camera, target image and LiDAR depth, with the
/// confidence map precomputed from the image.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: CameraView,
    pub image: RgbImage,
    pub depth: DepthMap,
    /// `None` when the LiDAR map has no valid pixel.
    pub confidence: Option<ConfidenceMap>,
}

impl TrainView {
    pub fn new(camera: CameraView, image: RgbImage, depth: DepthMap) -> Result<Self> {
        let (w, h) = (camera.width, camera.height);
        if (image.width, image.height) != (w, h) || (depth.width, depth.height) != (w, h) {
            return Err(Error::LengthMismatch {
                what: "view image/depth vs camera resolution",
                left: image.width * image.height,
                right: w * h,
            });
        }
        let confidence = if depth.valid_count() > 0 {
            Some(losses::confidence_weights(&image, &depth.valid)?)
        } else {
            log::warn!("view {} has no LiDAR depth; depth term disabled for it", camera.name);
            None
        };
        Ok(TrainView {
            camera,
            image,
            depth,
            confidence,
        })
    }

    /// Replace the confidence map by uniform weights on the LiDAR-valid set.
    pub fn with_uniform_confidence(mut self) -> Self {
        if self.depth.valid_count() > 0 {
            self.confidence = Some(ConfidenceMap {
                width: self.depth.width,
                height: self.depth.height,
                weights: self.depth.valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
                valid: self.depth.valid.clone(),
            });
        }
        self
    }
}

/// Breakdown of the training objective on one view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb_l1: f64,
    pub ssim_loss: f64,
    pub depth: f64,
    pub normal: f64,
    pub total: f64,
}

/// Evaluate the weighted objective of `set` on `view`. Terms with zero
/// weight are not computed.
pub fn evaluate_view(set: &GaussianSet, view: &TrainView, cfg: &TrainConfig) -> Result<LossTerms> {
    let w = &cfg.loss;
    let frame = render(set, &view.camera, &cfg.render);
    let mut terms = LossTerms::default();
    if w.lambda_depth > 0.0 {
        if let Some(conf) = &view.confidence {
            terms.depth = losses::depth_loss(&view.depth, &frame.depth, conf)?;
        }
    }
    if w.lambda_rgb > 0.0 {
        terms.rgb_l1 = losses::l1_rgb(&frame.color, &view.image)?;
    }
    if w.lambda_ssim > 0.0 {
        terms.ssim_loss = losses::ssim_loss(&frame.color, &view.image)?;
    }
    if w.use_normal && w.lambda_normal > 0.0 && set.lidar_normals.is_some() {
        terms.normal = normal_alignment_loss(set)?;
    }
    terms.total = losses::total_loss_with_normal(terms.rgb_l1, terms.ssim_loss, terms.depth, terms.normal, w);
    Ok(terms)
}

/// Central-difference gradient and probe diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub grad: Vec<f64>,
    /// Selected attributes whose probes produced a non-finite loss.
    pub skipped: usize,
}

/// `(f(x+ε) − f(x−ε)) / 2ε` for each selected `(gaussian, param)`. Probes
/// run in parallel, each on a private copy of the set. A non-finite probe
/// yields gradient 0 and is counted in `skipped`.
pub fn finite_diff_grad<F>(loss: F, set: &GaussianSet, selector: &[(usize, Param)], eps: f64) -> Result<FdGradient>
where
    F: Fn(&GaussianSet) -> f64 + Sync,
{
    finite_diff_grad_with(
        |id, g| {
            let mut probe = set.clone();
            probe.gaussians[id] = g.clone();
            loss(&probe)
        },
        set,
        selector,
        eps,
    )
}

/// [`finite_diff_grad`] with a loss that takes the id of the perturbed
/// Gaussian and its perturbed value, leaving the rest of `set` implied.
pub fn finite_diff_grad_with<F>(
    probe_loss: F,
    set: &GaussianSet,
    selector: &[(usize, Param)],
    eps: f64,
) -> Result<FdGradient>
where
    F: Fn(usize, &Gaussian) -> f64 + Sync,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("finite-difference epsilon must be positive, got {eps}")));
    }
    if let Some((id, _)) = selector.iter().find(|(id, _)| *id >= set.len()) {
        return Err(Error::IdOutOfRange { id: *id, len: set.len() });
    }
    let probes: Vec<Option<f64>> = selector
        .par_iter()
        .map(|&(id, p)| {
            let base = &set.gaussians[id];
            let x = base.param(p);
            let mut g = base.clone();
            g.set_param(p, x + eps);
            let plus = probe_loss(id, &g);
            let mut g = base.clone();
            g.set_param(p, x - eps);
            let minus = probe_loss(id, &g);
            let grad = (plus - minus) / (2.0 * eps);
            grad.is_finite().then_some(grad)
        })
        .collect();
    let skipped = probes.iter().filter(|p| p.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} finite-difference probes produced a non-finite loss");
    }
    Ok(FdGradient {
        grad: probes.into_iter().map(|p| p.unwrap_or(0.0)).collect(),
        skipped,
    })
}

/// Objective of one view with cached per-pixel terms. Replacing a single
/// Gaussian only re-shades the pixels inside its old and new footprints,
/// which makes finite-difference probes cheap. Probe results agree with a
/// full [`evaluate_view`] up to summation order.
pub struct ViewLossCache<'a> {
    view: &'a TrainView,
    cfg: &'a TrainConfig,
    lidar_normals: Option<&'a [Vector3<f64>]>,
    splats: Vec<Option<PlanarSplat>>,
    bins: Vec<Vec<usize>>,
    tiles_x: usize,
    color: Vec<[f64; 3]>,
    depth: Vec<Option<f64>>,
    rgb_err: Vec<f64>,
    depth_err: Vec<Option<f64>>,
    rgb_sum: f64,
    depth_sum: f64,
    depth_count: usize,
    ssim_map: Vec<f64>,
    ssim_sum: f64,
    normal_terms: Vec<f64>,
    normal_sum: f64,
    rendered_valid: usize,
}

impl<'a> ViewLossCache<'a> {
    pub fn new(set: &'a GaussianSet, view: &'a TrainView, cfg: &'a TrainConfig) -> Result<Self> {
        let cam = &view.camera;
        let (w, h) = (cam.width, cam.height);
        if (view.image.width, view.image.height) != (w, h) {
            return Err(Error::LengthMismatch {
                what: "view image vs camera",
                left: view.image.width * view.image.height,
                right: w * h,
            });
        }
        let splats: Vec<Option<PlanarSplat>> = set
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| plane_params_indexed(g, i, cam))
            .collect();
        let tiles_x = w.div_ceil(TILE_SIZE);
        let tiles_y = h.div_ceil(TILE_SIZE);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for s in splats.iter().flatten() {
            if let Some((x0, y0, x1, y1)) = footprint_box(s, w, h) {
                for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                    for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                        bins[ty * tiles_x + tx].push(s.index);
                    }
                }
            }
        }
        let visible: Vec<PlanarSplat> = splats.iter().flatten().cloned().collect();
        let frame = render_splats(&visible, cam, &cfg.render);
        let mut cache = ViewLossCache {
            view,
            cfg,
            lidar_normals: set.lidar_normals.as_deref(),
            splats,
            bins,
            tiles_x,
            color: frame.color.data,
            depth: (0..w * h)
                .map(|i| frame.depth.valid[i].then_some(frame.depth.depth[i]))
                .collect(),
            rgb_err: Vec::new(),
            depth_err: Vec::new(),
            rgb_sum: 0.0,
            depth_sum: 0.0,
            depth_count: 0,
            ssim_map: Vec::new(),
            ssim_sum: 0.0,
            normal_terms: Vec::new(),
            normal_sum: 0.0,
            rendered_valid: frame.depth.valid_count(),
        };
        cache.rgb_err = (0..w * h).map(|i| cache.pixel_rgb_err(i, &cache.color[i])).collect();
        cache.depth_err = (0..w * h).map(|i| cache.pixel_depth_err(i, cache.depth[i])).collect();
        cache.rgb_sum = cache.rgb_err.iter().sum();
        cache.depth_sum = cache.depth_err.iter().flatten().sum();
        cache.depth_count = cache.depth_err.iter().flatten().count();
        if cfg.loss.lambda_ssim > 0.0 {
            if w < SSIM_WINDOW || h < SSIM_WINDOW {
                return Err(Error::ImageTooSmall(format!("SSIM needs at least {SSIM_WINDOW} pixels per side")));
            }
            let (ow, oh) = ssim_positions(w, h);
            let color = &cache.color;
            cache.ssim_map = ssim_map_region(|x, y| color[y * w + x], &view.image, 0, 0, ow - 1, oh - 1);
            cache.ssim_sum = cache.ssim_map.iter().sum();
        }
        if cache.normal_enabled() {
            let lidar = cache.lidar_normals.unwrap_or_default();
            if lidar.len() != set.len() {
                return Err(Error::LengthMismatch {
                    what: "lidar normals vs gaussians",
                    left: lidar.len(),
                    right: set.len(),
                });
            }
            cache.normal_terms = set.gaussians.iter().zip(lidar).map(|(g, n)| normal_term(g, n)).collect();
            cache.normal_sum = cache.normal_terms.iter().sum();
        }
        Ok(cache)
    }

    fn normal_enabled(&self) -> bool {
        let w = &self.cfg.loss;
        w.use_normal && w.lambda_normal > 0.0 && self.lidar_normals.is_some()
    }

    fn pixel_rgb_err(&self, i: usize, c: &[f64; 3]) -> f64 {
        let t = &self.view.image.data[i];
        (c[0] - t[0]).abs() + (c[1] - t[1]).abs() + (c[2] - t[2]).abs()
    }

    fn pixel_depth_err(&self, i: usize, d: Option<f64>) -> Option<f64> {
        let conf = self.view.confidence.as_ref()?;
        let lidar = &self.view.depth;
        match d {
            Some(d) if lidar.valid[i] => Some(conf.weights[i] * (lidar.depth[i] - d).abs()),
            _ => None,
        }
    }

    /// Pixels with a rendered depth.
    pub fn rendered_valid(&self) -> usize {
        self.rendered_valid
    }

    fn terms_from(&self, rgb_sum: f64, depth_sum: f64, depth_count: usize, ssim_sum: f64, normal_sum: f64) -> LossTerms {
        let w = &self.cfg.loss;
        let npix = self.color.len();
        let mut t = LossTerms::default();
        if w.lambda_depth > 0.0 && depth_count > 0 {
            t.depth = depth_sum / depth_count as f64;
        }
        if w.lambda_rgb > 0.0 {
            t.rgb_l1 = rgb_sum / (3 * npix).max(1) as f64;
        }
        if w.lambda_ssim > 0.0 {
            t.ssim_loss = 1.0 - ssim_sum / (3 * self.ssim_map.len()) as f64;
        }
        if self.normal_enabled() && !self.normal_terms.is_empty() {
            t.normal = normal_sum / self.normal_terms.len() as f64;
        }
        t.total = losses::total_loss_with_normal(t.rgb_l1, t.ssim_loss, t.depth, t.normal, w);
        t
    }

    /// Loss terms of the cached set.
    pub fn terms(&self) -> LossTerms {
        self.terms_from(self.rgb_sum, self.depth_sum, self.depth_count, self.ssim_sum, self.normal_sum)
    }

    /// Total loss with Gaussian `id` replaced by `g`.
    pub fn probe(&self, id: usize, g: &Gaussian) -> f64 {
        let cam = &self.view.camera;
        let (w, h) = (cam.width, cam.height);
        let new = plane_params_indexed(g, id, cam);
        let old_box = self.splats[id].as_ref().and_then(|s| footprint_box(s, w, h));
        let new_box = new.as_ref().and_then(|s| footprint_box(s, w, h));
        let region = match (old_box, new_box) {
            (None, None) => None,
            (Some(b), None) | (None, Some(b)) => Some(b),
            (Some(a), Some(b)) => Some((a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3))),
        };

        let mut normal_sum = self.normal_sum;
        if self.normal_enabled() {
            let n = &self.lidar_normals.unwrap_or_default()[id];
            normal_sum = normal_sum - self.normal_terms[id] + normal_term(g, n);
        }
        let Some((rx0, ry0, rx1, ry1)) = region else {
            return self
                .terms_from(self.rgb_sum, self.depth_sum, self.depth_count, self.ssim_sum, normal_sum)
                .total;
        };

        let mut ids: Vec<usize> = Vec::new();
        for ty in ry0 / TILE_SIZE..=ry1 / TILE_SIZE {
            for tx in rx0 / TILE_SIZE..=rx1 / TILE_SIZE {
                ids.extend(self.bins[ty * self.tiles_x + tx].iter().copied().filter(|&j| j != id));
            }
        }
        ids.sort_unstable();
        ids.dedup();
        let mut candidates: Vec<&PlanarSplat> = ids.iter().filter_map(|&j| self.splats[j].as_ref()).collect();
        if let Some(s) = &new {
            candidates.push(s);
        }

        let rw = rx1 - rx0 + 1;
        let mut patch = Vec::with_capacity(rw * (ry1 - ry0 + 1));
        let (mut rgb_sum, mut depth_sum, mut depth_count) = (self.rgb_sum, self.depth_sum, self.depth_count as isize);
        let mut hits = Vec::with_capacity(candidates.len());
        for y in ry0..=ry1 {
            for x in rx0..=rx1 {
                let i = y * w + x;
                let px = shade_pixel(&candidates, cam, &self.cfg.render, x, y, &mut hits);
                rgb_sum += self.pixel_rgb_err(i, &px.color) - self.rgb_err[i];
                if let Some(e) = self.depth_err[i] {
                    depth_sum -= e;
                    depth_count -= 1;
                }
                if let Some(e) = self.pixel_depth_err(i, px.depth) {
                    depth_sum += e;
                    depth_count += 1;
                }
                patch.push(px.color);
            }
        }

        let mut ssim_sum = self.ssim_sum;
        if !self.ssim_map.is_empty() {
            let (ow, oh) = ssim_positions(w, h);
            let (ox0, oy0) = (rx0.saturating_sub(SSIM_WINDOW - 1), ry0.saturating_sub(SSIM_WINDOW - 1));
            let (ox1, oy1) = (rx1.min(ow - 1), ry1.min(oh - 1));
            let color = &self.color;
            let fresh = ssim_map_region(
                |x, y| {
                    if (rx0..=rx1).contains(&x) && (ry0..=ry1).contains(&y) {
                        patch[(y - ry0) * rw + (x - rx0)]
                    } else {
                        color[y * w + x]
                    }
                },
                &self.view.image,
                ox0,
                oy0,
                ox1,
                oy1,
            );
            let aw = ox1 - ox0 + 1;
            for oy in oy0..=oy1 {
                for ox in ox0..=ox1 {
                    ssim_sum += fresh[(oy - oy0) * aw + (ox - ox0)] - self.ssim_map[oy * ow + ox];
                }
            }
        }
        self.terms_from(rgb_sum, depth_sum, depth_count.max(0) as usize, ssim_sum, normal_sum)
            .total
    }
}

fn normal_term(g: &Gaussian, lidar: &Vector3<f64>) -> f64 {
    1.0 - gaussian_normal(g).dot(lidar).abs().min(1.0)
}

/// Diagnostics of one [`train_step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Iteration index before the step.
    pub iteration: usize,
    pub view: usize,
    /// Objective on the sampled view before the update.
    pub loss: LossTerms,
    pub skipped_probes: usize,
    pub flagged: usize,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_LOGIT: f64 = 20.0;

fn apply_update(g: &mut Gaussian, updates: &[(Param, f64)]) {
    let q = g.rotation.quaternion();
    let mut rot = [q.w, q.i, q.j, q.k];
    let mut rot_changed = false;
    for &(p, v) in updates {
        match p {
            Param::Rotation(c) => {
                rot[c as usize] = v;
                rot_changed = true;
            }
            Param::OpacityLogit => g.set_param(p, v.clamp(-MAX_LOGIT, MAX_LOGIT)),
            Param::Color(c) => g.color[c as usize] = v.clamp(0.0, 1.0),
            _ => g.set_param(p, v),
        }
    }
    if rot_changed {
        let raw = Quaternion::new(rot[0], rot[1], rot[2], rot[3]);
        if raw.norm() > 0.0 && raw.coords.iter().all(|c| c.is_finite()) {
            g.rotation = UnitQuaternion::from_quaternion(raw);
        }
    }
}

fn flag_top_fraction(norms: &[f64], fraction: f64) -> Vec<bool> {
    let n = norms.len();
    let count = ((n as f64) * fraction).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut flags = vec![false; n];
    for &i in order.iter().take(count) {
        if norms[i] > 0.0 {
            flags[i] = true;
        }
    }
    flags
}

/// One gradient-descent step on a view drawn from `views`.
///
/// Gradients of every parameter group with a positive learning rate come
/// from [`finite_diff_grad`]; mean gradients are always probed because they
/// drive the split flags.
pub fn train_step(state: &mut TrainState, views: &[TrainView], cfg: &TrainConfig) -> Result<StepReport> {
    if views.is_empty() {
        return Err(Error::Config("training needs at least one view".into()));
    }
    if state.grad_flags.len() != state.set.len() {
        return Err(Error::LengthMismatch {
            what: "grad flags vs gaussians",
            left: state.grad_flags.len(),
            right: state.set.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(state.seed, state.t as u64, 1));
    let view_id = rng.random_range(0..views.len());
    let view = &views[view_id];

    let cache = ViewLossCache::new(&state.set, view, cfg)?;
    if cache.rendered_valid() == 0 {
        let any = views
            .iter()
            .any(|v| render(&state.set, &v.camera, &cfg.render).depth.valid_count() > 0);
        if !any {
            return Err(Error::StepAborted(format!(
                "iteration {}: no view has a rendered pixel",
                state.t
            )));
        }
    }
    let base = cache.terms();

    let lr = &cfg.learning_rates;
    let selector: Vec<(usize, Param)> = (0..state.set.len())
        .flat_map(|i| {
            Param::ALL
                .iter()
                .filter(|p| p.group() == ParamGroup::Mean || lr.for_group(p.group()) > 0.0)
                .map(move |&p| (i, p))
        })
        .collect();
    let fd = finite_diff_grad_with(|id, g| cache.probe(id, g), &state.set, &selector, cfg.fd_epsilon)?;
    drop(cache);

    let n = state.set.len();
    let mut mean_norm2 = vec![0.0; n];
    let mut updates: Vec<Vec<(Param, f64)>> = vec![Vec::new(); n];
    for (&(i, p), &g) in selector.iter().zip(&fd.grad) {
        if p.group() == ParamGroup::Mean {
            mean_norm2[i] += g * g;
        }
        let rate = lr.for_group(p.group());
        if rate > 0.0 && g != 0.0 {
            let x = state.set.gaussians[i].param(p);
            updates[i].push((p, x - rate * g));
        }
    }
    for (g, u) in state.set.gaussians.iter_mut().zip(&updates) {
        apply_update(g, u);
    }

    let norms: Vec<f64> = mean_norm2.iter().map(|v| v.sqrt()).collect();
    let flags = flag_top_fraction(&norms, cfg.grad_flag_fraction);
    let flagged = flags.iter().filter(|f| **f).count();
    for (acc, f) in state.grad_flags.iter_mut().zip(flags) {
        *acc |= f;
    }
    let report = StepReport {
        iteration: state.t,
        view: view_id,
        loss: base,
        skipped_probes: fd.skipped,
        flagged,
    };
    state.t += 1;
    Ok(report)
}

/// Outcome of one [`densify`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub iteration: usize,
    pub threshold: f64,
    /// Curvature of each Gaussian before splitting.
    pub curvatures: Vec<f64>,
    /// Pre-split ids of the Gaussians that were split.
    pub split_ids: Vec<usize>,
    /// Candidates that were not split because of the size cap.
    pub suppressed: usize,
    pub pruned: usize,
}

/// Curvatures and split candidates for the current state under `mode`,
/// without modifying it.
pub fn densify_candidates(state: &TrainState, cfg: &TrainConfig, mode: GateMode) -> Result<(Vec<f64>, Vec<usize>)> {
    let curv = if state.set.len() > cfg.online_k {
        online_curvature(&state.set, cfg.online_k, cfg.curvature_epsilon)?
    } else {
        log::warn!(
            "only {} gaussians for online curvature with k = {}; using zero curvature",
            state.set.len(),
            cfg.online_k
        );
        vec![0.0; state.set.len()]
    };
    let ids = select_split_candidates_with(&curv, &state.grad_flags, state.t, &state.schedule, mode)?;
    Ok((curv, ids))
}

/// Split the gated candidates, prune transparent Gaussians and reset the
/// gradient flags.
pub fn densify(state: &mut TrainState, cfg: &TrainConfig) -> Result<DensifyReport> {
    if state.t % cfg.densify_interval != 0 {
        return Err(Error::Config(format!(
            "densify called at iteration {} which is not a multiple of {}",
            state.t, cfg.densify_interval
        )));
    }
    let (curvatures, candidates) = densify_candidates(state, cfg, cfg.curvature_gate_mode)?;
    let n = state.set.len();
    let mut split_ids = candidates;
    let mut suppressed = 0;
    if n + split_ids.len() > cfg.max_gaussians {
        log::warn!(
            "splitting {} gaussians would exceed the cap of {}; splitting suppressed",
            split_ids.len(),
            cfg.max_gaussians
        );
        suppressed = split_ids.len();
        split_ids.clear();
    }

    let mut is_split = vec![false; n];
    for &i in &split_ids {
        is_split[i] = true;
    }
    let old_normals = state.set.lidar_normals.take();
    let mut gaussians = Vec::with_capacity(n + split_ids.len());
    let mut normals = old_normals.as_ref().map(|_| Vec::with_capacity(n + split_ids.len()));
    for (i, g) in state.set.gaussians.iter().enumerate() {
        let copies: Vec<Gaussian> = if is_split[i] {
            split_gaussian(g, mix(state.seed, state.t as u64, i as u64 + 2)).into()
        } else {
            vec![g.clone()]
        };
        for c in copies {
            if let (Some(out), Some(src)) = (normals.as_mut(), old_normals.as_ref()) {
                out.push(src[i]);
            }
            gaussians.push(c);
        }
    }

    let keep: Vec<bool> = gaussians.iter().map(|g| g.opacity >= cfg.prune_opacity).collect();
    let pruned = keep.iter().filter(|k| !**k).count();
    let gaussians: Vec<Gaussian> = gaussians.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(g, _)| g).collect();
    let normals = normals.map(|v| v.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(n, _)| n).collect());
    state.set = GaussianSet {
        gaussians,
        lidar_normals: normals,
    };
    state.grad_flags = vec![false; state.set.len()];
    Ok(DensifyReport {
        iteration: state.t,
        threshold: split_threshold(state.t, &state.schedule),
        curvatures,
        split_ids,
        suppressed,
        pruned,
    })
}

/// Run up to `steps` iterations of [`train_step`], stopping early at
/// `schedule.total_iters`. Densifies whenever the iteration count reaches a
/// multiple of `densify_interval` before the end of the schedule.
pub fn train<F>(
    state: &mut TrainState,
    views: &[TrainView],
    cfg: &TrainConfig,
    steps: usize,
    mut on_step: F,
) -> Result<Vec<DensifyReport>>
where
    F: FnMut(&TrainState, &StepReport),
{
    cfg.validate()?;
    let end = state.schedule.total_iters.min(state.t.saturating_add(steps));
    let mut reports = Vec::new();
    while state.t < end {
        let step = train_step(state, views, cfg)?;
        on_step(state, &step);
        if state.t % cfg.densify_interval == 0 && state.t < state.schedule.total_iters {
            reports.push(densify(state, cfg)?);
        }
    }
    Ok(reports)
}

/// Initialization of Gaussians from a point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Neighbors used for the isotropic scale estimate.
    pub scale_neighbors: usize,
    pub opacity: f64,
    /// Thickness along the normal as a fraction of the in-plane scale,
    /// used when the cloud carries normals.
    pub flatness: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            scale_neighbors: 3,
            opacity: 0.5,
            flatness: 0.1,
        }
    }
}

/// One Gaussian per point. The in-plane scale is the mean distance to the
/// nearest neighbors; when the cloud has normals the Gaussian is flattened
/// along the normal and the normal is kept as its LiDAR association.
pub fn gaussians_from_cloud(cloud: &PointCloud, cfg: &InitConfig) -> Result<GaussianSet> {
    if cloud.len() < cfg.scale_neighbors + 1 {
        return Err(Error::TooFewPoints(cloud.len()));
    }
    if !(cfg.opacity > 0.0 && cfg.opacity < 1.0) || !(cfg.flatness > 0.0) {
        return Err(Error::Config("init opacity must lie in (0, 1) and flatness be positive".into()));
    }
    let index = NeighborIndex::build(cloud)?;
    let pos = cloud.positions();
    let mut gaussians = Vec::with_capacity(cloud.len());
    for (i, p) in pos.iter().enumerate() {
        let ids = index.knn(i, cfg.scale_neighbors)?;
        let mean_d = ids.iter().map(|&j| (pos[j] - p).norm()).sum::<f64>() / ids.len() as f64;
        let s = mean_d.max(1e-6);
        let color = cloud.colors().map(|c| c[i]).unwrap_or(Vector3::repeat(0.5));
        let (rotation, scale) = match cloud.normals() {
            Some(n) => (
                UnitQuaternion::rotation_between(&Vector3::z(), &n[i])
                    .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)),
                Vector3::new(s, s, s * cfg.flatness),
            ),
            None => (UnitQuaternion::identity(), Vector3::repeat(s)),
        };
        gaussians.push(Gaussian::new(*p, rotation, scale, cfg.opacity, color)?);
    }
    let mut set = GaussianSet::new(gaussians);
    if let Some(n) = cloud.normals() {
        set.lidar_normals = Some(n.to_vec());
    }
    debug_assert!(logit(cfg.opacity).is_finite());
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera_geom::lidar_depth_map;
    use crate::camera_geom::DepthProjectionConfig;

    fn flat(x: f64, y: f64, z: f64, s: f64) -> Gaussian {
        Gaussian::new(
            Vector3::new(x, y, z),
            UnitQuaternion::identity(),
            Vector3::new(s, s, s * 0.05),
            0.9,
            Vector3::repeat(0.5),
        )
        .unwrap()
    }

    fn plane_view(z: f64) -> TrainView {
        let cam = CameraView::look_at("c", Vector3::zeros(), Vector3::z(), -Vector3::y(), 24.0, 24, 24).unwrap();
        let mut pts = Vec::new();
        for i in 0..60 {
            for j in 0..60 {
                pts.push(Vector3::new(-1.5 + i as f64 * 0.05, -1.5 + j as f64 * 0.05, z));
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let depth = lidar_depth_map(&cam, &cloud, &DepthProjectionConfig::default());
        TrainView::new(cam.clone(), RgbImage::filled(24, 24, [0.5; 3]), depth)
            .unwrap()
            .with_uniform_confidence()
    }

    fn plane_set(z: f64) -> GaussianSet {
        let mut g = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                g.push(flat(-0.8 + 0.8 * i as f64, -0.8 + 0.8 * j as f64, z, 0.5));
            }
        }
        GaussianSet::new(g)
    }

    fn depth_cfg(lr_mean: f64) -> TrainConfig {
        TrainConfig {
            learning_rates: LearningRates {
                mean: lr_mean,
                ..LearningRates::zero()
            },
            loss: LossWeights::depth_only(),
            ..Default::default()
        }
    }

    #[test]
    fn fd_on_quadratic() {
        let set = GaussianSet::new(vec![flat(1.0, 0.0, 0.0, 0.1)]);
        let f = |s: &GaussianSet| (s.gaussians[0].mean.x - 3.0).powi(2);
        let g = finite_diff_grad(f, &set, &[(0, Param::Mean(0)), (0, Param::OpacityLogit)], 1e-4).unwrap();
        assert!((g.grad[0] + 4.0).abs() < 1e-6);
        assert_eq!(g.grad[1], 0.0);
        assert_eq!(g.skipped, 0);
    }

    #[test]
    fn fd_counts_nonfinite_probes() {
        let set = GaussianSet::new(vec![flat(1.0, 0.0, 0.0, 0.1)]);
        let f = |s: &GaussianSet| if s.gaussians[0].mean.y > 0.0 { f64::NAN } else { 1.0 };
        let g = finite_diff_grad(f, &set, &[(0, Param::Mean(1)), (0, Param::Mean(0))], 1e-3).unwrap();
        assert_eq!(g.grad, vec![0.0, 0.0]);
        assert_eq!(g.skipped, 1);
        assert!(finite_diff_grad(f, &set, &[(1, Param::Mean(0))], 1e-3).is_err());
        assert!(finite_diff_grad(f, &set, &[], 0.0).is_err());
    }

    #[test]
    fn depth_gradient_pushes_toward_lidar() {
        let view = plane_view(2.0);
        let set = plane_set(2.5);
        let cfg = depth_cfg(0.1);
        let f = |s: &GaussianSet| evaluate_view(s, &view, &cfg).unwrap().total;
        let sel: Vec<_> = (0..set.len()).map(|i| (i, Param::Mean(2))).collect();
        let g = finite_diff_grad(f, &set, &sel, 1e-4).unwrap();
        // Increasing z moves away from the LiDAR surface, raising the loss.
        assert!(g.grad.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn zero_learning_rates_only_advance_t() {
        let views = vec![plane_view(2.0)];
        let mut state = TrainState::new(plane_set(2.5), SplitSchedule::default(), 3).unwrap();
        let before = state.set.clone();
        let cfg = TrainConfig {
            learning_rates: LearningRates::zero(),
            ..depth_cfg(0.0)
        };
        train_step(&mut state, &views, &cfg).unwrap();
        assert_eq!(state.set, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn depth_descent_is_monotone_and_deterministic() {
        let views = vec![plane_view(2.0)];
        let cfg = depth_cfg(0.3);
        let run = || {
            let mut state = TrainState::new(plane_set(2.5), SplitSchedule::default(), 7).unwrap();
            let mut losses = Vec::new();
            for _ in 0..10 {
                losses.push(train_step(&mut state, &views, &cfg).unwrap().loss.total);
            }
            (state, losses)
        };
        let (s1, l1) = run();
        let (s2, l2) = run();
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
        for w in l1.windows(2) {
            assert!(w[1] <= w[0], "{l1:?}");
        }
        assert!(l1[9] < l1[0]);
    }

    #[test]
    fn aborts_without_rendered_pixels() {
        let views = vec![plane_view(2.0)];
        // Everything behind the camera.
        let set = GaussianSet::new(vec![flat(0.0, 0.0, -3.0, 0.5)]);
        let mut state = TrainState::new(set, SplitSchedule::default(), 0).unwrap();
        assert!(matches!(
            train_step(&mut state, &views, &depth_cfg(0.1)),
            Err(Error::StepAborted(_))
        ));
    }

    #[test]
    fn planar_scene_never_splits_under_and() {
        let mut g = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                g.push(flat(i as f64 * 0.1, j as f64 * 0.1, 1.0, 0.05));
            }
        }
        let mut state = TrainState::new(GaussianSet::new(g), SplitSchedule::default(), 0).unwrap();
        state.grad_flags = vec![true; 36];
        let cfg = TrainConfig {
            online_k: 8,
            ..Default::default()
        };
        let r = densify(&mut state, &cfg).unwrap();
        assert!(r.split_ids.is_empty());
        assert_eq!(state.set.len(), 36);
        assert!(state.grad_flags.iter().all(|f| !f));

        state.grad_flags = vec![true; 36];
        let off = TrainConfig {
            curvature_gate_mode: GateMode::Off,
            ..cfg.clone()
        };
        let r = densify(&mut state, &off).unwrap();
        assert_eq!(r.split_ids.len(), 36);
        assert_eq!(state.set.len(), 72);
    }

    #[test]
    fn cap_suppresses_and_prune_removes() {
        let mut g: Vec<Gaussian> = (0..10).map(|i| flat(i as f64, 0.0, 0.0, 0.1)).collect();
        g[3].opacity = 0.001;
        let mut set = GaussianSet::new(g);
        set.lidar_normals = Some(vec![Vector3::z(); 10]);
        let mut state = TrainState::new(set, SplitSchedule::default(), 0).unwrap();
        state.grad_flags = vec![true; 10];
        let cfg = TrainConfig {
            curvature_gate_mode: GateMode::Off,
            max_gaussians: 12,
            online_k: 4,
            ..Default::default()
        };
        let r = densify(&mut state, &cfg).unwrap();
        assert_eq!(r.suppressed, 10);
        assert_eq!(r.pruned, 1);
        assert_eq!(state.set.len(), 9);
        assert_eq!(state.set.lidar_normals.as_ref().unwrap().len(), 9);
        state.t = 7;
        assert!(densify(&mut state, &cfg).is_err());
    }

    #[test]
    fn children_inherit_normals() {
        let g: Vec<Gaussian> = (0..5).map(|i| flat(i as f64, 0.0, 0.0, 0.1)).collect();
        let mut set = GaussianSet::new(g);
        set.lidar_normals = Some((0..5).map(|i| Vector3::new(i as f64, 1.0, 0.0).normalize()).collect());
        let mut state = TrainState::new(set.clone(), SplitSchedule::default(), 0).unwrap();
        state.grad_flags = vec![false, true, false, false, false];
        let cfg = TrainConfig {
            curvature_gate_mode: GateMode::Off,
            online_k: 2,
            ..Default::default()
        };
        densify(&mut state, &cfg).unwrap();
        let n = state.set.lidar_normals.unwrap();
        assert_eq!(n.len(), 6);
        assert_eq!(n[1], n[2]);
        assert_eq!(n[1], set.lidar_normals.as_ref().unwrap()[1]);
    }

    #[test]
    fn init_aligns_with_normals() {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Vector3::new(i as f64 * 0.1, 0.0, j as f64 * 0.1));
            }
        }
        let cloud = PointCloud::new(pts).unwrap().with_normals(vec![Vector3::y(); 25]).unwrap();
        let set = gaussians_from_cloud(&cloud, &InitConfig::default()).unwrap();
        for g in &set.gaussians {
            assert!((gaussian_normal(g).dot(&Vector3::y()) - 1.0).abs() < 1e-12);
        }
        assert!(set.lidar_normals.is_some());
    }

    #[test]
    fn cached_probe_matches_full_evaluation() {
        use rand::Rng;
        let cam = CameraView::look_at("c", Vector3::new(0.3, -0.2, -3.0), Vector3::zeros(), Vector3::y(), 30.0, 28, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut image = RgbImage::new(28, 24);
        for p in image.data.iter_mut() {
            *p = [rng.random(), rng.random(), rng.random()];
        }
        let mut depth = DepthMap::invalid(28, 24);
        for i in 0..depth.depth.len() {
            if rng.random::<f64>() < 0.7 {
                depth.depth[i] = 2.5 + rng.random::<f64>();
                depth.valid[i] = true;
            }
        }
        let view = TrainView::new(cam, image, depth).unwrap();
        let gaussians: Vec<Gaussian> = (0..25)
            .map(|_| {
                Gaussian::new(
                    Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3)),
                    UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random()),
                    Vector3::new(rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), 0.01),
                    rng.random_range(0.2..0.95),
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                )
                .unwrap()
            })
            .collect();
        let mut set = GaussianSet::new(gaussians);
        set.lidar_normals = Some((0..25).map(|i| Vector3::new(1.0, i as f64, 2.0).normalize()).collect());
        let cfg = TrainConfig {
            loss: LossWeights {
                use_normal: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let cache = ViewLossCache::new(&set, &view, &cfg).unwrap();
        let full = evaluate_view(&set, &view, &cfg).unwrap();
        assert!((cache.terms().total - full.total).abs() < 1e-12);
        for id in [0, 7, 24] {
            for p in Param::ALL {
                let mut g = set.gaussians[id].clone();
                g.set_param(p, g.param(p) + 0.05);
                let mut moved = set.clone();
                moved.gaussians[id] = g.clone();
                let expect = evaluate_view(&moved, &view, &cfg).unwrap().total;
                assert!((cache.probe(id, &g) - expect).abs() < 1e-12, "{id} {p:?}");
            }
        }
    }

    #[test]
    fn flags_top_fraction() {
        let f = flag_top_fraction(&[0.1, 0.5, 0.0, 0.5, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.1);
        assert_eq!(f.iter().filter(|x| **x).count(), 2);
        assert!(f[1] && f[3]);
        assert!(flag_top_fraction(&[0.0; 4], 0.5).iter().all(|x| !x));
    }
}
