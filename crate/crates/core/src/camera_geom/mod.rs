//! Pinhole cameras and metric depth maps projected from LiDAR points.
//!
//! Pixel `(x, y)` of an image has its center at image coordinate `(x, y)`,
//! so the ray through it is `K⁻¹ (x, y, 1)ᵀ`. Depth is camera-frame `z`,
//! not distance along the ray.

pub mod io;

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::{self, RgbImage};

/// Depth value stored at invalid pixels.
pub const INVALID_DEPTH: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
}

impl CameraView {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let v = CameraView {
            name: name.into(),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidCamera(format!("{}: {m}", self.name)));
        if self.width == 0 || self.height == 0 {
            return err("zero-sized image".into());
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return err(format!("focal lengths must be positive ({}, {})", self.fx, self.fy));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return err(format!("principal point ({}, {}) outside the image", self.cx, self.cy));
        }
        let r = &self.rotation;
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return err("rotation is not a proper orthonormal matrix".into());
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return err("translation is not finite".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ (u, v, 1)ᵀ`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// A view looking from `eye` toward `target`, with image `y` pointing
    /// along `-up` projected onto the image plane.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        name: impl Into<String>,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector is parallel to viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        CameraView::new(
            name,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { pixel: Vector2<f64>, depth: f64 },
    BehindCamera,
}

pub fn project_point(view: &CameraView, xyz_world: &Vector3<f64>) -> Projection {
    let p = view.world_to_camera(xyz_world);
    if p.z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::Visible {
        pixel: Vector2::new(view.fx * p.x / p.z + view.cx, view.fy * p.y / p.z + view.cy),
        depth: p.z,
    }
}

/// Per-pixel metric depth with a validity mask. Invalid pixels hold
/// [`INVALID_DEPTH`].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![INVALID_DEPTH; width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn coverage(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len().max(1) as f64
    }

    pub fn write(&self, depth_path: &Path, mask_path: &Path) -> Result<()> {
        raster::write_pfm(depth_path, self.width, self.height, 1, &self.depth)?;
        raster::write_png_mask(mask_path, self.width, self.height, &self.valid)
    }

    pub fn read(depth_path: &Path, mask_path: &Path) -> Result<Self> {
        let (w, h, c, data) = raster::read_pfm(depth_path)?;
        if c != 1 {
            return Err(Error::Pfm(format!("{}: expected 1 channel", depth_path.display())));
        }
        let (mw, mh, valid) = raster::read_png_mask(mask_path)?;
        if (mw, mh) != (w, h) {
            return Err(Error::Image {
                path: mask_path.to_path_buf(),
                message: format!("mask is {mw}x{mh}, depth is {w}x{h}"),
            });
        }
        let depth = data
            .iter()
            .zip(&valid)
            .map(|(&d, &v)| if v { d } else { INVALID_DEPTH })
            .collect();
        Ok(DepthMap {
            width: w,
            height: h,
            depth,
            valid,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthProjectionConfig {
    /// Radius of the pixel disk each projected point covers.
    pub splat_radius_px: usize,
    /// A point deeper than the nearest surface at its own pixel by more
    /// than this (meters) is treated as occluded.
    pub z_tolerance: f64,
}

impl Default for DepthProjectionConfig {
    fn default() -> Self {
        DepthProjectionConfig {
            splat_radius_px: 1,
            z_tolerance: 0.05,
        }
    }
}

struct Projected {
    id: usize,
    px: usize,
    py: usize,
    depth: f64,
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn project_all(view: &CameraView, cloud: &PointCloud) -> Vec<Projected> {
    cloud
        .positions()
        .iter()
        .enumerate()
        .filter_map(|(id, p)| match project_point(view, p) {
            Projection::Visible { pixel, depth } => {
                let (u, v) = (pixel.x.round(), pixel.y.round());
                (u >= 0.0 && v >= 0.0 && u < view.width as f64 && v < view.height as f64).then_some(Projected {
                    id,
                    px: u as usize,
                    py: v as usize,
                    depth,
                })
            }
            Projection::BehindCamera => None,
        })
        .collect()
}

fn splat_min(
    view: &CameraView,
    points: &[&Projected],
    offsets: &[(isize, isize)],
) -> (Vec<f64>, Vec<usize>) {
    let mut zbuf = vec![f64::INFINITY; view.pixel_count()];
    let mut owner = vec![usize::MAX; view.pixel_count()];
    for p in points {
        for &(dx, dy) in offsets {
            let x = p.px as isize + dx;
            let y = p.py as isize + dy;
            if x < 0 || y < 0 || x >= view.width as isize || y >= view.height as isize {
                continue;
            }
            let i = y as usize * view.width + x as usize;
            if p.depth < zbuf[i] {
                zbuf[i] = p.depth;
                owner[i] = p.id;
            }
        }
    }
    (zbuf, owner)
}

/// Project `cloud` into `view` with z-buffering and occlusion filtering.
///
/// Each point covers the pixel disk of radius `splat_radius_px` around its
/// rounded projection. A first pass records the nearest depth over all
/// disks; a point whose depth exceeds that value at its own pixel by more
/// than `z_tolerance` is discarded. Surviving points are splatted again and
/// the nearest depth per pixel wins. Returns the depth map and, when the
/// cloud has colors, the color of the winning point per pixel.
pub fn project_cloud(
    view: &CameraView,
    cloud: &PointCloud,
    cfg: &DepthProjectionConfig,
) -> (DepthMap, Option<RgbImage>) {
    let projected = project_all(view, cloud);
    let offsets = disk_offsets(cfg.splat_radius_px);
    let all: Vec<&Projected> = projected.iter().collect();
    let (occ, _) = splat_min(view, &all, &offsets);
    let survivors: Vec<&Projected> = projected
        .iter()
        .filter(|p| p.depth <= occ[p.py * view.width + p.px] + cfg.z_tolerance)
        .collect();
    let (zbuf, owner) = splat_min(view, &survivors, &offsets);

    let mut map = DepthMap::invalid(view.width, view.height);
    for i in 0..zbuf.len() {
        if zbuf[i].is_finite() {
            map.depth[i] = zbuf[i];
            map.valid[i] = true;
        }
    }
    let color = cloud.colors().map(|colors| {
        let mut img = RgbImage::new(view.width, view.height);
        for (i, &o) in owner.iter().enumerate() {
            if o != usize::MAX {
                let c = colors[o];
                img.data[i] = [c.x, c.y, c.z];
            }
        }
        img
    });
    (map, color)
}

/// Metric LiDAR depth for one view; see [`project_cloud`].
pub fn lidar_depth_map(view: &CameraView, cloud: &PointCloud, cfg: &DepthProjectionConfig) -> DepthMap {
    project_cloud(view, cloud, cfg).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraView {
        CameraView::new("c", 64.0, 64.0, 32.0, 32.0, 64, 64, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let c = cam();
        assert_eq!(
            project_point(&c, &Vector3::new(0.0, 0.0, 2.0)),
            Projection::Visible {
                pixel: Vector2::new(32.0, 32.0),
                depth: 2.0
            }
        );
        assert_eq!(
            project_point(&c, &Vector3::new(1.0, 0.0, 2.0)),
            Projection::Visible {
                pixel: Vector2::new(64.0, 32.0),
                depth: 2.0
            }
        );
        assert_eq!(project_point(&c, &Vector3::new(0.0, 0.0, -1.0)), Projection::BehindCamera);
    }

    #[test]
    fn camera_validation() {
        let bad_pp = CameraView::new("c", 64.0, 64.0, 70.0, 32.0, 64, 64, Matrix3::identity(), Vector3::zeros());
        assert!(bad_pp.is_err());
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(CameraView::new("c", 64.0, 64.0, 32.0, 32.0, 64, 64, r, Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let v = CameraView::look_at("v", Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 50.0, 40, 30).unwrap();
        match project_point(&v, &Vector3::zeros()) {
            Projection::Visible { pixel, depth } => {
                assert!((pixel - Vector2::new(20.0, 15.0)).norm() < 1e-12);
                assert!((depth - 3.0).abs() < 1e-12);
            }
            _ => panic!("target not visible"),
        }
        // World up lands toward smaller image y.
        match project_point(&v, &Vector3::new(0.0, 1.0, 0.0)) {
            Projection::Visible { pixel, .. } => assert!(pixel.y < 15.0),
            _ => panic!(),
        }
    }

    #[test]
    fn single_point_disk() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 2.0)]).unwrap();
        let m = lidar_depth_map(&cam(), &cloud, &DepthProjectionConfig::default());
        let expected = [(32, 32), (31, 32), (33, 32), (32, 31), (32, 33)];
        assert_eq!(m.valid_count(), expected.len());
        for (x, y) in expected {
            assert_eq!(m.get(x, y), Some(2.0));
        }
    }

    #[test]
    fn occlusion_keeps_nearest() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, 2.0)]).unwrap();
        let m = lidar_depth_map(&cam(), &cloud, &DepthProjectionConfig::default());
        assert_eq!(m.get(32, 32), Some(2.0));
    }

    #[test]
    fn occluded_point_is_dropped_outside_the_occluder_disk() {
        // The far point's rounded pixel is covered by the near point's disk,
        // so its own disk must not leak around the occluder.
        let c = cam();
        let near = Vector3::new(0.0, 0.0, 2.0);
        let far = Vector3::new(5.0 / 64.0, 0.0, 5.0); // projects to (33, 32)
        let cloud = PointCloud::new(vec![near, far]).unwrap();
        let m = lidar_depth_map(&c, &cloud, &DepthProjectionConfig::default());
        assert_eq!(m.get(34, 32), None);
        assert_eq!(m.valid_count(), 5);
    }

    #[test]
    fn outside_frustum_contributes_nothing() {
        let cloud = PointCloud::new(vec![Vector3::new(10.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)]).unwrap();
        let m = lidar_depth_map(&cam(), &cloud, &DepthProjectionConfig::default());
        assert_eq!(m.valid_count(), 0);
    }
}
