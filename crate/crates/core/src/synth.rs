//! Synthetic scenes with analytic geometry, used as test fixtures.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera_geom::{project_cloud, CameraView, DepthMap, DepthProjectionConfig};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Plane,
    Cube,
    TexturedCube,
    Sphere,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(SceneKind::Plane),
            "cube" => Ok(SceneKind::Cube),
            "textured-cube" | "textured_cube" => Ok(SceneKind::TexturedCube),
            "sphere" => Ok(SceneKind::Sphere),
            other => Err(Error::Config(format!("unknown scene kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SceneKind,
    /// Grid resolution per side (plane and cube faces) or point count
    /// (sphere).
    pub resolution: usize,
    /// Side length of the plane/cube, radius of the sphere.
    pub size: f64,
    /// Distance of the plane from the origin along +z.
    pub plane_depth: f64,
    /// Standard deviation of isotropic position noise.
    pub noise: f64,
    pub num_cameras: usize,
    pub image_size: usize,
    pub focal: f64,
    pub camera_distance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SceneKind::Cube,
            resolution: 40,
            size: 1.0,
            plane_depth: 2.0,
            noise: 0.0,
            num_cameras: 4,
            image_size: 64,
            focal: 90.0,
            camera_distance: 3.0,
            seed: 0,
        }
    }
}

/// A synthetic cloud with normals, colors and region labels.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cloud: PointCloud,
    pub cameras: Vec<CameraView>,
    /// Face index per point for cubes: 0..6 for +x, -x, +y, -y, +z, -z.
    pub face_ids: Option<Vec<u8>>,
    /// Distance from each cube point to the nearest cube edge.
    pub edge_distance: Option<Vec<f64>>,
    /// Index of the checkerboard face for textured cubes.
    pub textured_face: Option<u8>,
}

const FACE_COLORS: [[f64; 3]; 6] = [
    [0.8, 0.3, 0.3],
    [0.3, 0.8, 0.3],
    [0.3, 0.3, 0.8],
    [0.8, 0.8, 0.3],
    [0.6, 0.6, 0.6],
    [0.3, 0.8, 0.8],
];

/// Checkerboard face of the textured cube.
pub const TEXTURED_FACE: u8 = 4;
const CHECKER_CELLS: f64 = 8.0;

/// Cell-centered `n × n` grid on each face of an axis-aligned cube of side
/// `size` centered at the origin. No two faces share a point.
pub fn cube_surface(n: usize, size: f64, textured: bool) -> Result<SynthScene> {
    if n < 2 || !(size > 0.0) {
        return Err(Error::Config("cube needs resolution >= 2 and positive size".into()));
    }
    let h = size / 2.0;
    let mut pos = Vec::with_capacity(6 * n * n);
    let mut normals = Vec::with_capacity(6 * n * n);
    let mut colors = Vec::with_capacity(6 * n * n);
    let mut faces = Vec::with_capacity(6 * n * n);
    let mut edge = Vec::with_capacity(6 * n * n);
    for face in 0..6u8 {
        let axis = (face / 2) as usize;
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
        for i in 0..n {
            for j in 0..n {
                let u = -h + (i as f64 + 0.5) * size / n as f64;
                let v = -h + (j as f64 + 0.5) * size / n as f64;
                let mut p = Vector3::zeros();
                p[axis] = sign * h;
                p[ua] = u;
                p[va] = v;
                let mut nrm = Vector3::zeros();
                nrm[axis] = sign;
                let color = if textured && face == TEXTURED_FACE {
                    let cu = ((u + h) / size * CHECKER_CELLS).floor() as i64;
                    let cv = ((v + h) / size * CHECKER_CELLS).floor() as i64;
                    if (cu + cv) % 2 == 0 {
                        [0.9; 3]
                    } else {
                        [0.1; 3]
                    }
                } else {
                    FACE_COLORS[face as usize]
                };
                pos.push(p);
                normals.push(nrm);
                colors.push(Vector3::from(color));
                faces.push(face);
                edge.push((h - u.abs()).min(h - v.abs()));
            }
        }
    }
    let cloud = PointCloud::new(pos)?.with_colors(colors)?.with_normals(normals)?;
    Ok(SynthScene {
        cloud,
        cameras: Vec::new(),
        face_ids: Some(faces),
        edge_distance: Some(edge),
        textured_face: textured.then_some(TEXTURED_FACE),
    })
}

/// `n × n` grid on the plane `z = depth`, spanning `size` in x and y.
pub fn plane_surface(n: usize, size: f64, depth: f64) -> Result<SynthScene> {
    if n < 2 || !(size > 0.0) {
        return Err(Error::Config("plane needs resolution >= 2 and positive size".into()));
    }
    let mut pos = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x = -size / 2.0 + size * i as f64 / (n - 1) as f64;
            let y = -size / 2.0 + size * j as f64 / (n - 1) as f64;
            pos.push(Vector3::new(x, y, depth));
        }
    }
    let colors = pos
        .iter()
        .map(|p| Vector3::repeat(0.5 + 0.4 * (3.0 * p.x).sin() * (3.0 * p.y).cos()))
        .collect();
    let count = pos.len();
    let cloud = PointCloud::new(pos)?
        .with_colors(colors)?
        .with_normals(vec![Vector3::z(); count])?;
    Ok(SynthScene {
        cloud,
        cameras: Vec::new(),
        face_ids: None,
        edge_distance: None,
        textured_face: None,
    })
}

/// Fibonacci lattice of `n` points on a sphere of the given radius.
pub fn sphere_surface(n: usize, radius: f64) -> Result<SynthScene> {
    if n < 4 || !(radius > 0.0) {
        return Err(Error::Config("sphere needs at least 4 points and positive radius".into()));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pos = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        let d = Vector3::new(r * phi.cos(), y, r * phi.sin());
        pos.push(d * radius);
        normals.push(d);
    }
    let colors = normals.iter().map(|d| d.map(|c| 0.5 + 0.5 * c)).collect();
    let cloud = PointCloud::new(pos)?.with_colors(colors)?.with_normals(normals)?;
    Ok(SynthScene {
        cloud,
        cameras: Vec::new(),
        face_ids: None,
        edge_distance: None,
        textured_face: None,
    })
}

/// `count` cameras on a circle of `distance` around the origin, raised to a
/// 30° elevation, all looking at the origin.
pub fn orbit_cameras(count: usize, distance: f64, focal: f64, width: usize, height: usize) -> Result<Vec<CameraView>> {
    let elev = 30f64.to_radians();
    (0..count)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / count as f64 + 0.3;
            let eye = Vector3::new(
                distance * elev.cos() * az.cos(),
                distance * elev.sin(),
                distance * elev.cos() * az.sin(),
            );
            CameraView::look_at(format!("view_{i:03}"), eye, Vector3::zeros(), Vector3::y(), focal, width, height)
        })
        .collect()
}

/// Build the configured scene with its cameras. Plane scenes get
/// fronto-parallel cameras at the origin looking along +z, spread
/// sideways; other scenes get orbit cameras.
pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    let mut scene = match cfg.kind {
        SceneKind::Plane => plane_surface(cfg.resolution, cfg.size, cfg.plane_depth)?,
        SceneKind::Cube => cube_surface(cfg.resolution, cfg.size, false)?,
        SceneKind::TexturedCube => cube_surface(cfg.resolution, cfg.size, true)?,
        SceneKind::Sphere => sphere_surface(cfg.resolution, cfg.size)?,
    };
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pos: Vec<Vector3<f64>> = scene
            .cloud
            .positions()
            .iter()
            .map(|p| p + Vector3::from_fn(|_, _| normal.sample(&mut rng)))
            .collect();
        let mut cloud = PointCloud::new(pos)?;
        if let Some(c) = scene.cloud.colors() {
            cloud = cloud.with_colors(c.to_vec())?;
        }
        if let Some(n) = scene.cloud.normals() {
            cloud = cloud.with_normals(n.to_vec())?;
        }
        scene.cloud = cloud;
    }
    let (w, h) = (cfg.image_size, cfg.image_size);
    scene.cameras = match cfg.kind {
        SceneKind::Plane => (0..cfg.num_cameras)
            .map(|i| {
                let x = 0.1 * i as f64;
                CameraView::look_at(
                    format!("view_{i:03}"),
                    Vector3::new(x, 0.0, 0.0),
                    Vector3::new(x, 0.0, 1.0),
                    -Vector3::y(),
                    cfg.focal,
                    w,
                    h,
                )
            })
            .collect::<Result<_>>()?,
        _ => orbit_cameras(cfg.num_cameras, cfg.camera_distance, cfg.focal, w, h)?,
    };
    Ok(scene)
}

/// Ground-truth depth and image of the scene in `view`, taken from the
/// projected cloud. Uncovered pixels are left black.
pub fn render_ground_truth(scene: &SynthScene, view: &CameraView, cfg: &DepthProjectionConfig) -> (DepthMap, RgbImage) {
    let (depth, color) = project_cloud(view, &scene.cloud, cfg);
    let image = color.unwrap_or_else(|| RgbImage::new(view.width, view.height));
    (depth, image)
}
