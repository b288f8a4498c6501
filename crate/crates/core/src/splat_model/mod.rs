//! Gaussian primitives and the curvature-driven refinement rules.

pub mod io;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::complexity::{local_covariance, point_curvatures};
use crate::error::{Error, Result};
use crate::index::NeighborIndex;
use crate::linalg;
use crate::pointcloud::PointCloud;

/// Scale divisor applied to both children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// An anisotropic 3D Gaussian with covariance `R diag(scale²) Rᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations in meters.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn new(
        mean: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self> {
        let g = Gaussian {
            mean,
            rotation,
            scale,
            opacity,
            color,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGaussian("mean is not finite".into()));
        }
        if (self.rotation.quaternion().norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidGaussian("rotation is not a unit quaternion".into()));
        }
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidGaussian(format!("scales must be positive, got {:?}", self.scale)));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::InvalidGaussian(format!("opacity {} outside (0, 1)", self.opacity)));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidGaussian("color outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_of(self)
    }

    /// Index of the axis with the smallest scale, lower axis on ties.
    pub fn thinnest_axis(&self) -> usize {
        let mut idx = 0;
        for i in 1..3 {
            if self.scale[i] < self.scale[idx] {
                idx = i;
            }
        }
        idx
    }

    pub fn param(&self, p: Param) -> f64 {
        let q = self.rotation.quaternion();
        match p {
            Param::Mean(a) => self.mean[a as usize],
            Param::LogScale(a) => self.scale[a as usize].ln(),
            Param::Rotation(0) => q.w,
            Param::Rotation(c) => q.imag()[c as usize - 1],
            Param::OpacityLogit => logit(self.opacity),
            Param::Color(c) => self.color[c as usize],
        }
    }

    /// Overwrite one unconstrained parameter. Rotation components are
    /// renormalized; opacity goes through a sigmoid; scale through `exp`.
    pub fn set_param(&mut self, p: Param, v: f64) {
        match p {
            Param::Mean(a) => self.mean[a as usize] = v,
            Param::LogScale(a) => self.scale[a as usize] = v.exp(),
            Param::Rotation(c) => {
                let q = self.rotation.quaternion();
                let mut coords = [q.w, q.i, q.j, q.k];
                coords[c as usize] = v;
                let raw = Quaternion::new(coords[0], coords[1], coords[2], coords[3]);
                if raw.norm() > 0.0 {
                    self.rotation = UnitQuaternion::from_quaternion(raw);
                }
            }
            Param::OpacityLogit => self.opacity = sigmoid(v),
            Param::Color(c) => self.color[c as usize] = v,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One scalar of the unconstrained parameterization of a [`Gaussian`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    Mean(u8),
    LogScale(u8),
    /// 0 = w, 1..=3 = i, j, k.
    Rotation(u8),
    OpacityLogit,
    Color(u8),
}

impl Param {
    pub const ALL: [Param; 14] = [
        Param::Mean(0),
        Param::Mean(1),
        Param::Mean(2),
        Param::LogScale(0),
        Param::LogScale(1),
        Param::LogScale(2),
        Param::Rotation(0),
        Param::Rotation(1),
        Param::Rotation(2),
        Param::Rotation(3),
        Param::OpacityLogit,
        Param::Color(0),
        Param::Color(1),
        Param::Color(2),
    ];

    pub fn group(self) -> ParamGroup {
        match self {
            Param::Mean(_) => ParamGroup::Mean,
            Param::LogScale(_) => ParamGroup::Scale,
            Param::Rotation(_) => ParamGroup::Rotation,
            Param::OpacityLogit => ParamGroup::Opacity,
            Param::Color(_) => ParamGroup::Color,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Mean,
    Scale,
    Rotation,
    Opacity,
    Color,
}

/// Gaussians plus, optionally, one associated LiDAR normal per Gaussian.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    pub lidar_normals: Option<Vec<Vector3<f64>>>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        GaussianSet {
            gaussians,
            lidar_normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn means(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.mean).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::InvalidGaussian(format!("gaussian {i}: {e}")))?;
        }
        if let Some(n) = &self.lidar_normals {
            if n.len() != self.gaussians.len() {
                return Err(Error::LengthMismatch {
                    what: "lidar normals vs gaussians",
                    left: n.len(),
                    right: self.gaussians.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn covariance_of(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    r * s2 * r.transpose()
}

/// Unit normal implied by the Gaussian: the axis of its smallest scale,
/// which is the eigenvector of the smallest covariance eigenvalue.
pub fn gaussian_normal(g: &Gaussian) -> Vector3<f64> {
    gaussian_normal_checked(g).0
}

/// Like [`gaussian_normal`], also reporting whether the two smallest scales
/// tie within 1e-9 (the normal is then only one valid choice among many).
pub fn gaussian_normal_checked(g: &Gaussian) -> (Vector3<f64>, bool) {
    let axis = g.thinnest_axis();
    let mut sorted = [g.scale.x, g.scale.y, g.scale.z];
    sorted.sort_by(f64::total_cmp);
    let tie = (sorted[1] - sorted[0]).abs() <= 1e-9;
    let n = g.rotation_matrix().column(axis).into_owned();
    (linalg::canonicalize_sign(n), tie)
}

/// Normals for every Gaussian plus the number of tied (ambiguous) ones.
pub fn gaussian_normals(set: &GaussianSet) -> (Vec<Vector3<f64>>, usize) {
    let mut ties = 0;
    let normals = set
        .gaussians
        .iter()
        .map(|g| {
            let (n, tie) = gaussian_normal_checked(g);
            ties += usize::from(tie);
            n
        })
        .collect();
    (normals, ties)
}

/// Curvature of each Gaussian from the k-neighborhood of its mean among
/// the current means.
pub fn online_curvature(set: &GaussianSet, k: usize, epsilon: f64) -> Result<Vec<f64>> {
    if set.len() < k + 1 || k < 2 {
        return Err(Error::TooFewGaussians {
            need: (k + 1).max(3),
            have: set.len(),
        });
    }
    let means = set.means();
    let index = NeighborIndex::from_positions(&means)?;
    point_curvatures(&means, &index, k, epsilon, 4096)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSchedule {
    pub theta_start: f64,
    pub theta_end: f64,
    pub total_iters: usize,
}

impl Default for SplitSchedule {
    fn default() -> Self {
        SplitSchedule {
            theta_start: 0.1,
            theta_end: 0.3,
            total_iters: 30_000,
        }
    }
}

/// Linear threshold from `theta_start` at `t = 0` to `theta_end` at `t = T`.
/// Iterations past `T` clamp to the end value.
pub fn split_threshold(t: usize, sched: &SplitSchedule) -> f64 {
    let (a, b) = (sched.theta_start, sched.theta_end);
    if t >= sched.total_iters {
        if t > sched.total_iters {
            log::warn!("iteration {t} past schedule end {}; clamping", sched.total_iters);
        }
        return b;
    }
    if t == 0 {
        return a;
    }
    let v = a + (b - a) * (t as f64 / sched.total_iters as f64);
    v.clamp(a.min(b), a.max(b))
}

/// How the curvature test combines with the photometric split flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Split only when flagged and curvature exceeds the threshold.
    #[default]
    And,
    /// Split when flagged or curvature exceeds the threshold.
    Or,
    /// Ignore curvature.
    Off,
}

/// Ids of Gaussians to split at iteration `t` (curvature gate ANDed with the
/// gradient flags).
pub fn select_split_candidates(
    curvatures: &[f64],
    grad_flags: &[bool],
    t: usize,
    sched: &SplitSchedule,
) -> Result<Vec<usize>> {
    select_split_candidates_with(curvatures, grad_flags, t, sched, GateMode::And)
}

pub fn select_split_candidates_with(
    curvatures: &[f64],
    grad_flags: &[bool],
    t: usize,
    sched: &SplitSchedule,
    mode: GateMode,
) -> Result<Vec<usize>> {
    if curvatures.len() != grad_flags.len() {
        return Err(Error::LengthMismatch {
            what: "curvatures vs grad flags",
            left: curvatures.len(),
            right: grad_flags.len(),
        });
    }
    let theta = split_threshold(t, sched);
    Ok(curvatures
        .iter()
        .zip(grad_flags)
        .enumerate()
        .filter(|(_, (&k, &f))| match mode {
            GateMode::And => f && k > theta,
            GateMode::Or => f || k > theta,
            GateMode::Off => f,
        })
        .map(|(i, _)| i)
        .collect())
}

/// Replace `g` by two children whose means are drawn from `g`'s own density
/// and whose scales shrink by [`SPLIT_SCALE_DIVISOR`].
pub fn split_gaussian(g: &Gaussian, seed: u64) -> [Gaussian; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.rotation_matrix();
    let mut child = || {
        let z = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        Gaussian {
            mean: g.mean + r * g.scale.component_mul(&z),
            rotation: g.rotation,
            scale: g.scale / SPLIT_SCALE_DIVISOR,
            opacity: g.opacity,
            color: g.color,
        }
    };
    let a = child();
    let b = child();
    [a, b]
}

/// Attach to each Gaussian the normal of the cloud point nearest its mean.
pub fn associate_lidar_normals(
    set: &GaussianSet,
    cloud: &PointCloud,
    index: &NeighborIndex,
) -> Result<GaussianSet> {
    let normals = cloud.normals().ok_or(Error::MissingNormals)?;
    if index.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "index vs cloud",
            left: index.len(),
            right: cloud.len(),
        });
    }
    let assoc = set
        .gaussians
        .iter()
        .map(|g| normals[index.nearest(&g.mean)])
        .collect();
    Ok(GaussianSet {
        gaussians: set.gaussians.clone(),
        lidar_normals: Some(assoc),
    })
}

/// Sign convention for estimated normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalOrientation {
    /// Largest-magnitude component positive.
    Canonical,
    /// `n · (viewpoint - p) > 0`.
    TowardViewpoint(Vector3<f64>),
    /// `n · (p - viewpoint) > 0`.
    AwayFromViewpoint(Vector3<f64>),
}

/// Fallback for neighborhoods without a defined plane.
pub const FALLBACK_NORMAL: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

/// PCA normals: the smallest-eigenvalue eigenvector of each point's
/// neighborhood covariance. Returns the cloud with normals attached and the
/// number of degenerate (collinear or coincident) neighborhoods, which get
/// [`FALLBACK_NORMAL`].
pub fn estimate_point_normals(
    cloud: &PointCloud,
    k: usize,
    orientation: NormalOrientation,
) -> Result<(PointCloud, usize)> {
    if cloud.len() < k + 1 || k < 2 {
        return Err(Error::TooFewPoints(cloud.len()));
    }
    let index = NeighborIndex::build(cloud)?;
    let positions = cloud.positions();
    let mut degenerate = 0;
    let mut normals = Vec::with_capacity(cloud.len());
    for (i, p) in positions.iter().enumerate() {
        let ids = index.knn(i, k)?;
        let c = local_covariance(positions, &ids)?;
        let ev = linalg::sym3_eigenvalues(&c);
        if ev[2] <= 0.0 || ev[1] <= 1e-10 * ev[2] {
            degenerate += 1;
            normals.push(FALLBACK_NORMAL);
            continue;
        }
        let v = linalg::smallest_eigenpair(&c).vector;
        let n = match orientation {
            NormalOrientation::Canonical => linalg::canonicalize_sign(v),
            NormalOrientation::TowardViewpoint(vp) => {
                if v.dot(&(vp - p)) < 0.0 {
                    -v
                } else {
                    v
                }
            }
            NormalOrientation::AwayFromViewpoint(vp) => {
                if v.dot(&(p - vp)) < 0.0 {
                    -v
                } else {
                    v
                }
            }
        };
        normals.push(n);
    }
    if degenerate > 0 {
        log::warn!("{degenerate} degenerate neighborhoods received the fallback normal");
    }
    Ok((cloud.clone().with_normals(normals)?, degenerate))
}

/// Mean of `1 - |n_gs · n_lidar|` over the set.
pub fn normal_alignment_loss(set: &GaussianSet) -> Result<f64> {
    let lidar = set.lidar_normals.as_ref().ok_or(Error::MissingAssociations)?;
    if lidar.len() != set.len() {
        return Err(Error::LengthMismatch {
            what: "lidar normals vs gaussians",
            left: lidar.len(),
            right: set.len(),
        });
    }
    if set.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = set
        .gaussians
        .iter()
        .zip(lidar)
        .map(|(g, n)| 1.0 - gaussian_normal(g).dot(n).abs().min(1.0))
        .sum();
    Ok(sum / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn gaussian(rot: UnitQuaternion<f64>, scale: Vector3<f64>) -> Gaussian {
        Gaussian::new(Vector3::zeros(), rot, scale, 0.5, Vector3::repeat(0.5)).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ))
    }

    #[test]
    fn covariance_cases() {
        let g = gaussian(UnitQuaternion::identity(), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(covariance_of(&g), Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));

        let g = gaussian(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vector3::new(1.0, 2.0, 1.0),
        );
        let c = covariance_of(&g);
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).norm() < 1e-12);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = Vector3::new(
                rng.random_range(0.05..2.0),
                rng.random_range(0.05..2.0),
                rng.random_range(0.05..2.0),
            );
            let g = gaussian(random_rotation(&mut rng), s);
            let mut ev: Vec<f64> = SymmetricEigen::new(covariance_of(&g)).eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let mut s2: Vec<f64> = s.iter().map(|v| v * v).collect();
            s2.sort_by(f64::total_cmp);
            for i in 0..3 {
                assert!((ev[i] - s2[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normals() {
        let g = gaussian(UnitQuaternion::identity(), Vector3::new(2.0, 2.0, 0.1));
        assert_eq!(gaussian_normal(&g), Vector3::z());
        let g = gaussian(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_2),
            Vector3::new(2.0, 2.0, 0.1),
        );
        assert!((gaussian_normal(&g) - Vector3::y()).norm() < 1e-12);

        let (_, tie) = gaussian_normal_checked(&gaussian(UnitQuaternion::identity(), Vector3::new(0.1, 0.1, 1.0)));
        assert!(tie);
    }

    #[test]
    fn normal_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let s = Vector3::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.01..0.2),
            );
            let g = gaussian(random_rotation(&mut rng), s);
            let eig = SymmetricEigen::new(covariance_of(&g));
            let imin = eig.eigenvalues.imin();
            let oracle = eig.eigenvectors.column(imin).into_owned();
            let n = gaussian_normal(&g);
            assert!(1.0 - n.dot(&oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule() {
        let s = SplitSchedule {
            total_iters: 1000,
            ..Default::default()
        };
        assert_eq!(split_threshold(0, &s), 0.1);
        assert_eq!(split_threshold(1000, &s), 0.3);
        assert_eq!(split_threshold(5000, &s), 0.3);
        assert_relative_eq!(split_threshold(500, &s), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn candidates() {
        let s = SplitSchedule {
            total_iters: 100,
            ..Default::default()
        };
        assert!(select_split_candidates(&[0.0; 4], &[true; 4], 0, &s).unwrap().is_empty());
        assert_eq!(select_split_candidates(&[0.25], &[true], 0, &s).unwrap(), vec![0]);
        assert!(select_split_candidates(&[0.25], &[true], 100, &s).unwrap().is_empty());
        assert_eq!(select_split_candidates(&[0.15, 0.35], &[true, true], 50, &s).unwrap(), vec![1]);
        assert!(select_split_candidates(&[0.15], &[true, false], 0, &s).is_err());

        let k = [0.0, 0.5, 0.5, 0.0];
        let f = [true, true, false, false];
        assert_eq!(select_split_candidates_with(&k, &f, 0, &s, GateMode::Off).unwrap(), vec![0, 1]);
        assert_eq!(select_split_candidates_with(&k, &f, 0, &s, GateMode::Or).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn split_children() {
        let g = Gaussian::new(
            Vector3::new(1.0, 2.0, 3.0),
            UnitQuaternion::identity(),
            Vector3::repeat(0.8),
            0.7,
            Vector3::new(0.1, 0.2, 0.3),
        )
        .unwrap();
        let [a, b] = split_gaussian(&g, 12);
        assert_eq!(a.scale, Vector3::repeat(0.8 / 1.6));
        assert_eq!(b.scale, Vector3::repeat(0.8 / 1.6));
        assert_eq!(a.opacity, 0.7);
        assert_eq!(a.color, g.color);
        assert_ne!(a.mean, b.mean);
        assert_eq!(split_gaussian(&g, 12), [a, b]);
    }

    #[test]
    fn split_child_statistics() {
        let g = Gaussian::new(
            Vector3::new(0.5, -0.5, 1.0),
            UnitQuaternion::identity(),
            Vector3::repeat(1.0),
            0.5,
            Vector3::zeros(),
        )
        .unwrap();
        let n = 10_000;
        let means: Vec<Vector3<f64>> = (0..n / 2)
            .flat_map(|s| split_gaussian(&g, s as u64).map(|c| c.mean))
            .collect();
        let mu = means.iter().sum::<Vector3<f64>>() / n as f64;
        assert!((mu - g.mean).norm() < 0.05);
        let mut cov = Matrix3::zeros();
        for m in &means {
            let d = m - mu;
            cov += d * d.transpose();
        }
        cov /= (n - 1) as f64;
        let rel = (cov - covariance_of(&g)).norm() / covariance_of(&g).norm();
        assert!(rel < 0.1, "relative covariance error {rel}");
    }

    #[test]
    fn alignment_loss() {
        let g = gaussian(UnitQuaternion::identity(), Vector3::new(1.0, 1.0, 0.1));
        let mut set = GaussianSet::new(vec![g.clone(), g.clone()]);
        assert!(normal_alignment_loss(&set).is_err());
        set.lidar_normals = Some(vec![Vector3::z(), Vector3::z()]);
        assert_eq!(normal_alignment_loss(&set).unwrap(), 0.0);
        set.lidar_normals = Some(vec![-Vector3::z(), Vector3::z()]);
        assert_eq!(normal_alignment_loss(&set).unwrap(), 0.0);
        set.lidar_normals = Some(vec![Vector3::x(), Vector3::y()]);
        assert_eq!(normal_alignment_loss(&set).unwrap(), 1.0);
    }

    #[test]
    fn params_roundtrip() {
        let mut g = Gaussian::new(
            Vector3::new(1.0, 2.0, 3.0),
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            Vector3::new(0.1, 0.2, 0.3),
            0.3,
            Vector3::new(0.1, 0.5, 0.9),
        )
        .unwrap();
        let orig = g.clone();
        for p in Param::ALL {
            let v = g.param(p);
            g.set_param(p, v);
        }
        assert!((g.mean - orig.mean).norm() < 1e-12);
        assert!((g.scale - orig.scale).norm() < 1e-12);
        assert!((g.opacity - orig.opacity).abs() < 1e-12);
        assert!(g.rotation.angle_to(&orig.rotation) < 1e-9);
    }

    #[test]
    fn plane_normals() {
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|i| Vector3::new((i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1, 0.0))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let (with_n, degenerate) = estimate_point_normals(&cloud, 16, NormalOrientation::Canonical).unwrap();
        assert_eq!(degenerate, 0);
        for n in with_n.normals().unwrap() {
            assert!((n - Vector3::z()).norm() < 1e-9, "{n:?}");
        }
    }

    #[test]
    fn collinear_normals_fall_back() {
        let pts: Vec<Vector3<f64>> = (0..30).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let (with_n, degenerate) = estimate_point_normals(&cloud, 8, NormalOrientation::Canonical).unwrap();
        assert_eq!(degenerate, 30);
        assert!(with_n.normals().unwrap().iter().all(|n| *n == FALLBACK_NORMAL));
    }

    #[test]
    fn association_ties_and_errors() {
        let cloud = PointCloud::new(vec![Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)])
            .unwrap();
        let index = NeighborIndex::build(&cloud).unwrap();
        let set = GaussianSet::new(vec![gaussian(UnitQuaternion::identity(), Vector3::repeat(0.1))]);
        assert!(matches!(
            associate_lidar_normals(&set, &cloud, &index),
            Err(Error::MissingNormals)
        ));
        let cloud = cloud.with_normals(vec![Vector3::x(), Vector3::y()]).unwrap();
        let out = associate_lidar_normals(&set, &cloud, &index).unwrap();
        assert_eq!(out.lidar_normals.unwrap(), vec![Vector3::x()]);
    }
}
