//! Per-point geometric and appearance complexity, and budgeted sampling.
//!
//! Curvature is the surface-variation ratio `λ₁ / (λ₁ + λ₂ + λ₃ + ε)` of the
//! k-neighborhood covariance; texture is the mean per-channel color variance
//! over the same neighborhood. Both are min-max normalized and blended into
//! a sampling distribution from which `M` points are drawn without
//! replacement.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::NeighborIndex;
use crate::linalg;
use crate::pointcloud::{chunk_ranges, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    /// Neighborhood size.
    pub k: usize,
    /// Weight of normalized curvature.
    pub alpha: f64,
    /// Weight of normalized texture.
    pub beta: f64,
    pub epsilon: f64,
    /// Number of points kept.
    pub budget: usize,
    pub seed: u64,
    /// Points per scoring chunk. Only bounds per-task memory; results do
    /// not depend on it.
    pub chunk_size: usize,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        AllocationConfig {
            k: 64,
            alpha: 0.5,
            beta: 0.5,
            epsilon: 1e-12,
            budget: 3_000_000,
            seed: 0,
            chunk_size: 65_536,
        }
    }
}

impl AllocationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("alpha and beta must lie in [0, 1]".into()));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "alpha + beta must equal 1 (got {} + {})",
                self.alpha, self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        Ok(())
    }
}

/// Scores for every point of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityField {
    pub curvature: Vec<f64>,
    /// `None` when the cloud has no colors.
    pub texture: Option<Vec<f64>>,
    pub curvature_norm: Vec<f64>,
    /// All zeros when the cloud has no colors.
    pub texture_norm: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Sample covariance of the neighbor positions with the `k - 1` divisor.
pub fn local_covariance(positions: &[Vector3<f64>], neighbor_ids: &[usize]) -> Result<Matrix3<f64>> {
    let k = neighbor_ids.len();
    if k < 2 {
        return Err(Error::DegenerateNeighborhood(format!(
            "covariance needs at least 2 neighbors, got {k}"
        )));
    }
    let mut mean = Vector3::zeros();
    for &j in neighbor_ids {
        mean += positions[j];
    }
    mean /= k as f64;
    let mut c = Matrix3::zeros();
    for &j in neighbor_ids {
        let d = positions[j] - mean;
        c += d * d.transpose();
    }
    Ok(c / (k - 1) as f64)
}

/// `λ₁ / (λ₁ + λ₂ + λ₃ + ε)` for a symmetric positive semidefinite matrix.
pub fn curvature(c: &Matrix3<f64>, epsilon: f64) -> Result<f64> {
    if !linalg::is_symmetric(c, 1e-9) {
        return Err(Error::DegenerateNeighborhood("covariance is not symmetric".into()));
    }
    Ok(curvature_unchecked(c, epsilon))
}

fn curvature_unchecked(c: &Matrix3<f64>, epsilon: f64) -> f64 {
    let [l1, l2, l3] = linalg::sym3_eigenvalues(c);
    l1 / (l1 + l2 + l3 + epsilon)
}

/// Mean per-channel variance of a set of colors.
pub fn texture_complexity(neighbor_colors: &[Vector3<f64>]) -> Result<f64> {
    if neighbor_colors.is_empty() {
        return Err(Error::DegenerateNeighborhood("texture of an empty neighborhood".into()));
    }
    Ok(texture_of(neighbor_colors.iter().copied(), neighbor_colors.len()))
}

fn texture_of(colors: impl Iterator<Item = Vector3<f64>> + Clone, k: usize) -> f64 {
    let mean = colors.clone().fold(Vector3::zeros(), |acc, c| acc + c) / k as f64;
    let sum: f64 = colors.map(|c| (c - mean).norm_squared()).sum();
    sum / (3 * k) as f64
}

/// Min-max normalization to `[0, 1]`. A constant array maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Config("cannot normalize an empty score array".into()));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {i} is {}", raw[i])));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range == 0.0 {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect())
}

/// Blend normalized curvature and texture into a probability distribution.
///
/// Missing texture contributes nothing, so the distribution is then
/// proportional to curvature alone. An all-zero blend falls back to uniform.
pub fn allocation_probabilities(
    curvature_norm: &[f64],
    texture_norm: Option<&[f64]>,
    cfg: &AllocationConfig,
) -> Result<Vec<f64>> {
    let n = curvature_norm.len();
    if let Some(t) = texture_norm {
        if t.len() != n {
            return Err(Error::LengthMismatch {
                what: "texture vs curvature scores",
                left: t.len(),
                right: n,
            });
        }
    }
    let weights: Vec<f64> = match texture_norm {
        Some(t) => curvature_norm
            .iter()
            .zip(t)
            .map(|(k, t)| cfg.alpha * k + cfg.beta * t)
            .collect(),
        None => curvature_norm.iter().map(|k| cfg.alpha * k).collect(),
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Ok(vec![1.0 / n as f64; n]);
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Per-point curvature over the global index, scored chunk by chunk in
/// parallel. `k` is clamped to `N - 1`.
pub fn point_curvatures(
    positions: &[Vector3<f64>],
    index: &NeighborIndex,
    k: usize,
    epsilon: f64,
    chunk_size: usize,
) -> Result<Vec<f64>> {
    let k = k.min(positions.len().saturating_sub(1));
    if k < 2 {
        return Err(Error::DegenerateNeighborhood(format!(
            "curvature needs at least 3 points, got {}",
            positions.len()
        )));
    }
    let chunks: Vec<Vec<f64>> = chunk_ranges(positions.len(), chunk_size)
        .into_par_iter()
        .map(|range| {
            range
                .map(|i| {
                    let ids = index.knn(i, k)?;
                    Ok(curvature_unchecked(&local_covariance(positions, &ids)?, epsilon))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Curvature, texture, normalized scores and allocation probabilities for
/// every point of `cloud`.
pub fn compute_complexity(
    cloud: &PointCloud,
    index: &NeighborIndex,
    cfg: &AllocationConfig,
) -> Result<ComplexityField> {
    cfg.validate()?;
    let positions = cloud.positions();
    let k = cfg.k.min(positions.len().saturating_sub(1));
    if k < 2 {
        return Err(Error::DegenerateNeighborhood(format!(
            "scoring needs at least 3 points, got {}",
            positions.len()
        )));
    }
    let colors = cloud.colors();
    let chunks: Vec<Vec<(f64, f64)>> = chunk_ranges(positions.len(), cfg.chunk_size)
        .into_par_iter()
        .map(|range| {
            range
                .map(|i| {
                    let ids = index.knn(i, k)?;
                    let kappa = curvature_unchecked(&local_covariance(positions, &ids)?, cfg.epsilon);
                    let tau = match colors {
                        Some(c) => texture_of(ids.iter().map(|&j| c[j]), ids.len()),
                        None => 0.0,
                    };
                    Ok((kappa, tau))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (curv, tex): (Vec<f64>, Vec<f64>) = chunks.into_iter().flatten().unzip();

    let curvature_norm = normalize_scores(&curv)?;
    let (texture, texture_norm) = if colors.is_some() {
        let tn = normalize_scores(&tex)?;
        (Some(tex), tn)
    } else {
        (None, vec![0.0; curv.len()])
    };
    let probabilities = allocation_probabilities(
        &curvature_norm,
        texture.as_ref().map(|_| texture_norm.as_slice()),
        cfg,
    )?;
    Ok(ComplexityField {
        curvature: curv,
        texture,
        curvature_norm,
        texture_norm,
        probabilities,
    })
}

/// Draw `m` distinct indices without replacement, favoring large `probs`.
///
/// Uses exponential keys `ln(u) / p` with one uniform draw per index from a
/// seeded ChaCha stream; the `m` largest keys win. Zero-probability indices
/// rank after every positive one and are ordered among themselves by `u`.
/// The result is sorted ascending.
pub fn sample_indices(probs: &[f64], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = probs.len();
    if m < 1 || m > n {
        return Err(Error::Budget { m, n });
    }
    if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::NonFinite(format!("probability {i} is {}", probs[i])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(bool, f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            if p > 0.0 {
                (true, u.ln() / p, i)
            } else {
                (false, u, i)
            }
        })
        .collect();
    let by_rank = |a: &(bool, f64, usize), b: &(bool, f64, usize)| {
        b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2))
    };
    if m < n {
        keyed.select_nth_unstable_by(m - 1, by_rank);
    }
    let mut picked: Vec<usize> = keyed[..m].iter().map(|k| k.2).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// The subset of `cloud` chosen by [`sample_indices`].
pub fn sample_budget(cloud: &PointCloud, probs: &[f64], m: usize, seed: u64) -> Result<PointCloud> {
    if probs.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "probabilities vs points",
            left: probs.len(),
            right: cloud.len(),
        });
    }
    let ids = sample_indices(probs, m, seed)?;
    Ok(cloud.subset(&ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn covariance_hand_cases() {
        let pts = vec![Vector3::repeat(2.0); 4];
        assert_eq!(local_covariance(&pts, &[0, 1, 2, 3]).unwrap(), Matrix3::zeros());

        let pts = vec![Vector3::x(), -Vector3::x()];
        let c = local_covariance(&pts, &[0, 1]).unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(2.0, 0.0, 0.0)));

        assert!(local_covariance(&pts, &[0]).is_err());
    }

    #[test]
    fn curvature_hand_cases() {
        let eps = 1e-12;
        let planar = Matrix3::from_diagonal(&Vector3::new(0.0, 1.0, 1.0));
        assert_eq!(curvature(&planar, eps).unwrap(), 0.0);
        assert_relative_eq!(curvature(&Matrix3::identity(), eps).unwrap(), 1.0 / (3.0 + eps));
        let c = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0));
        assert_relative_eq!(curvature(&c, eps).unwrap(), 1.0 / (4.0 + eps));

        let mut bad = Matrix3::identity();
        bad[(0, 1)] = 0.5;
        assert!(curvature(&bad, eps).is_err());
    }

    #[test]
    fn texture_hand_cases() {
        assert_eq!(texture_complexity(&[Vector3::repeat(0.3); 5]).unwrap(), 0.0);
        let mut cs = vec![Vector3::zeros(); 4];
        cs.extend(vec![Vector3::repeat(1.0); 4]);
        assert_relative_eq!(texture_complexity(&cs).unwrap(), 0.25);
        assert!(texture_complexity(&[]).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_scores(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[3.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(normalize_scores(&[0.0, 1.0 / 3.0]).unwrap(), vec![0.0, 1.0]);
        assert!(normalize_scores(&[1.0, f64::NAN]).is_err());
        assert!(normalize_scores(&[]).is_err());
    }

    #[test]
    fn probabilities() {
        let cfg = AllocationConfig::default();
        let p = allocation_probabilities(&[0.4; 5], Some(&[0.4; 5]), &cfg).unwrap();
        for v in p {
            assert_relative_eq!(v, 0.2);
        }

        let cfg1 = AllocationConfig {
            alpha: 1.0,
            beta: 0.0,
            ..Default::default()
        };
        let p = allocation_probabilities(&[0.2, 0.8], Some(&[0.3, 0.1]), &cfg1).unwrap();
        assert_relative_eq!(p[0], 0.2);
        assert_relative_eq!(p[1], 0.8);

        let p = allocation_probabilities(&[1.0, 0.0], Some(&[0.0, 1.0]), &cfg).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let p = allocation_probabilities(&[0.0, 0.0], None, &cfg).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        assert!(allocation_probabilities(&[0.0, 1.0], Some(&[1.0]), &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AllocationConfig::default().validate().is_ok());
        let bad = AllocationConfig {
            alpha: 0.7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let cloud = PointCloud::new((0..6).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        let uniform = vec![1.0 / 6.0; 6];
        let all = sample_budget(&cloud, &uniform, 6, 3).unwrap();
        assert_eq!(all, cloud);

        for seed in 0..50 {
            assert_eq!(sample_indices(&[1.0, 0.0, 0.0], 1, seed).unwrap(), vec![0]);
        }
        // Zero-probability points fill in only when positives run out.
        let picked = sample_indices(&[0.5, 0.0, 0.5, 0.0], 3, 9).unwrap();
        assert!(picked.contains(&0) && picked.contains(&2));

        assert!(matches!(sample_indices(&uniform, 7, 0), Err(Error::Budget { m: 7, n: 6 })));
        assert!(matches!(sample_indices(&uniform, 0, 0), Err(Error::Budget { .. })));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let probs: Vec<f64> = (1..=100).map(|i| i as f64 / 5050.0).collect();
        let a = sample_indices(&probs, 30, 77).unwrap();
        let b = sample_indices(&probs, 30, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_indices(&probs, 30, 78).unwrap());
    }
}
