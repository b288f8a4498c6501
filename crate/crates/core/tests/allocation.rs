use lidarsplat::complexity::*;
use lidarsplat::index::NeighborIndex;
use lidarsplat::pointcloud::PointCloud;
use lidarsplat::synth::{cube_surface, plane_surface};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = (0..n)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)))
        .collect();
    let colors = (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
    PointCloud::new(pos).unwrap().with_colors(colors).unwrap()
}

// Two-pass covariance written out element by element.
fn oracle_covariance(pts: &[Vector3<f64>]) -> Matrix3<f64> {
    let k = pts.len() as f64;
    let mut m = [0.0; 3];
    for p in pts {
        for a in 0..3 {
            m[a] += p[a];
        }
    }
    let m = m.map(|v| v / k);
    let mut c = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let mut s = 0.0;
            for p in pts {
                s += (p[a] - m[a]) * (p[b] - m[b]);
            }
            c[(a, b)] = s / (k - 1.0);
        }
    }
    c
}

fn oracle_texture(cols: &[Vector3<f64>]) -> f64 {
    let k = cols.len() as f64;
    let mut total = 0.0;
    for ch in 0..3 {
        let mean = cols.iter().map(|c| c[ch]).sum::<f64>() / k;
        total += cols.iter().map(|c| (c[ch] - mean).powi(2)).sum::<f64>() / k;
    }
    total / 3.0
}

#[test]
fn covariance_and_texture_match_oracles() {
    let cloud = random_cloud(2000, 4);
    let index = NeighborIndex::build(&cloud).unwrap();
    let pos = cloud.positions();
    let cols = cloud.colors().unwrap();
    for id in (0..2000).step_by(7) {
        let ids = index.knn(id, 32).unwrap();
        let pts: Vec<_> = ids.iter().map(|&j| pos[j]).collect();
        let c = local_covariance(pos, &ids).unwrap();
        assert!((c - oracle_covariance(&pts)).amax() < 1e-12);
        let nc: Vec<_> = ids.iter().map(|&j| cols[j]).collect();
        assert!((texture_complexity(&nc).unwrap() - oracle_texture(&nc)).abs() < 1e-12);
    }
}

#[test]
fn chunked_scoring_is_bitwise_identical() {
    let cloud = random_cloud(5000, 9);
    let index = NeighborIndex::build(&cloud).unwrap();
    let whole = compute_complexity(&cloud, &index, &AllocationConfig::default()).unwrap();
    for chunk in [1, 97, 1000, 4999] {
        let cfg = AllocationConfig {
            chunk_size: chunk,
            ..Default::default()
        };
        let part = compute_complexity(&cloud, &index, &cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&whole.curvature), bits(&part.curvature));
        assert_eq!(bits(&whole.probabilities), bits(&part.probabilities));
    }
}

#[test]
fn noiseless_plane_has_zero_curvature() {
    let scene = plane_surface(45, 2.0, 1.5).unwrap();
    let index = NeighborIndex::build(&scene.cloud).unwrap();
    let f = compute_complexity(&scene.cloud, &index, &AllocationConfig::default()).unwrap();
    assert!(f.curvature.iter().all(|k| *k < 1e-6));
}

#[test]
fn cube_edges_score_above_faces() {
    let scene = cube_surface(20, 1.0, false).unwrap();
    let index = NeighborIndex::build(&scene.cloud).unwrap();
    let f = compute_complexity(&scene.cloud, &index, &AllocationConfig::default()).unwrap();
    let e = scene.edge_distance.unwrap();
    let sp = 1.0 / 20.0;
    let mean = |keep: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = e.iter().zip(&f.curvature).filter(|(d, _)| keep(**d)).map(|(_, k)| *k).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let edge = mean(&|d| d < sp);
    let interior = mean(&|d| d > 6.0 * sp);
    assert!(interior < 1e-9, "{interior}");
    assert!(edge > 0.05, "{edge}");
    assert!(f.curvature.iter().all(|k| (0.0..=1.0 / 3.0).contains(k)));
}

#[test]
fn colorless_cloud_ignores_beta() {
    let cloud = PointCloud::new(random_cloud(300, 2).positions().to_vec()).unwrap();
    let index = NeighborIndex::build(&cloud).unwrap();
    let a = compute_complexity(&cloud, &index, &AllocationConfig::default()).unwrap();
    let b = compute_complexity(
        &cloud,
        &index,
        &AllocationConfig {
            alpha: 1.0,
            beta: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(a.probabilities, b.probabilities);
    assert_eq!(sample_indices(&a.probabilities, 30, 5).unwrap(), sample_indices(&b.probabilities, 30, 5).unwrap());
}

#[test]
fn uniform_sampling_passes_chi_square() {
    let (n, m, draws) = (20usize, 10usize, 10_000u64);
    let probs = vec![1.0 / n as f64; n];
    let mut counts = vec![0u64; n];
    for seed in 0..draws {
        for i in sample_indices(&probs, m, seed).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = (draws as f64) * m as f64 / n as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((n - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi2 {stat} >= {critical}");
}

#[test]
fn weighted_sampling_prefers_heavy_points() {
    let mut probs = vec![1.0; 100];
    for p in probs.iter_mut().take(10) {
        *p = 50.0;
    }
    let total: f64 = probs.iter().sum();
    let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
    let mut heavy = 0;
    for seed in 0..200 {
        heavy += sample_indices(&probs, 10, seed).unwrap().iter().filter(|&&i| i < 10).count();
    }
    assert!(heavy > 200 * 7, "{heavy}");
}

proptest! {
    #[test]
    fn normalized_scores_span_unit_interval(raw in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let n = normalize_scores(&raw).unwrap();
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        if max > min {
            prop_assert!(n.contains(&1.0) && n.contains(&0.0));
        } else {
            prop_assert!(n.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn probabilities_form_a_distribution(k in prop::collection::vec(0.0f64..1.0, 1..100), seed in 0u64..1000) {
        let t: Vec<f64> = k.iter().map(|v| (v * 7.3).fract()).collect();
        let p = allocation_probabilities(&k, Some(&t), &AllocationConfig::default()).unwrap();
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = 1 + (seed as usize) % k.len();
        let ids = sample_indices(&p, m, seed).unwrap();
        prop_assert_eq!(ids.len(), m);
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(&ids, &sample_indices(&p, m, seed).unwrap());
    }
}
