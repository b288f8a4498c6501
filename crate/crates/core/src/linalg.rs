//! Small dense linear algebra for 3×3 symmetric matrices.
//!
//! Eigenvalues come from the closed-form trigonometric solution of the
//! characteristic cubic. Eigenvectors are recovered from cross products of
//! the rows of `A - λI`; when those are too short to be trusted (repeated or
//! nearly repeated eigenvalues) a cyclic Jacobi sweep takes over.

use nalgebra::{Matrix3, Vector3};

/// Eigenvalues of a symmetric 3×3 matrix in ascending order, clamped to be
/// non-negative. Only the upper triangle is read.
pub fn sym3_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let mut ev = sym3_eigenvalues_raw(m);
    for v in &mut ev {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    ev
}

/// Eigenvalues in ascending order without clamping.
pub fn sym3_eigenvalues_raw(m: &Matrix3<f64>) -> [f64; 3] {
    let a00 = m[(0, 0)];
    let a11 = m[(1, 1)];
    let a22 = m[(2, 2)];
    let a01 = m[(0, 1)];
    let a02 = m[(0, 2)];
    let a12 = m[(1, 2)];

    let p1 = a01 * a01 + a02 * a02 + a12 * a12;
    if p1 == 0.0 {
        let mut d = [a00, a11, a22];
        d.sort_by(f64::total_cmp);
        return d;
    }

    let q = (a00 + a11 + a22) / 3.0;
    let b00 = a00 - q;
    let b11 = a11 - q;
    let b22 = a22 - q;
    let p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();

    // det((A - qI) / p) / 2
    let det = b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02)
        + a02 * (a01 * a12 - b11 * a02);
    let r = (det / (p * p * p) / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;

    let largest = q + 2.0 * p * phi.cos();
    let smallest = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let middle = 3.0 * q - largest - smallest;

    let mut ev = [smallest, middle, largest];
    ev.sort_by(f64::total_cmp);
    ev
}

/// Result of extracting the eigenvector of the smallest eigenvalue.
#[derive(Debug, Clone, Copy)]
pub struct SmallestEigen {
    pub value: f64,
    pub vector: Vector3<f64>,
    /// Set when the closed-form route was ill-conditioned and the Jacobi
    /// fallback produced the vector.
    pub used_fallback: bool,
}

/// Smallest eigenvalue and a unit eigenvector for it.
pub fn smallest_eigenpair(m: &Matrix3<f64>) -> SmallestEigen {
    let ev = sym3_eigenvalues_raw(m);
    let lambda = ev[0];
    let scale = ev[2].abs().max(ev[0].abs());
    if scale == 0.0 {
        return SmallestEigen {
            value: 0.0,
            vector: Vector3::z(),
            used_fallback: true,
        };
    }

    let shifted = m - Matrix3::identity() * lambda;
    let r0 = shifted.row(0).transpose();
    let r1 = shifted.row(1).transpose();
    let r2 = shifted.row(2).transpose();
    let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let (best, best_norm2) = candidates
        .iter()
        .map(|c| (c, c.norm_squared()))
        .fold((&candidates[0], -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });

    // The cross product of two rows of A - λI has magnitude proportional to
    // the product of the two other eigen-gaps; when either gap is tiny
    // relative to the matrix scale the direction is numerically meaningless.
    let gap = (ev[1] - ev[0]).min(ev[2] - ev[0]);
    if gap > 1e-6 * scale && best_norm2 > (1e-12 * scale * scale).powi(2) {
        let v = best / best_norm2.sqrt();
        return SmallestEigen {
            value: lambda.max(0.0),
            vector: v,
            used_fallback: false,
        };
    }

    let (values, vectors) = jacobi_eigen(m);
    let mut idx = 0;
    for i in 1..3 {
        if values[i] < values[idx] {
            idx = i;
        }
    }
    SmallestEigen {
        value: values[idx].max(0.0),
        vector: vectors.column(idx).normalize(),
        used_fallback: true,
    }
}

/// Cyclic Jacobi eigen-decomposition. Returns eigenvalues (unsorted) and
/// the matrix whose columns are the matching eigenvectors.
pub fn jacobi_eigen(m: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let mut a = symmetrize(m);
    let mut v = Matrix3::<f64>::identity();
    let norm = a.norm();
    if norm == 0.0 {
        return ([0.0; 3], v);
    }
    for _sweep in 0..64 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        if off.sqrt() <= 1e-15 * norm {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Matrix3::<f64>::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            v *= rot;
        }
    }
    ([a[(0, 0)], a[(1, 1)], a[(2, 2)]], v)
}

/// Mirror the upper triangle into the lower one.
pub fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut s = *m;
    s[(1, 0)] = m[(0, 1)];
    s[(2, 0)] = m[(0, 2)];
    s[(2, 1)] = m[(1, 2)];
    s
}

/// True when `m` is symmetric to a tolerance relative to its magnitude.
pub fn is_symmetric(m: &Matrix3<f64>, rel_tol: f64) -> bool {
    let scale = m.abs().max().max(1.0);
    let tol = rel_tol * scale;
    (m[(0, 1)] - m[(1, 0)]).abs() <= tol
        && (m[(0, 2)] - m[(2, 0)]).abs() <= tol
        && (m[(1, 2)] - m[(2, 1)]).abs() <= tol
}

/// Flip `v` so its component of largest magnitude is positive. Ties go to
/// the lower axis.
pub fn canonicalize_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut idx = 0;
    for i in 1..3 {
        if v[i].abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        -v
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) - Vector3::repeat(0.5);
        let r = Rotation3::from_scaled_axis(axis * 4.0);
        let d = Matrix3::from_diagonal(&Vector3::new(
            rng.random_range(0.0..3.0),
            rng.random_range(0.0..3.0),
            rng.random_range(0.0..3.0),
        ));
        r.matrix() * d * r.matrix().transpose()
    }

    #[test]
    fn diagonal_matrices() {
        let ev = sym3_eigenvalues(&Matrix3::from_diagonal(&Vector3::new(3.0, 1.0, 2.0)));
        assert_eq!(ev, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn eigenvalues_match_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let m = random_spd(&mut rng);
            let mut reference: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
            reference.sort_by(f64::total_cmp);
            let ev = sym3_eigenvalues_raw(&m);
            for i in 0..3 {
                assert!((ev[i] - reference[i]).abs() < 1e-10, "{ev:?} vs {reference:?}");
            }
        }
    }

    #[test]
    fn smallest_vector_is_an_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let m = random_spd(&mut rng);
            let e = smallest_eigenpair(&m);
            let residual = (m * e.vector - e.vector * e.value).norm();
            assert!(residual < 1e-8, "residual {residual}");
            assert!((e.vector.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_eigenvalues_use_fallback() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0));
        let e = smallest_eigenpair(&m);
        assert!((e.value - 1.0).abs() < 1e-12);
        assert!((e.vector.norm() - 1.0).abs() < 1e-12);

        let r = Rotation3::from_euler_angles(0.3, -0.2, 1.1);
        let m = r.matrix() * Matrix3::from_diagonal(&Vector3::new(0.5, 0.5, 2.0)) * r.matrix().transpose();
        let e = smallest_eigenpair(&m);
        assert!(e.used_fallback);
        assert!((m * e.vector - e.vector * e.value).norm() < 1e-10);
    }

    #[test]
    fn jacobi_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = random_spd(&mut rng);
            let (vals, vecs) = jacobi_eigen(&m);
            let rebuilt = vecs * Matrix3::from_diagonal(&Vector3::from(vals)) * vecs.transpose();
            assert!((rebuilt - m).norm() < 1e-10);
        }
    }

    #[test]
    fn sign_canonicalization() {
        assert_eq!(canonicalize_sign(Vector3::new(0.1, -0.9, 0.2)), Vector3::new(-0.1, 0.9, -0.2));
        assert_eq!(canonicalize_sign(Vector3::new(-0.5, 0.5, 0.0)), Vector3::new(0.5, -0.5, 0.0));
    }
}
