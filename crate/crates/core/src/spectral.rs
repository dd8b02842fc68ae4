//! Dense symmetric eigendecomposition.
//!
//! Matrices up to [`JACOBI_MAX_DIM`] are diagonalized with cyclic Jacobi
//! rotations; larger ones go through nalgebra's tridiagonal QR solver. Both
//! paths share the same output normalization: eigenvalues in descending
//! order, and every eigenvector's first non-negligible component positive.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension handled by the in-house Jacobi solver.
pub const JACOBI_MAX_DIM: usize = 256;

/// Symmetry tolerance accepted by [`eig_sym`].
pub const SYMMETRY_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues (descending) and matching orthonormal eigenvector columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDecomp {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Rebuilds `V diag(f(lambda)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let w = f(lam);
            scaled.column_mut(k).scale_mut(w);
        }
        let out = &scaled * self.eigenvectors.transpose();
        // symmetrize to kill round-off asymmetry
        DMatrix::from_fn(n, n, |i, j| 0.5 * (out[(i, j)] + out[(j, i)]))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(|l| l)
    }
}

/// Largest absolute difference between `m` and its transpose.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL || asym.is_nan() {
        return Err(Error::Asymmetric {
            max_asymmetry: asym,
        });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix.
pub fn eig_sym(m: &DMatrix<f64>) -> Result<SpectralDecomp> {
    check_symmetric(m)?;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    let n = m.nrows();
    let (values, vectors) = if n <= JACOBI_MAX_DIM {
        jacobi(m)?
    } else {
        let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
        let eig = sym.symmetric_eigen();
        (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
    };
    Ok(normalize(values, vectors))
}

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let decomp = eig_sym(m)?;
    Ok(decomp
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, &l| acc.max(l.abs())))
}

/// Cyclic Jacobi sweeps on a row-major copy. Returns unsorted eigenpairs.
fn jacobi(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let mut a: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            0.5 * (m[(i, j)] + m[(j, i)])
        })
        .collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frob == 0.0 {
        return Ok((vec![0.0; n], DMatrix::identity(n, n)));
    }
    let target = 1e-15 * frob;

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // rotation already below representable precision
                if apq.abs() <= 1e-3 * f64::EPSILON * app.abs().min(aqq.abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }
    let values = (0..n).map(|i| a[i * n + i]).collect();
    Ok((values, DMatrix::from_row_slice(n, n, &v)))
}

/// Descending order, deterministic sign per eigenvector.
fn normalize(values: Vec<f64>, vectors: DMatrix<f64>) -> SpectralDecomp {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[y].total_cmp(&values[x]).then(x.cmp(&y)));

    let mut eigenvectors = DMatrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(values[src]);
        let mut col = vectors.column(src).into_owned();
        let scale = col.amax();
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12 * scale.max(1e-300)) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        eigenvectors.set_column(dst, &col);
    }
    SpectralDecomp {
        eigenvalues,
        eigenvectors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    fn residuals(m: &DMatrix<f64>, d: &SpectralDecomp) -> (f64, f64) {
        let n = m.nrows();
        let recon = (d.reconstruct() - m).norm();
        let ortho = (d.eigenvectors.transpose() * &d.eigenvectors - DMatrix::identity(n, n)).norm();
        (recon, ortho)
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let d = eig_sym(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(d.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_sorted_with_permuted_basis() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let d = eig_sym(&m).unwrap();
        assert_eq!(d.eigenvalues, vec![3.0, 2.0, 1.0]);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.eigenvectors, expected);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        for seed in 0..20 {
            let m = random_symmetric(8, seed);
            let d = eig_sym(&m).unwrap();
            let (recon, ortho) = residuals(&m, &d);
            assert!(recon <= 1e-8 * m.norm().max(1.0), "recon {recon}");
            assert!(ortho <= 1e-8, "ortho {ortho}");
            assert!(d.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn jacobi_agrees_with_nalgebra() {
        let m = random_symmetric(30, 99);
        let ours = eig_sym(&m).unwrap();
        let mut theirs: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (x, y) in ours.eigenvalues.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-11, "{x} vs {y}");
        }
    }

    #[test]
    fn large_matrices_use_fallback_path() {
        let n = JACOBI_MAX_DIM + 4;
        let m = random_symmetric(n, 5);
        let d = eig_sym(&m).unwrap();
        let (recon, ortho) = residuals(&m, &d);
        assert!(recon <= 1e-8 * m.norm());
        assert!(ortho <= 1e-8);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 1.0]);
        assert!(matches!(eig_sym(&m), Err(Error::Asymmetric { .. })));
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(eig_sym(&rect), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn deterministic_bits() {
        let m = random_symmetric(12, 3);
        assert_eq!(eig_sym(&m).unwrap(), eig_sym(&m).unwrap());
    }

    #[test]
    fn sign_convention_first_component_positive() {
        let d = eig_sym(&random_symmetric(6, 11)).unwrap();
        for col in d.eigenvectors.column_iter() {
            let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
        let m = DMatrix::identity(4, 4) * -2.0;
        assert!((spectral_norm(&m).unwrap() - 2.0).abs() < 1e-15);
        let u = nalgebra::DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let rank1 = &u * u.transpose();
        assert!((spectral_norm(&rank1).unwrap() - u.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_matches_power_iteration() {
        for seed in 0..10 {
            let m = random_symmetric(10, 100 + seed);
            // power iteration on M^2 converges to the dominant |eigenvalue|
            let m2 = &m * &m;
            let mut x = nalgebra::DVector::from_fn(10, |i, _| 1.0 + i as f64 * 0.1);
            for _ in 0..20_000 {
                x = &m2 * &x;
                x /= x.norm();
            }
            let power = (&m * &x).norm();
            let ours = spectral_norm(&m).unwrap();
            assert!((power - ours).abs() < 1e-7, "{power} vs {ours}");
        }
    }
}
