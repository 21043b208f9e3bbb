//! Small dense linear algebra for symmetric positive (semi)definite matrices.
//!
//! Problem sizes here are tiny (ambient dimensions of a few dozen at most),
//! so the routines are written for clarity and determinism rather than
//! throughput: an unblocked Cholesky, a cyclic Jacobi eigensolver, and
//! modified Gram–Schmidt. All reductions that feed statistical estimates go
//! through [`pairwise_sum`] so results do not depend on accumulation order.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Sums a slice with pairwise splitting.
///
/// Error grows like O(log n) in the length instead of O(n) for a running
/// sum, and the result is a pure function of the input order, which the
/// metrics layer relies on for reproducibility.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean.
///
/// The standard error uses the n−1 sample variance; a single observation
/// reports SE 0.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 0, "mean of an empty slice");
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Frobenius norm.
pub fn frobenius_norm(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::domain("cholesky requires a square matrix"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::SingularCovariance(format!(
                        "pivot {s:.3e} at index {i} is not positive"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solves L y = b for lower-triangular L.
pub fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solves Lᵀ x = y for lower-triangular L.
pub fn solve_lower_transpose(l: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves (L Lᵀ) x = b given the Cholesky factor L.
pub fn cholesky_solve(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, &y.view())
}

/// log det(L Lᵀ) from the Cholesky factor.
pub fn cholesky_logdet(l: &ArrayView2<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns, so `a = v · diag(w) · vᵀ`.
pub fn sym_eigen(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::domain("sym_eigen requires a square matrix"));
    }
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let scale = frobenius_norm(a).max(f64::MIN_POSITIVE);
    for _sweep in 0..128 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).expect("finite eigenvalues"));
    let w = Array1::from_shape_fn(n, |i| m[[order[i], order[i]]]);
    let vecs = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok((w, vecs))
}

/// Symmetric square root of a PSD matrix, with eigenvalues clipped at 0.
pub fn sym_sqrt(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (w, v) = sym_eigen(a)?;
    Ok(rescale_eigvecs(&w.mapv(|x| x.max(0.0).sqrt()), &v))
}

/// Symmetric inverse square root with a relative eigenvalue floor.
///
/// Eigenvalues below `floor_rel · λ_max` are lifted to the floor so that
/// near-degenerate directions do not blow up. Fails only when the matrix has
/// no positive eigenvalue at all.
pub fn sym_inv_sqrt(a: &ArrayView2<f64>, floor_rel: f64) -> Result<Array2<f64>> {
    let (w, v) = sym_eigen(a)?;
    let wmax = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(wmax > 0.0) {
        return Err(Error::SingularCovariance(
            "matrix has no positive eigenvalue".into(),
        ));
    }
    let floor = floor_rel * wmax;
    Ok(rescale_eigvecs(&w.mapv(|x| 1.0 / x.max(floor).sqrt()), &v))
}

fn rescale_eigvecs(scales: &Array1<f64>, v: &Array2<f64>) -> Array2<f64> {
    let mut scaled = v.clone();
    for (mut col, s) in scaled.columns_mut().into_iter().zip(scales.iter()) {
        col *= *s;
    }
    scaled.dot(&v.t())
}

/// An orthonormal basis of the orthogonal complement of the column span of
/// a D×d orthonormal frame, as the columns of a D×(D−d) matrix.
///
/// Computed from the eigenvectors of the projector I − UUᵀ, whose spectrum
/// is exactly {0, 1}; anything near ½ means the input was not a frame.
pub fn orthonormal_complement(u: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, d) = (u.nrows(), u.ncols());
    if d > n {
        return Err(Error::domain("frame has more columns than rows"));
    }
    let mut p = Array2::eye(n);
    p -= &u.dot(&u.t());
    let (w, v) = sym_eigen(&p.view())?;
    let kept: Vec<usize> = (0..n).filter(|&i| w[i] > 0.5).collect();
    if kept.len() != n - d {
        return Err(Error::domain(format!(
            "projector rank {} does not match D − d = {}; input is not orthonormal",
            kept.len(),
            n - d
        )));
    }
    Ok(Array2::from_shape_fn((n, n - d), |(r, c)| v[[r, kept[c]]]))
}

/// Orthonormalizes the columns of a full-column-rank matrix.
///
/// Modified Gram–Schmidt with one re-orthogonalization pass; each pivot is
/// sign-fixed so the map is deterministic and, applied to a Gaussian matrix,
/// produces a Haar-distributed orthonormal frame.
pub fn orthonormalize_columns(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, k) = (a.nrows(), a.ncols());
    if k > n {
        return Err(Error::domain(format!(
            "cannot orthonormalize {k} columns in dimension {n}"
        )));
    }
    let mut q = a.to_owned();
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.column(i).to_owned();
                let r = qi.dot(&q.column(j));
                let mut col = q.column_mut(j);
                col.scaled_add(-r, &qi);
            }
        }
        let mut col = q.column_mut(j);
        let norm = col.dot(&col).sqrt();
        if norm <= 1e-300 {
            return Err(Error::domain("rank-deficient matrix in orthonormalization"));
        }
        // Positive pivot sign: flip the column if its leading entry of the
        // original projects negatively, keeping the distribution Haar.
        let sign = if a.column(j).dot(&col) < 0.0 { -1.0 } else { 1.0 };
        col.mapv_inplace(|x| sign * x / norm);
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, stream};
    use ndarray::array;

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }

    #[test]
    fn mean_se_of_constant_is_zero_se() {
        let (m, se) = mean_se(&[2.5; 100]);
        assert_eq!(m, 2.5);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn cholesky_roundtrip() {
        let a = array![[4.0, 2.0, 0.5], [2.0, 5.0, 1.0], [0.5, 1.0, 3.0]];
        let l = cholesky(&a.view()).unwrap();
        let rebuilt = l.dot(&l.t());
        assert!(frobenius_norm(&(&rebuilt - &a).view()) < 1e-12);
        let b = array![1.0, -2.0, 0.5];
        let x = cholesky_solve(&l.view(), &b.view());
        let residual = a.dot(&x) - &b;
        assert!(residual.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_err());
    }

    #[test]
    fn jacobi_recovers_spectrum() {
        let mut rng = stream(11, 0);
        let g = normal_matrix(&mut rng, 6, 6);
        let a = g.dot(&g.t());
        let (w, v) = sym_eigen(&a.view()).unwrap();
        let rebuilt = v.dot(&Array2::from_diag(&w)).dot(&v.t());
        assert!(frobenius_norm(&(&rebuilt - &a).view()) < 1e-10 * frobenius_norm(&a.view()));
        let vtv = v.t().dot(&v);
        assert!(frobenius_norm(&(&vtv - &Array2::<f64>::eye(6)).view()) < 1e-12);
        assert!(w.windows(2).into_iter().all(|p| p[0] <= p[1]));
    }

    #[test]
    fn inv_sqrt_whitens() {
        let mut rng = stream(12, 0);
        let g = normal_matrix(&mut rng, 5, 5);
        let a = g.dot(&g.t()) + Array2::<f64>::eye(5);
        let w = sym_inv_sqrt(&a.view(), 1e-12).unwrap();
        let white = w.dot(&a).dot(&w.t());
        assert!(frobenius_norm(&(&white - &Array2::<f64>::eye(5)).view()) < 1e-10);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = array![[3.0, 1.0], [1.0, 2.0]];
        let r = sym_sqrt(&a.view()).unwrap();
        assert!(frobenius_norm(&(&r.dot(&r) - &a).view()) < 1e-12);
    }

    #[test]
    fn complement_completes_the_basis() {
        let mut rng = stream(14, 0);
        let g = normal_matrix(&mut rng, 6, 2);
        let u = orthonormalize_columns(&g.view()).unwrap();
        let c = orthonormal_complement(&u.view()).unwrap();
        assert_eq!(c.dim(), (6, 4));
        let ctc = c.t().dot(&c);
        assert!(frobenius_norm(&(&ctc - &Array2::<f64>::eye(4)).view()) < 1e-10);
        let cross = u.t().dot(&c);
        assert!(frobenius_norm(&cross.view()) < 1e-10);
        // Together they resolve the identity.
        let full = u.dot(&u.t()) + c.dot(&c.t());
        assert!(frobenius_norm(&(&full - &Array2::<f64>::eye(6)).view()) < 1e-10);
    }

    #[test]
    fn orthonormalize_produces_frame() {
        let mut rng = stream(13, 0);
        let g = normal_matrix(&mut rng, 8, 3);
        let q = orthonormalize_columns(&g.view()).unwrap();
        let qtq = q.t().dot(&q);
        assert!(frobenius_norm(&(&qtq - &Array2::<f64>::eye(3)).view()) < 1e-12);
    }
}
