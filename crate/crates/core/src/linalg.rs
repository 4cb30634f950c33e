//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Initial ridge, as a fraction of the block's mean diagonal.
pub const RIDGE_START: f64 = 1e-8;
/// Largest ridge tried before giving up.
pub const RIDGE_MAX: f64 = 1e-4;

/// Extracts `a[rows, cols]`.
pub fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Cholesky factor of `a + δI` with `δ = 1e-8·tr(a)/n`, escalating `δ` tenfold on
/// failure up to `1e-4·tr(a)/n`.
pub fn ridge_cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::Singular("empty block".into()));
    }
    let scale = (a.trace() / n as f64).abs();
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut rel = RIDGE_START;
    while rel <= RIDGE_MAX * (1.0 + 1e-9) {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += rel * scale;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(chol);
        }
        rel *= 10.0;
    }
    Err(Error::Singular(format!("{n}x{n} block")))
}

/// Log-determinant from a Cholesky factor.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
///
/// Each eigenvector is signed so that its largest-magnitude entry is positive (first
/// such entry on ties), which makes the output reproducible.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = DVector::from_fn(n, |k, _| eig.eigenvalues[order[k]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(k, &(col * sign));
    }
    (values, vectors)
}

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues at
/// `floor_rel · λ_max`, then rescales so the original diagonal is restored.
pub fn project_psd(a: &DMatrix<f64>, floor_rel: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let (vals, vecs) = sorted_eigen(a);
    let top = vals.iter().cloned().fold(0.0_f64, f64::max);
    let floor = floor_rel * top.max(f64::MIN_POSITIVE);
    let clipped = DVector::from_fn(n, |i, _| vals[i].max(floor));
    let mut out = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let target = a[(i, i)];
            if out[(i, i)] > 0.0 && target > 0.0 {
                (target / out[(i, i)]).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] *= scale[i] * scale[j];
        }
    }
    symmetrize(&mut out);
    out
}

/// Overwrites `a` with `(a + aᵀ)/2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Empirical quantile of sorted data, linear interpolation between closest ranks.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorts a copy of `values` (NaN-free) and evaluates each quantile.
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    probs.iter().map(|&p| quantile_sorted(&sorted, p)).collect()
}

/// Solves the symmetric system `a x = b` through a ridge-repaired Cholesky factor.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(ridge_cholesky(a)?.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let v: Vec<f64> = (1..=5).map(f64::from).collect();
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.125), 1.5);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
    }

    #[test]
    fn eigen_sorted_and_signed() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let (vals, vecs) = sorted_eigen(&a);
        assert_eq!(vals.as_slice(), &[5.0, 2.0, 1.0]);
        assert_eq!(vecs[(1, 0)], 1.0);
        assert_eq!(vecs[(0, 1)], 1.0);
    }

    #[test]
    fn psd_projection_restores_diagonal() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        let p = project_psd(&a, 1e-6);
        let (vals, _) = sorted_eigen(&p);
        assert!(vals[2] > 0.0);
        for i in 0..3 {
            assert!((p[(i, i)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_rescues_singular_block() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(ridge_cholesky(&a).is_ok());
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ridge_cholesky(&z).is_err());
    }
}
