//! Small dense helpers shared by the solver and the regression code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Moore-Penrose pseudo-inverse, discarding singular values below
/// `rel_tol × σ_max`.
pub(crate) fn pinv(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if a.is_empty() {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    if max == 0.0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    svd.pseudo_inverse(rel_tol * max).expect("both factors were computed")
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix via its
/// eigendecomposition.
pub(crate) fn pinv_psd(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        return DMatrix::zeros(n, n);
    }
    let inv: DVector<f64> = eig.eigenvalues.map(|v| if v > rel_tol * max { 1.0 / v } else { 0.0 });
    let scaled = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, j)] * inv[j]);
    &scaled * eig.eigenvectors.transpose()
}

/// `(I_n ⊗ w) · a` for a `k × k` block `w` and `a` with `n·k` rows.
pub(crate) fn block_diag_mul(w: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = w.nrows();
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for b in 0..a.nrows() / k {
        let prod = w * a.rows(b * k, k);
        out.rows_mut(b * k, k).copy_from(&prod);
    }
    out
}

pub(crate) fn block_diag_mul_vec(w: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let k = w.nrows();
    let mut out = DVector::zeros(v.len());
    for b in 0..v.len() / k {
        let prod = w * v.rows(b * k, k);
        out.rows_mut(b * k, k).copy_from(&prod);
    }
    out
}

/// Checks that `a` is square, symmetric and positive semidefinite.
pub(crate) fn is_symmetric_psd(a: &DMatrix<f64>) -> bool {
    if !a.is_square() || a.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    let eig = SymmetricEigen::new(a.clone());
    eig.eigenvalues.iter().all(|&v| v >= -1e-12 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_one() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let p = pinv(&a, 1e-12);
        let back = &a * &p * &a;
        assert!((back - &a).amax() < 1e-12);
        let ps = pinv_psd(&a, 1e-12);
        assert!((ps - p).amax() < 1e-12);
    }

    #[test]
    fn block_diag_product() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0]);
        let a = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let mut big = DMatrix::zeros(4, 4);
        big.view_mut((0, 0), (2, 2)).copy_from(&w);
        big.view_mut((2, 2), (2, 2)).copy_from(&w);
        assert_eq!(block_diag_mul(&w, &a), &big * &a);
        let v = DVector::from_vec(vec![1.0, -1.0, 0.5, 3.0]);
        assert_eq!(block_diag_mul_vec(&w, &v), &big * &v);
    }

    #[test]
    fn psd_check() {
        assert!(is_symmetric_psd(&DMatrix::identity(3, 3)));
        assert!(!is_symmetric_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])));
        assert!(!is_symmetric_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])));
    }
}
