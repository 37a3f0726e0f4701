//! Thin wrappers around the dense symmetric eigensolver.

use ndarray::Array2;

/// Eigendecomposition of a symmetric matrix; returns (eigenvalues,
/// eigenvectors as columns), sorted by descending eigenvalue.
pub fn symmetric_eigen(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let fm = faer::Mat::from_fn(n, n, |i, j| m[[i, j]]);
    let evd = fm.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = evd.s().column_vector();
    let u = evd.u();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.read(b).partial_cmp(&s.read(a)).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| s.read(i)).collect();
    let mut vectors = Array2::zeros((n, n));
    for (out_col, &src_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, out_col]] = u.read(r, src_col);
        }
    }
    (values, vectors)
}

/// Square-root factor F of a symmetric PSD matrix (F F^T = M), built from
/// the eigendecomposition with negative eigenvalues clipped to zero.
/// Suitable for rank-deficient covariances.
pub fn psd_sqrt_factor(m: &Array2<f64>) -> Array2<f64> {
    let (values, vectors) = symmetric_eigen(m);
    let n = m.nrows();
    let mut f = vectors;
    for (c, &v) in values.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        for r in 0..n {
            f[[r, c]] *= s;
        }
    }
    f
}
