//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Thin SVD with singular values in non-increasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd_sorted(m: &DMatrix<f64>) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    SortedSvd {
        u: DMatrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]),
        singular_values: DVector::from_fn(order.len(), |k, _| s[order[k]]),
        v_t: DMatrix::from_fn(order.len(), v_t.ncols(), |k, j| v_t[(order[k], j)]),
    }
}

/// Leading `r` principal components of `e` (rows = units, columns = periods).
///
/// Returns `(loadings, factors)` with `factorsᵀ·factors / T = I` and
/// `loadingsᵀ·loadings` diagonal in non-increasing order, so that
/// `loadings · factorsᵀ` is the best rank-`r` approximation of `e`.
pub fn leading_components(e: &DMatrix<f64>, r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, t) = e.shape();
    if r == 0 {
        return (DMatrix::zeros(n, 0), DMatrix::zeros(t, 0));
    }
    let gram = e.transpose() * e;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = (t as f64).sqrt();
    let mut factors = DMatrix::zeros(t, r);
    for (k, &col) in order.iter().take(r).enumerate() {
        let v = eig.eigenvectors.column(col);
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..t {
            factors[(j, k)] = sign * scale * v[j];
        }
    }
    let loadings = e * &factors / t as f64;
    (loadings, factors)
}

/// Least-squares solution of `a x ≈ b`, or `None` when `a` is rank
/// deficient.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    if a.nrows() < a.ncols() {
        return None;
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let tol = diag_max * 1e-10 * a.nrows().max(a.ncols()) as f64;
    if diag_max == 0.0 || r.diagonal().iter().any(|d| d.abs() <= tol) {
        return None;
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
}

/// Minimum-norm least-squares solution; singular directions below a
/// relative threshold are dropped instead of failing.
pub fn least_squares_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 || a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return DVector::zeros(a.ncols());
    }
    svd.solve(b, smax * 1e-12).expect("u and v_t were computed")
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().sum()
}
