//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest and largest jitter, relative to `trace / N`.
pub const JITTER_FLOOR: f64 = 1e-12;
pub const JITTER_CAP: f64 = 1e-6;

/// Plain Cholesky factorization `A = L L^T`. On failure returns the pivot
/// index and the offending (non-positive) pivot value.
pub fn cholesky(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, (usize, f64)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    // Crout on the upper factor so that every inner product runs over
    // contiguous column slices.
    let mut u = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            let (ci, cj) = (u.column(i), u.column(j));
            let dot: f64 = ci.rows(0, i).dot(&cj.rows(0, i));
            let uii = u[(i, i)];
            u[(i, j)] = (a[(i, j)] - dot) / uii;
        }
        let cj = u.column(j);
        let d = a[(j, j)] - cj.rows(0, j).norm_squared();
        if !(d > 0.0) || !d.is_finite() {
            return Err((j, d));
        }
        u[(j, j)] = d.sqrt();
    }
    Ok(u.transpose())
}

/// Cholesky with diagonal jitter escalation: jitter 0 first, then
/// `1e-12 * trace/N` growing by 10x up to `1e-6 * trace/N`.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = a.nrows();
    let trace = a.trace();
    let scale = if trace > 0.0 { trace / n as f64 } else { 1.0 };
    let mut last = match cholesky(a) {
        Ok(l) => return Ok((l, 0.0)),
        Err(e) => e,
    };
    let mut rel = JITTER_FLOOR;
    let mut jitter = 0.0;
    while rel <= JITTER_CAP * (1.0 + 1e-9) {
        jitter = rel * scale;
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        match cholesky(&shifted) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = e,
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        pivot: last.0,
        value: last.1,
        jitter,
    })
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for j in 0..n {
        let xj = x[j] / l[(j, j)];
        x[j] = xj;
        if xj != 0.0 {
            for i in (j + 1)..n {
                x[i] -= l[(i, j)] * xj;
            }
        }
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for j in (0..n).rev() {
        let col = l.column(j);
        let dot = col.rows(j + 1, n - j - 1).dot(&x.rows(j + 1, n - j - 1));
        x[j] = (x[j] - dot) / l[(j, j)];
    }
    x
}

/// Solves `(L L^T) x = b`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from the
/// all-ones vector.
pub fn power_iteration(q: &DMatrix<f64>, iters: usize) -> f64 {
    let n = q.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..iters {
        let qv = q * &v;
        let norm = qv.norm();
        if norm == 0.0 || !norm.is_finite() {
            // all-ones can be orthogonal to the range; fall back to a bound
            return gershgorin_bound(q);
        }
        est = v.dot(&qv);
        v = qv / norm;
    }
    est.max((q * &v).norm())
}

/// Max absolute row sum; an upper bound on the spectral radius.
pub fn gershgorin_bound(q: &DMatrix<f64>) -> f64 {
    (0..q.nrows())
        .map(|i| q.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = 0.5 * (a + a.transpose());
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Submatrix on the given row/column index set.
pub fn principal_submatrix(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
}

pub fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Max-norm of `A - B`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Euclidean projection onto `{x : sum |x_i| <= radius}` (sort-based).
pub fn project_l1_ball(v: &mut [f64], radius: f64) {
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= radius {
        return;
    }
    if radius <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - radius) / (k + 1) as f64;
        if *m > t {
            theta = t;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - theta).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reports_pivot() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (pivot, value) = cholesky(&a).unwrap_err();
        assert_eq!(pivot, 1);
        assert!((value + 3.0).abs() < 1e-12);
        assert!(matches!(
            cholesky_jittered(&a),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn jitter_rescues_rank_deficient() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let (l, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0 && jitter <= JITTER_CAP * a.trace() / 3.0);
        let mut shifted = a.clone();
        for i in 0..3 {
            shifted[(i, i)] += jitter;
        }
        assert!(max_abs_diff(&(&l * l.transpose()), &shifted) < 1e-10);
    }

    #[test]
    fn triangular_solves() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let l = cholesky(&a).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = cholesky_solve(&l, &b);
        assert!((&a * &x - &b).norm() < 1e-12);
    }

    #[test]
    fn l1_projection() {
        let mut v = vec![3.0, -1.0, 0.5];
        project_l1_ball(&mut v, 2.0);
        assert!((v.iter().map(|x| x.abs()).sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(v, vec![2.0, 0.0, 0.0]);
        let mut w = vec![1.0, -1.0, 1.0];
        project_l1_ball(&mut w, 1.5);
        assert!(w.iter().zip([0.5, -0.5, 0.5]).all(|(a, b)| (a - b).abs() < 1e-12));
        let mut u = vec![0.1, 0.2];
        project_l1_ball(&mut u, 1.0);
        assert_eq!(u, vec![0.1, 0.2]);
    }

    #[test]
    fn power_iteration_matches_eigen() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let (vals, _) = sorted_eigen(&a);
        assert!((power_iteration(&a, 200) - vals[0]).abs() < 1e-9);
    }
}
