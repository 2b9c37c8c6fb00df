//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for rank decisions.
pub(crate) const RANK_REL_TOL: f64 = 1e-10;

/// Solves the symmetric indefinite KKT system
/// `[H A^T; A 0] [dx; lam] = [r1; r2]` by LU with partial pivoting.
/// `h` is the diagonal of H. Returns `None` when the system is singular.
pub(crate) fn solve_kkt(
    h: &[f64],
    a: &DMatrix<f64>,
    r1: &DVector<f64>,
    r2: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.len();
    let m = a.nrows();
    let mut k = DMatrix::<f64>::zeros(n + m, n + m);
    for i in 0..n {
        k[(i, i)] = h[i];
    }
    for r in 0..m {
        for c in 0..n {
            k[(n + r, c)] = a[(r, c)];
            k[(c, n + r)] = a[(r, c)];
        }
    }
    let mut rhs = DVector::<f64>::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(r1);
    rhs.rows_mut(n, m).copy_from(r2);
    let sol = k.lu().solve(&rhs)?;
    let dx = DVector::from(sol.rows(0, n).into_owned());
    let lam = DVector::from(sol.rows(n, m).into_owned());
    if dx.iter().chain(lam.iter()).all(|v| v.is_finite()) {
        Some((dx, lam))
    } else {
        None
    }
}

/// Least-squares / least-norm solve via SVD (pseudo-inverse action).
pub(crate) fn svd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = RANK_REL_TOL * smax.max(1.0);
    svd.solve(b, eps).ok()
}

/// Numerical rank with a relative singular-value cutoff.
pub(crate) fn rank(a: &DMatrix<f64>) -> usize {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > RANK_REL_TOL * smax)
        .count()
}

/// Orthonormal basis of the null space of `a`, returned as rows with a
/// deterministic sign convention (first entry of magnitude above 1e-9 is
/// positive). Singular values at or below `rel_tol` times the largest are
/// treated as zero, so callers can match the cutoff to the noise level of
/// the rows they feed in.
pub(crate) fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> Vec<Vec<f64>> {
    let n = a.ncols();
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = rel_tol * smax.max(1.0);
    let mut basis = Vec::new();
    for r in 0..v_t.nrows() {
        let s = if r < svd.singular_values.len() {
            svd.singular_values[r]
        } else {
            0.0
        };
        if s <= eps {
            let mut row: Vec<f64> = (0..n).map(|c| v_t[(r, c)]).collect();
            if let Some(first) = row.iter().find(|v| v.abs() > 1e-9) {
                if *first < 0.0 {
                    row.iter_mut().for_each(|v| *v = -*v);
                }
            }
            basis.push(row);
        }
    }
    // v_t only carries min(m, n) rows; complete with an explicit projector
    // when the matrix is wide and rows are missing.
    let kept = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let expected = n - kept;
    if basis.len() < expected {
        return null_space_via_projector(a, expected);
    }
    basis
}

fn null_space_via_projector(a: &DMatrix<f64>, expected: usize) -> Vec<Vec<f64>> {
    // Read the null space off the eigen-decomposition of A^T A: the
    // eigenvectors attached to the smallest `expected` eigenvalues.
    let n = a.ncols();
    let gram = a.transpose() * a;
    let eig = gram.symmetric_eigen();
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| {
            let val = eig.eigenvalues[i];
            let vec: Vec<f64> = (0..n).map(|r| eig.eigenvectors[(r, i)]).collect();
            (val, vec)
        })
        .collect();
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut basis = Vec::new();
    for (_, mut vec) in pairs.into_iter().take(expected) {
        if let Some(first) = vec.iter().find(|v| v.abs() > 1e-9) {
            if *first < 0.0 {
                vec.iter_mut().for_each(|v| *v = -*v);
            }
        }
        basis.push(vec);
    }
    basis
}
