/// Solve a tridiagonal system with the Thomas algorithm.
///
/// `sub[k]` multiplies `x[k-1]` in row `k` (`sub[0]` is ignored), `sup[k]`
/// multiplies `x[k+1]` (`sup[n-1]` is ignored). No pivoting: callers must
/// supply a diagonally dominant or M-matrix system. Returns `None` on a zero
/// pivot.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    debug_assert!(sub.len() == n && sup.len() == n && rhs.len() == n);
    if n == 0 {
        return Some(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return None;
    }
    c[0] = sup[0] / beta;
    d[0] = rhs[0] / beta;
    for k in 1..n {
        beta = diag[k] - sub[k] * c[k - 1];
        if beta == 0.0 || !beta.is_finite() {
            return None;
        }
        c[k] = sup[k] / beta;
        d[k] = (rhs[k] - sub[k] * d[k - 1]) / beta;
    }
    for k in (0..n - 1).rev() {
        d[k] -= c[k] * d[k + 1];
    }
    Some(d)
}
