use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a dense system is treated as rank deficient.
const RANK_TOL: f64 = 1e-13;

/// Solves `a x = b` by partial-pivot LU, rejecting numerically rank-deficient matrices.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let diag = lu.u().diagonal();
    let max = diag.amax();
    let min = diag.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if !(max > 0.0) || min <= RANK_TOL * max {
        return Err(Error::Singular(format!(
            "{what}: pivot ratio {:.3e}",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    lu.solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Solves the saddle-point system `[M Gᵀ; G 0] [a; −λ] = [f; h]` for `(a, λ)`.
pub fn solve_saddle(
    m: &DMatrix<f64>,
    g: &DMatrix<f64>,
    f: &DVector<f64>,
    h: &DVector<f64>,
    what: &str,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = m.nrows();
    let c = g.nrows();
    if c == 0 {
        return Ok((solve_dense(m, f, what)?, DVector::zeros(0)));
    }
    let mut k = DMatrix::zeros(n + c, n + c);
    k.view_mut((0, 0), (n, n)).copy_from(m);
    k.view_mut((0, n), (n, c)).copy_from(&g.transpose());
    k.view_mut((n, 0), (c, n)).copy_from(g);
    let mut rhs = DVector::zeros(n + c);
    rhs.rows_mut(0, n).copy_from(f);
    rhs.rows_mut(n, c).copy_from(h);
    let sol = solve_dense(&k, &rhs, what)?;
    Ok((sol.rows(0, n).into_owned(), -sol.rows(n, c).into_owned()))
}
