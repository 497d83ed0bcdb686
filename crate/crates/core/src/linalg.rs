//! Small dense kernels shared by the solvers and learners.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub(crate) fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub(crate) fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

pub(crate) fn lambda_max(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().expect("non-empty matrix")
}

/// Solves `S X = rhs` for symmetric positive definite `S` by Cholesky.
pub(crate) fn spd_solve(s: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(s);
    let min_eig = lambda_min(&sym);
    if !(min_eig > 0.0) {
        return Err(Error::NonInvertible { what, min_eig });
    }
    let chol = sym
        .cholesky()
        .ok_or(Error::NonInvertible { what, min_eig })?;
    Ok(chol.solve(rhs))
}

pub(crate) fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values_desc(m).first().copied().unwrap_or(0.0)
}

pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values_desc(m);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Result of a pivoted-QR least-squares solve.
pub(crate) struct LeastSquares {
    pub solution: DVector<f64>,
    /// Euclidean norm of `A x - b`.
    pub residual: f64,
}

/// Minimizes `|A x - b|` with Householder QR and column-norm pivoting.
///
/// Columns are equilibrated to unit norm before factorization. Fails with
/// `RankDeficient` when a pivot falls below `rank_tol` times the leading pivot.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rank_tol: f64) -> Result<LeastSquares> {
    let (rows, cols) = a.shape();
    assert_eq!(rows, b.len(), "lstsq: right-hand side length");
    if rows < cols {
        return Err(Error::RankDeficient {
            required: cols,
            rank: rows,
            singular_values: singular_values_desc(a),
        });
    }

    let scale: Vec<f64> = (0..cols)
        .map(|j| {
            let nrm = a.column(j).norm();
            if nrm > 0.0 { nrm } else { 1.0 }
        })
        .collect();
    let mut work = a.clone();
    for (j, s) in scale.iter().enumerate() {
        work.column_mut(j).unscale_mut(*s);
    }
    let mut rhs = b.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut col_norms: Vec<f64> = (0..cols).map(|j| work.column(j).norm_squared()).collect();
    let mut lead = 0.0;

    for k in 0..cols {
        // pivot on the largest remaining column norm
        let (piv, _) = col_norms[k..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let piv = piv + k;
        if piv != k {
            work.swap_columns(k, piv);
            col_norms.swap(k, piv);
            perm.swap(k, piv);
        }

        let alpha = {
            let x = work.view((k, k), (rows - k, 1));
            let nrm = x.norm();
            if x[(0, 0)] > 0.0 { -nrm } else { nrm }
        };
        if k == 0 {
            lead = alpha.abs();
        }
        if !(alpha.abs() > rank_tol * lead) || lead == 0.0 {
            return Err(Error::RankDeficient {
                required: cols,
                rank: k,
                singular_values: singular_values_desc(a),
            });
        }

        let mut v: DVector<f64> = work.view((k, k), (rows - k, 1)).column(0).into_owned();
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for j in k..cols {
                let mut col = work.column_mut(j);
                let mut col = col.rows_mut(k, rows - k);
                let dot = v.dot(&col);
                col.axpy(-2.0 * dot / vnorm2, &v, 1.0);
            }
            let mut tail = rhs.rows_mut(k, rows - k);
            let dot = v.dot(&tail);
            tail.axpy(-2.0 * dot / vnorm2, &v, 1.0);
        }
        for j in (k + 1)..cols {
            col_norms[j] = work.view((k + 1, j), (rows - k - 1, 1)).norm_squared();
        }
    }

    let mut z = DVector::zeros(cols);
    for i in (0..cols).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..cols {
            acc -= work[(i, j)] * z[j];
        }
        z[i] = acc / work[(i, i)];
    }
    let mut solution = DVector::zeros(cols);
    for (k, &orig) in perm.iter().enumerate() {
        solution[orig] = z[k] / scale[orig];
    }
    let residual = (a * &solution - b).norm();
    Ok(LeastSquares { solution, residual })
}
