//! Half-vectorization of symmetric matrices and the quadratic basis.
//!
//! `vech` lists the upper triangle row by row: `(1,1), (1,2), ..., (1,n),
//! (2,2), ..., (n,n)`. The companion map `h_form(M) = vech(2M - diag(M))`
//! turns trace pairings into dot products, `<vech(P), h_form(M)> = tr(PM)`,
//! so that `x'Px = <vech(P), h_form(xx')>`.
//!
//! `vec` is column-major, hence `vec(a b') = b ⊗ a`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance used when validating symmetric inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Half-vectorized symmetric matrix of order `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfVec {
    entries: DVector<f64>,
    dim: usize,
}

impl HalfVec {
    /// Length of the half-vectorization of an `n x n` matrix.
    pub const fn len_for(n: usize) -> usize {
        n * (n + 1) / 2
    }

    pub fn from_entries(entries: DVector<f64>, dim: usize) -> Result<Self> {
        if entries.len() != Self::len_for(dim) {
            return Err(Error::Dimension(format!(
                "half-vector of order {dim} needs {} entries, got {}",
                Self::len_for(dim),
                entries.len()
            )));
        }
        Ok(Self { entries, dim })
    }

    pub fn entries(&self) -> &DVector<f64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, other: &HalfVec) -> f64 {
        self.entries.dot(&other.entries)
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.entries
    }
}

/// Checks squareness and symmetry to [`SYMMETRY_TOL`] relative to the largest entry.
pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NonSquare { rows: m.nrows(), cols: m.ncols() });
    }
    let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let n = m.nrows();
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Asymmetric { asymmetry: asym });
    }
    Ok(())
}

pub(crate) fn vech_raw(s: &DMatrix<f64>) -> DVector<f64> {
    let n = s.nrows();
    let mut out = DVector::zeros(HalfVec::len_for(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = s[(i, j)];
            k += 1;
        }
    }
    out
}

pub(crate) fn h_form_raw(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(HalfVec::len_for(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j { m[(i, i)] } else { m[(i, j)] + m[(j, i)] };
            k += 1;
        }
    }
    out
}

pub(crate) fn unvech_raw(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            s[(i, j)] = v[k];
            s[(j, i)] = v[k];
            k += 1;
        }
    }
    s
}

/// Half-vectorization of a symmetric matrix.
pub fn vech(s: &DMatrix<f64>) -> Result<HalfVec> {
    check_symmetric(s)?;
    Ok(HalfVec { entries: vech_raw(s), dim: s.nrows() })
}

pub fn unvech(h: &HalfVec) -> DMatrix<f64> {
    unvech_raw(h.entries.as_slice(), h.dim)
}

/// `vech(2M - diag(M))` for symmetric `M`.
///
/// Off-diagonal slots carry `M_ij + M_ji`, which equals `2 M_ij` for symmetric input.
pub fn h_form(m: &DMatrix<f64>) -> Result<HalfVec> {
    check_symmetric(m)?;
    Ok(HalfVec { entries: h_form_raw(m), dim: m.nrows() })
}

/// Quadratic basis `h_form(x x')`, so that `<vech(P), quad_basis(x)> = x'Px`.
pub fn quad_basis(x: &DVector<f64>) -> HalfVec {
    let n = x.len();
    let mut out = DVector::zeros(HalfVec::len_for(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j { x[i] * x[i] } else { 2.0 * x[i] * x[j] };
            k += 1;
        }
    }
    HalfVec { entries: out, dim: n }
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot reshape {} entries into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// `a ⊗ b` for vectors.
pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            out[i * b.len() + j] = ai * bj;
        }
    }
    out
}

/// Kronecker product of matrices.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}
