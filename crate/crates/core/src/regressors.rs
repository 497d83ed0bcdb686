//! Data matrices of the off-policy learner.
//!
//! A [`MomentTable`] holds one row of windowed moments per sample time; the
//! `assemble_*` functions turn it into least-squares rows for a given iterate.
//! Row `i` pairs with the unknown vector as follows:
//!
//! * full parameterization: `theta = [vech P; vec M; vech Lambda]` with
//!   `M = B'P + D'PC`, `Lambda = D'PD`;
//! * reduced (`D = 0`): `theta = [vech P; vec K]`;
//! * feedforward: `vartheta = [vec Pi; vec F]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sim::{GridDims, MomentGrid};
use crate::symquad::{self, HalfVec};

/// Default relative tolerance of the numerical rank.
pub const RANK_TOL: f64 = 1e-8;

/// Moments over `[t_i, t_i + T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    /// `E[chi chi']` at `t_i` and `t_i + T`.
    pub g0: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    /// `E ∫ chi chi'`.
    pub s: DMatrix<f64>,
    /// `E ∫ chi v'`, `n x m`.
    pub w: DMatrix<f64>,
    /// `∫ v v'`.
    pub v: DMatrix<f64>,
    /// `H S H'`.
    pub z: DMatrix<f64>,
    /// `E[x_d ⊗ chi]` difference across the window.
    pub delta_xd_chi: DVector<f64>,
    pub i_xd_chi: DVector<f64>,
    pub i_xd_v: DVector<f64>,
    /// `(I ⊗ H) ∫ E[x_d ⊗ chi]`, the output-side feedforward moment.
    pub i_xd_zeta: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub dims: GridDims,
    /// Output dimension of `H`.
    pub q: usize,
    pub window: f64,
    pub rows: Vec<MomentRow>,
}

impl MomentTable {
    /// Rows at sample indices `first, first + 1, ..., first + count - 1`.
    pub fn from_grid(
        grid: &MomentGrid,
        h: &DMatrix<f64>,
        first: usize,
        count: usize,
        window_samples: usize,
    ) -> Result<Self> {
        let d = grid.dims;
        if h.ncols() != d.n {
            return Err(Error::Dimension(format!("output map has {} columns, state has {}", h.ncols(), d.n)));
        }
        if window_samples == 0 {
            return Err(Error::WindowOutOfRange("window must span at least one sample".into()));
        }
        let last = first + count.saturating_sub(1) + window_samples;
        if count == 0 || last >= grid.len() {
            return Err(Error::WindowOutOfRange(format!(
                "rows {first}..{} with window {window_samples} need {} samples, grid has {}",
                first + count,
                last + 1,
                grid.len()
            )));
        }
        let lift = DMatrix::<f64>::identity(d.nd, d.nd).kronecker(h);
        let rows = (first..first + count)
            .map(|a| {
                let b = a + window_samples;
                let s = grid.s_between(a, b);
                let i_xd_chi = grid.xd_chi_between(a, b);
                MomentRow {
                    t: grid.time(a),
                    g0: grid.g(a),
                    g1: grid.g(b),
                    z: h * &s * h.transpose(),
                    s,
                    w: grid.w_between(a, b),
                    v: grid.v_between(a, b),
                    delta_xd_chi: grid.xd_chi_at(b) - grid.xd_chi_at(a),
                    i_xd_zeta: &lift * &i_xd_chi,
                    i_xd_chi,
                    i_xd_v: grid.xd_v_between(a, b),
                }
            })
            .collect();
        Ok(Self {
            dims: d,
            q: h.nrows(),
            window: window_samples as f64 * grid.sample_period,
            rows,
        })
    }

    /// Stacks tables from several data segments.
    pub fn concat(parts: &[MomentTable]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Dimension("no tables to concatenate".into()))?;
        let mut rows = Vec::new();
        for p in parts {
            if p.dims != first.dims || p.q != first.q {
                return Err(Error::Dimension("moment tables have different dimensions".into()));
            }
            rows.extend(p.rows.iter().cloned());
        }
        Ok(Self { rows, ..first.clone() })
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let rows = indices
            .iter()
            .map(|&i| {
                self.rows
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::WindowOutOfRange(format!("row {i} of {}", self.rows.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, ..self.clone() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn n_p(&self) -> usize {
        HalfVec::len_for(self.dims.n)
    }
}

fn check_gain(table: &MomentTable, k: &DMatrix<f64>) -> Result<()> {
    let d = table.dims;
    if k.shape() != (d.m, d.n) {
        return Err(Error::Dimension(format!("gain is {}x{}, expected {}x{}", k.nrows(), k.ncols(), d.m, d.n)));
    }
    Ok(())
}

fn check_square(x: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if x.shape() != (n, n) {
        return Err(Error::Dimension(format!("{what} is {}x{}, expected {n}x{n}", x.nrows(), x.ncols())));
    }
    Ok(())
}

fn set_row(out: &mut DMatrix<f64>, i: usize, offset: usize, vals: &DVector<f64>) {
    for (j, v) in vals.iter().enumerate() {
        out[(i, offset + j)] = *v;
    }
}

fn value_block(row: &MomentRow, shift: f64) -> DVector<f64> {
    symquad::h_form_raw(&row.g1) - symquad::h_form_raw(&row.g0) + symquad::h_form_raw(&row.s) * shift
}

/// Rows pairing with `[vech P; vec M; vech Lambda]` for the iterate built from
/// `k_prev` on `S(alpha)`.
///
/// With `alpha = gamma` these are the phase-II rows.
pub fn assemble_psi(table: &MomentTable, alpha: f64, alpha0: f64, k_prev: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_gain(table, k_prev)?;
    let d = table.dims;
    let (np, nm, nl) = (table.n_p(), d.n * d.m, HalfVec::len_for(d.m));
    let mut out = DMatrix::zeros(table.len(), np + nm + nl);
    for (i, row) in table.rows.iter().enumerate() {
        set_row(&mut out, i, 0, &value_block(row, alpha - alpha0));
        let ks = k_prev * &row.s;
        let mid = symquad::vec(&(&ks + row.w.transpose())) * -2.0;
        set_row(&mut out, i, np, &mid);
        let last = symquad::h_form_raw(&(&ks * k_prev.transpose())) - symquad::h_form_raw(&row.v);
        set_row(&mut out, i, np + nm, &last);
    }
    Ok(out)
}

/// Phase-II rows, `assemble_psi` at `alpha = gamma`.
pub fn assemble_phi(table: &MomentTable, gamma: f64, alpha0: f64, k_prev: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    assemble_psi(table, gamma, alpha0, k_prev)
}

/// Rows pairing with `[vech P; vec K]` when `D = 0`, so that `M = RK` and `Lambda = 0`.
pub fn assemble_psi_reduced(
    table: &MomentTable,
    alpha: f64,
    alpha0: f64,
    k_prev: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_gain(table, k_prev)?;
    let d = table.dims;
    check_square(r, d.m, "R")?;
    let np = table.n_p();
    let mut out = DMatrix::zeros(table.len(), np + d.n * d.m);
    for (i, row) in table.rows.iter().enumerate() {
        set_row(&mut out, i, 0, &value_block(row, alpha - alpha0));
        let mid = symquad::vec(&(r * (k_prev * &row.s + row.w.transpose()))) * -2.0;
        set_row(&mut out, i, np, &mid);
    }
    Ok(out)
}

/// Right-hand side `-<h_form(S), vech(K'RK + forcing)>` per row.
pub fn psi_rhs(table: &MomentTable, k_prev: &DMatrix<f64>, r: &DMatrix<f64>, forcing: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_gain(table, k_prev)?;
    check_square(forcing, table.dims.n, "forcing")?;
    let target = symquad::vech_raw(&(k_prev.transpose() * r * k_prev + forcing));
    Ok(DVector::from_iterator(
        table.len(),
        table.rows.iter().map(|row| -symquad::h_form_raw(&row.s).dot(&target)),
    ))
}

/// Phase-II right-hand side `-<h_form(S), vech(K'RK)> - <h_form(Z), vech(Q)>`.
pub fn phi_rhs(table: &MomentTable, k_prev: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_gain(table, k_prev)?;
    check_square(q, table.q, "Q")?;
    let krk = symquad::vech_raw(&(k_prev.transpose() * r * k_prev));
    let qv = symquad::vech_raw(q);
    Ok(DVector::from_iterator(
        table.len(),
        table
            .rows
            .iter()
            .map(|row| -symquad::h_form_raw(&row.s).dot(&krk) - symquad::h_form_raw(&row.z).dot(&qv)),
    ))
}

/// Feedforward rows pairing with `[vec Pi; vec F]`.
///
/// `rate = (gamma - alpha0) / 2` undoes the discount carried by `chi`.
pub fn assemble_xi(
    table: &MomentTable,
    k_star: &DMatrix<f64>,
    lambda_star: &DMatrix<f64>,
    r: &DMatrix<f64>,
    rate: f64,
) -> Result<DMatrix<f64>> {
    check_gain(table, k_star)?;
    let d = table.dims;
    check_square(lambda_star, d.m, "Lambda")?;
    check_square(r, d.m, "R")?;
    let eye = DMatrix::<f64>::identity(d.nd, d.nd);
    let weight = r + lambda_star;
    let on_state = eye.kronecker(&(&weight * k_star)) * -1.0;
    let on_input = eye.kronecker(&weight) * -1.0;
    let npi = d.n * d.nd;
    let mut out = DMatrix::zeros(table.len(), (d.n + d.m) * d.nd);
    for (i, row) in table.rows.iter().enumerate() {
        set_row(&mut out, i, 0, &(&row.delta_xd_chi + &row.i_xd_chi * rate));
        set_row(&mut out, i, npi, &(&on_state * &row.i_xd_chi + &on_input * &row.i_xd_v));
    }
    Ok(out)
}

/// Feedforward right-hand side `vec(Q)' (H_d ⊗ I) (I ⊗ H) ∫ E[x_d ⊗ chi]`.
pub fn xi_rhs(table: &MomentTable, h_d: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = table.dims;
    if h_d.shape() != (table.q, d.nd) {
        return Err(Error::Dimension(format!(
            "H_d is {}x{}, expected {}x{}",
            h_d.nrows(),
            h_d.ncols(),
            table.q,
            d.nd
        )));
    }
    check_square(q, table.q, "Q")?;
    let weights = h_d.transpose().kronecker(&DMatrix::<f64>::identity(table.q, table.q)) * symquad::vec(q);
    Ok(DVector::from_iterator(table.len(), table.rows.iter().map(|row| row.i_xd_zeta.dot(&weights))))
}

/// `[h_form(S), vec(W'), h_form(V)]`, the feedback excitation matrix.
pub fn feedback_excitation(table: &MomentTable) -> DMatrix<f64> {
    let d = table.dims;
    let (np, nm, nl) = (table.n_p(), d.n * d.m, HalfVec::len_for(d.m));
    let mut out = DMatrix::zeros(table.len(), np + nm + nl);
    for (i, row) in table.rows.iter().enumerate() {
        set_row(&mut out, i, 0, &symquad::h_form_raw(&row.s));
        set_row(&mut out, i, np, &symquad::vec(&row.w.transpose()));
        set_row(&mut out, i, np + nm, &symquad::h_form_raw(&row.v));
    }
    out
}

pub fn feedback_excitation_rank(table: &MomentTable) -> usize {
    let d = table.dims;
    table.n_p() + d.n * d.m + HalfVec::len_for(d.m)
}

/// `[∫ x_d ⊗ chi, ∫ x_d ⊗ v]`, the feedforward excitation matrix.
pub fn feedforward_excitation(table: &MomentTable) -> DMatrix<f64> {
    let d = table.dims;
    let mut out = DMatrix::zeros(table.len(), (d.n + d.m) * d.nd);
    for (i, row) in table.rows.iter().enumerate() {
        set_row(&mut out, i, 0, &row.i_xd_chi);
        set_row(&mut out, i, d.n * d.nd, &row.i_xd_v);
    }
    out
}

pub fn feedforward_excitation_rank(table: &MomentTable) -> usize {
    (table.dims.n + table.dims.m) * table.dims.nd
}

/// Feedback excitation with the shadow input: `[h_form(S), ∫ x_a ⊗ u_a]`.
pub fn shadow_feedback_excitation(plant: &MomentTable, shadow: &MomentTable) -> Result<DMatrix<f64>> {
    check_aligned(plant, shadow)?;
    let d = plant.dims;
    let np = plant.n_p();
    let mut out = DMatrix::zeros(plant.len(), np + d.n * d.m);
    for (i, (p, s)) in plant.rows.iter().zip(&shadow.rows).enumerate() {
        set_row(&mut out, i, 0, &symquad::h_form_raw(&p.s));
        set_row(&mut out, i, np, &symquad::vec(&s.w.transpose()));
    }
    Ok(out)
}

/// Feedforward excitation with the shadow pair: `[∫ x_d ⊗ chi, ∫ y_a ⊗ u_a]`.
pub fn shadow_feedforward_excitation(plant: &MomentTable, shadow: &MomentTable) -> Result<DMatrix<f64>> {
    check_aligned(plant, shadow)?;
    let d = plant.dims;
    let mut out = DMatrix::zeros(plant.len(), (d.n + d.m) * d.nd);
    for (i, (p, s)) in plant.rows.iter().zip(&shadow.rows).enumerate() {
        set_row(&mut out, i, 0, &p.i_xd_chi);
        set_row(&mut out, i, d.n * d.nd, &s.i_xd_v);
    }
    Ok(out)
}

fn check_aligned(plant: &MomentTable, shadow: &MomentTable) -> Result<()> {
    if plant.len() != shadow.len() || plant.dims != shadow.dims {
        return Err(Error::Dimension(format!(
            "plant table ({} rows) and shadow table ({} rows) are not aligned",
            plant.len(),
            shadow.len()
        )));
    }
    Ok(())
}

/// Coefficients of the two shadow feedback blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowForm {
    /// `-1` on the drift integral, `-2` on the input block: vanishes at the truth.
    #[default]
    Consistent,
    /// `-2` on the drift integral, `-1` on the input block. Kept for comparison.
    AsPrinted,
}

/// Shadow feedback rows pairing with `[vech P; vec K]`.
///
/// The table must come from the noise-free shadow `x_a' = A_a x_a + B u_a`
/// with no discount. In the consistent form a row vanishes on every
/// `[vech P; vec K]` with `RK = B'P`.
pub fn shadow_omega_k(
    shadow: &MomentTable,
    a_a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    form: ShadowForm,
) -> Result<DMatrix<f64>> {
    let (c_drift, c_input) = match form {
        ShadowForm::Consistent => (1.0, 2.0),
        ShadowForm::AsPrinted => (2.0, 1.0),
    };
    let d = shadow.dims;
    check_square(a_a, d.n, "A_a")?;
    check_square(r, d.m, "R")?;
    let np = shadow.n_p();
    let mut out = DMatrix::zeros(shadow.len(), np + d.n * d.m);
    for (i, row) in shadow.rows.iter().enumerate() {
        let drift = a_a * &row.s + &row.s * a_a.transpose();
        let first = symquad::h_form_raw(&row.g1) - symquad::h_form_raw(&row.g0) - symquad::h_form_raw(&drift) * c_drift;
        set_row(&mut out, i, 0, &first);
        set_row(&mut out, i, np, &(symquad::vec(&(r * row.w.transpose())) * -c_input));
    }
    Ok(out)
}

/// Shadow feedforward rows pairing with `[vec Pi; vec F]`.
///
/// The table's reference part must be `y_a' = F_a y_a`. A row vanishes on
/// every `[vec Pi; vec F]` with `RF = B'Pi`.
pub fn shadow_omega_f(
    shadow: &MomentTable,
    a_a: &DMatrix<f64>,
    f_a: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = shadow.dims;
    check_square(a_a, d.n, "A_a")?;
    check_square(f_a, d.nd, "F_a")?;
    check_square(r, d.m, "R")?;
    let gen = DMatrix::<f64>::identity(d.nd, d.nd).kronecker(a_a) + f_a.kronecker(&DMatrix::<f64>::identity(d.n, d.n));
    let on_input = DMatrix::<f64>::identity(d.nd, d.nd).kronecker(r) * -1.0;
    let npi = d.n * d.nd;
    let mut out = DMatrix::zeros(shadow.len(), (d.n + d.m) * d.nd);
    for (i, row) in shadow.rows.iter().enumerate() {
        set_row(&mut out, i, 0, &(&row.delta_xd_chi - &gen * &row.i_xd_chi));
        set_row(&mut out, i, npi, &(&on_input * &row.i_xd_v));
    }
    Ok(out)
}

/// Numerical rank with its singular spectrum.
///
/// Columns are scaled to unit norm first so that blocks of different physical
/// size are compared fairly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rows: usize,
    pub cols: usize,
    pub required: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// `sigma_required / sigma_max`; zero when the matrix is too small.
    pub margin: f64,
    pub tol: f64,
    pub pass: bool,
}

impl RankReport {
    pub fn into_error(self) -> Error {
        Error::RankDeficient { required: self.required, rank: self.rank, singular_values: self.singular_values }
    }

    /// `Ok` when the report passes, `RankDeficient` otherwise.
    pub fn require(self) -> Result<Self> {
        if self.pass { Ok(self) } else { Err(self.into_error()) }
    }
}

pub fn rank_report(matrix: &DMatrix<f64>, required: usize, tol: f64) -> RankReport {
    let mut scaled = matrix.clone();
    for mut col in scaled.column_iter_mut() {
        let nrm = col.norm();
        if nrm > 0.0 {
            col.unscale_mut(nrm);
        }
    }
    let sv = linalg::singular_values_desc(&scaled);
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 { sv.iter().filter(|s| **s > tol * top).count() } else { 0 };
    let margin = if top > 0.0 && required >= 1 && sv.len() >= required { sv[required - 1] / top } else { 0.0 };
    RankReport {
        rows: matrix.nrows(),
        cols: matrix.ncols(),
        required,
        rank,
        singular_values: sv,
        margin,
        tol,
        pass: rank >= required && matrix.nrows() >= required,
    }
}

/// Data matrices for one iterate, kept for export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorBundle {
    pub psi: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub psi_rhs: DVector<f64>,
    pub phi_rhs: DVector<f64>,
    pub xi_rhs: DVector<f64>,
    pub feedback_rank: RankReport,
    pub feedforward_rank: RankReport,
}

/// Everything `RegressorBundle::build` needs besides the table.
#[derive(Clone, Debug)]
pub struct BundleInputs<'a> {
    pub alpha: f64,
    pub alpha0: f64,
    pub gamma: f64,
    pub k_prev: &'a DMatrix<f64>,
    pub theta: &'a DMatrix<f64>,
    pub k_star: &'a DMatrix<f64>,
    pub lambda_star: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
    pub h_d: &'a DMatrix<f64>,
}

impl RegressorBundle {
    pub fn build(table: &MomentTable, inp: &BundleInputs<'_>) -> Result<Self> {
        let rate = 0.5 * (inp.gamma - inp.alpha0);
        Ok(Self {
            psi: assemble_psi(table, inp.alpha, inp.alpha0, inp.k_prev)?,
            phi: assemble_phi(table, inp.gamma, inp.alpha0, inp.k_prev)?,
            xi: assemble_xi(table, inp.k_star, inp.lambda_star, inp.r, rate)?,
            psi_rhs: psi_rhs(table, inp.k_prev, inp.r, inp.theta)?,
            phi_rhs: phi_rhs(table, inp.k_prev, inp.r, inp.q)?,
            xi_rhs: xi_rhs(table, inp.h_d, inp.q)?,
            feedback_rank: rank_report(&feedback_excitation(table), feedback_excitation_rank(table), RANK_TOL),
            feedforward_rank: rank_report(
                &feedforward_excitation(table),
                feedforward_excitation_rank(table),
                RANK_TOL,
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpi;
    use crate::model::{ReferenceGenerator, StochasticSystem};
    use crate::sim::{propagate_moments_exact, DataSpec, InputSignal, SimConfig};
    use crate::testutil;
    use proptest::prelude::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    fn max_rel_residual(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let res = a * x - b;
        (0..a.nrows())
            .map(|i| {
                let scale = a.row(i).abs().dot(&x.abs().transpose()) + b[i].abs();
                if scale > 0.0 { res[i].abs() / scale } else { 0.0 }
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_path_window_moments() {
        let zero = StochasticSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), mat(1, 2, &[1.0, 0.0])).unwrap();
        let x0 = DVector::from_vec(vec![1.5, -0.5]);
        let reference = ReferenceGenerator::new(s(0.0), s(1.0), DVector::from_element(1, 1.0)).unwrap();
        let input = InputSignal::Zero { channels: 1 };
        let spec = DataSpec { system: &zero, input: &input, x0: &x0, reference: &reference, discount: 0.0 };
        let cfg = SimConfig { h: 1e-2, sample_period: 1e-1, window: 1.0, t1: 0.0, n_samples: 5, n_paths: 1, base_seed: 0 };
        let grid = propagate_moments_exact(&spec, &cfg).unwrap();
        let table = MomentTable::from_grid(&grid, zero.h(), 0, 5, 10).unwrap();
        let xx = &x0 * x0.transpose();
        for row in &table.rows {
            assert!((&row.s - &xx).amax() < 1e-12);
            assert_eq!(row.w.amax(), 0.0);
            assert!(value_block(row, 0.0).amax() < 1e-12);
        }
        assert!(MomentTable::from_grid(&grid, zero.h(), 0, 6, 10).is_err());
    }

    #[test]
    fn zero_gain_zero_input_rows() {
        let ex = testutil::example_one();
        let table = ex.table_with_input(&InputSignal::Zero { channels: 1 }, 400);
        let k0 = DMatrix::zeros(1, 2);
        let psi = assemble_psi(&table, 0.4, 0.1, &k0).unwrap();
        for (i, row) in table.rows.iter().enumerate() {
            let first = value_block(row, 0.3);
            for j in 0..3 {
                assert_eq!(psi[(i, j)], first[j]);
            }
            for j in 3..6 {
                assert_eq!(psi[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn exact_moments_solve_the_first_phase_one_equation() {
        let ex = testutil::example_one();
        let table = ex.probing_table();
        let problem = &ex.problem;
        let hp = &problem.hyper;
        let one = bpi::run_phase1(problem).unwrap();
        let sys = &problem.system;
        let p1 = &one.trace[0].p;
        let m1 = sys.b().transpose() * p1 + sys.d().transpose() * p1 * sys.c();
        let l1 = sys.d().transpose() * p1 * sys.d();
        let theta = testutil::stack(&[symquad::vech_raw(p1), symquad::vec(&m1), symquad::vech_raw(&l1)]);
        let k0 = DMatrix::zeros(1, 2);
        let a = assemble_psi(&table, hp.alpha0, hp.alpha0, &k0).unwrap();
        let b = psi_rhs(&table, &k0, problem.cost.r(), &hp.theta).unwrap();
        assert!(max_rel_residual(&a, &theta, &b) < 1e-6);

        // a later iterate, on S(alpha_2) with K_2
        let (st, prev) = (&one.trace[2], &one.trace[1]);
        let m = sys.b().transpose() * &st.p + sys.d().transpose() * &st.p * sys.c();
        let l = sys.d().transpose() * &st.p * sys.d();
        let theta = testutil::stack(&[symquad::vech_raw(&st.p), symquad::vec(&m), symquad::vech_raw(&l)]);
        let a = assemble_psi(&table, prev.alpha, hp.alpha0, &prev.k).unwrap();
        let b = psi_rhs(&table, &prev.k, problem.cost.r(), &hp.theta).unwrap();
        assert!(max_rel_residual(&a, &theta, &b) < 1e-6);
    }

    #[test]
    fn exact_moments_solve_the_phase_two_and_feedforward_equations() {
        let ex = testutil::example_one();
        let table = ex.probing_table();
        let problem = &ex.problem;
        let hp = &problem.hyper;
        let sol = bpi::solve_tracking(problem).unwrap();
        let sys = &problem.system;
        let last = sol.history.len() - 1;
        let (st, prev) = (&sol.history[last], &sol.history[last - 1]);
        let m = sys.b().transpose() * &st.p + sys.d().transpose() * &st.p * sys.c();
        let l = sys.d().transpose() * &st.p * sys.d();
        let theta = testutil::stack(&[symquad::vech_raw(&st.p), symquad::vec(&m), symquad::vech_raw(&l)]);
        let a = assemble_phi(&table, hp.gamma, hp.alpha0, &prev.k).unwrap();
        let b = phi_rhs(&table, &prev.k, problem.cost.r(), problem.cost.q()).unwrap();
        assert!(max_rel_residual(&a, &theta, &b) < 1e-6);

        let xi = assemble_xi(&table, &sol.k_star, &sol.lambda_star, problem.cost.r(), hp.discount()).unwrap();
        let rhs = xi_rhs(&table, problem.reference.h_d(), problem.cost.q()).unwrap();
        let vartheta = testutil::stack(&[symquad::vec(&sol.pi_star), symquad::vec(&sol.f_star)]);
        assert!(max_rel_residual(&xi, &vartheta, &rhs) < 1e-6);
    }

    #[test]
    fn example_one_probing_data_is_interval_exciting() {
        let ex = testutil::example_one();
        let table = ex.probing_table();
        let fb = rank_report(&feedback_excitation(&table), 6, RANK_TOL);
        assert_eq!(feedback_excitation_rank(&table), 6);
        assert!(fb.pass && fb.margin > 0.0, "{fb:?}");
        let ff = rank_report(&feedforward_excitation(&table), 9, RANK_TOL);
        assert_eq!(feedforward_excitation_rank(&table), 9);
        assert!(ff.pass && ff.margin > 0.0, "{ff:?}");
    }

    #[test]
    fn zero_reference_gives_zero_feedforward_rows() {
        let ex = testutil::example_one();
        let quiet = ReferenceGenerator::new(
            ex.problem.reference.a_d().clone(),
            ex.problem.reference.h_d().clone(),
            DVector::zeros(3),
        )
        .unwrap();
        let table = ex.table_for(&ex.probing, &quiet, 300);
        let k = mat(1, 2, &[26.0, 7.6]);
        let xi = assemble_xi(&table, &k, &s(0.01), &s(0.01), 0.45).unwrap();
        assert_eq!(xi.amax(), 0.0);
        assert_eq!(xi_rhs(&table, quiet.h_d(), &s(10.0)).unwrap().amax(), 0.0);
    }

    #[test]
    fn doubling_h_d_doubles_the_feedforward_rhs() {
        let ex = testutil::example_one();
        let table = ex.table_with_input(&ex.probing, 300);
        let h1 = mat(1, 3, &[1.0, 0.3, -0.2]);
        let one = xi_rhs(&table, &h1, &s(10.0)).unwrap();
        let two = xi_rhs(&table, &(&h1 * 2.0), &s(10.0)).unwrap();
        assert_eq!(two, &one * 2.0);
    }

    #[test]
    fn rank_report_basics() {
        let eye = DMatrix::<f64>::identity(6, 6);
        let rep = rank_report(&eye, 6, RANK_TOL);
        assert!(rep.pass);
        assert!((rep.margin - 1.0).abs() < 1e-15);
        let mut dup = DMatrix::from_fn(10, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 + (i * j) as f64 * 0.1);
        let c0 = dup.column(0).into_owned();
        dup.set_column(3, &c0);
        let rep = rank_report(&dup, 4, RANK_TOL);
        assert!(!rep.pass);
        assert!(matches!(rep.require(), Err(Error::RankDeficient { required: 4, .. })));
        assert!(!rank_report(&DMatrix::identity(3, 3), 4, RANK_TOL).pass);
    }

    #[test]
    fn unexcited_state_noise_plant_is_rank_deficient() {
        let ex = testutil::example_two();
        let table = ex.plant_table();
        let rep = rank_report(&feedback_excitation(&table), feedback_excitation_rank(&table), RANK_TOL);
        assert!(!rep.pass);
        let k0 = DMatrix::zeros(1, 4);
        let psi = assemble_psi_reduced(&table, 0.1, 0.1, &k0, &s(1.0)).unwrap();
        assert!(!rank_report(&psi, psi.ncols(), RANK_TOL).pass);
    }

    #[test]
    fn shadow_rows_vanish_at_the_truth() {
        let ex = testutil::example_two();
        let shadow = ex.shadow_table();
        let sys = &ex.problem.system;
        let r = ex.problem.cost.r();
        let omega_k = shadow_omega_k(&shadow, &ex.a_a, r, ShadowForm::Consistent).unwrap();
        let sol = bpi::solve_tracking(&ex.problem).unwrap();
        for st in &sol.history {
            let theta = testutil::stack(&[symquad::vech_raw(&st.p), symquad::vec(&st.k)]);
            assert!(max_rel_residual(&omega_k, &theta, &DVector::zeros(shadow.len())) < 1e-6);
        }
        let printed = shadow_omega_k(&shadow, &ex.a_a, r, ShadowForm::AsPrinted).unwrap();
        let st = sol.history.last().unwrap();
        let theta = testutil::stack(&[symquad::vech_raw(&st.p), symquad::vec(&st.k)]);
        assert!(max_rel_residual(&printed, &theta, &DVector::zeros(shadow.len())) > 1e-2);

        let omega_f = shadow_omega_f(&shadow, &ex.a_a, &ex.f_a, r).unwrap();
        let vartheta = testutil::stack(&[symquad::vec(&sol.pi_star), symquad::vec(&sol.f_star)]);
        assert!(max_rel_residual(&omega_f, &vartheta, &DVector::zeros(shadow.len())) < 1e-6);
        assert!((sys.b().transpose() * &sol.pi_star - r * &sol.f_star).amax() < 1e-8);

        let short = shadow.select(&[0, 1, 2]).unwrap();
        assert!(shadow_feedback_excitation(&short, &shadow).is_err());
    }

    #[test]
    fn unforced_shadow_annihilates_any_gain_of_its_value() {
        let ex = testutil::example_two();
        let quiet = InputSignal::Zero { channels: 1 };
        let x_a0 = DVector::from_vec(vec![1.0, -0.5, 0.3, 0.2]);
        let shadow = ex.shadow_table_with(&quiet, &x_a0, 2.0);
        let r = ex.problem.cost.r();
        let omega = shadow_omega_k(&shadow, &ex.a_a, r, ShadowForm::Consistent).unwrap();
        let b = ex.problem.system.b();
        for seed in 0..5u64 {
            let raw = DMatrix::from_fn(4, 4, |i, j| (((i * 4 + j) as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0);
            let p = &raw * raw.transpose() + DMatrix::identity(4, 4);
            let k = r.clone().try_inverse().unwrap() * b.transpose() * &p;
            let theta = testutil::stack(&[symquad::vech_raw(&p), symquad::vec(&k)]);
            let res = &omega * &theta;
            for (i, row) in shadow.rows.iter().enumerate() {
                // every entry cancels, so compare with the size of the endpoint terms
                let scale = (row.g0.abs() + row.g1.abs()).sum() * p.amax();
                assert!(res[i].abs() <= 1e-6 * scale, "row {i}: {} vs {scale}", res[i]);
            }
        }
        let zero = ex.shadow_table_with(&quiet, &DVector::zeros(4), 2.0);
        assert_eq!(shadow_omega_k(&zero, &ex.a_a, r, ShadowForm::Consistent).unwrap().amax(), 0.0);
    }

    fn fabricated_row(vals: &[f64], scale: f64) -> MomentRow {
        let g = |o: usize| {
            let b = mat(2, 2, &vals[o..o + 4]);
            &b * b.transpose() * scale
        };
        let s = g(8);
        MomentRow {
            t: 0.0,
            g0: g(0),
            g1: g(4),
            z: mat(1, 2, &[1.0, 0.0]) * &s * mat(2, 1, &[1.0, 0.0]),
            s,
            w: mat(2, 1, &vals[12..14]) * scale,
            v: s_sq(vals[14]) * scale,
            delta_xd_chi: DVector::zeros(2),
            i_xd_chi: DVector::zeros(2),
            i_xd_v: DVector::zeros(1),
            i_xd_zeta: DVector::zeros(1),
        }
    }

    fn s_sq(v: f64) -> DMatrix<f64> {
        s(v * v)
    }

    fn fabricated_table(rows: Vec<MomentRow>) -> MomentTable {
        MomentTable { dims: GridDims { n: 2, m: 1, nd: 1 }, q: 1, window: 1.0, rows }
    }

    proptest! {
        #[test]
        fn psi_row_is_the_trace_identity(
            vals in proptest::collection::vec(-2.0f64..2.0, 15),
            pv in proptest::collection::vec(-2.0f64..2.0, 6),
            shift in -1.0f64..1.0,
        ) {
            let row = fabricated_row(&vals, 1.0);
            let k = mat(1, 2, &pv[0..2]);
            let p = {
                let b = mat(2, 2, &pv[2..6]);
                &b * b.transpose()
            };
            let mm = mat(1, 2, &[pv[1], pv[3]]);
            let lam = s(pv[4] * pv[4]);
            let table = fabricated_table(vec![row.clone()]);
            let psi = assemble_psi(&table, 0.1 + shift, 0.1, &k).unwrap();
            let theta = testutil::stack(&[symquad::vech_raw(&p), symquad::vec(&mm), symquad::vech_raw(&lam)]);
            let lhs = (psi.row(0) * &theta)[0];
            let ks = &k * &row.s;
            let expect = (&p * (&row.g1 - &row.g0)).trace() + shift * (&p * &row.s).trace()
                - 2.0 * ((&ks + row.w.transpose()).transpose() * &mm).trace()
                + (&lam * (&ks * k.transpose() - &row.v)).trace();
            prop_assert!((lhs - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }

        #[test]
        fn doubling_the_data_scales_rows_by_four(
            vals in proptest::collection::vec(-2.0f64..2.0, 15),
            kv in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let k = mat(1, 2, &kv);
            let one = fabricated_table(vec![fabricated_row(&vals, 1.0)]);
            let four = fabricated_table(vec![fabricated_row(&vals, 4.0)]);
            let a1 = assemble_psi(&one, 0.7, 0.1, &k).unwrap();
            let a4 = assemble_psi(&four, 0.7, 0.1, &k).unwrap();
            prop_assert!((a4 - a1 * 4.0).amax() <= 1e-12 * 40.0);
            let theta = DMatrix::identity(2, 2);
            let b1 = psi_rhs(&one, &k, &s(0.5), &theta).unwrap();
            let b4 = psi_rhs(&four, &k, &s(0.5), &theta).unwrap();
            prop_assert!((b4 - b1 * 4.0).amax() <= 1e-12 * 40.0);
        }

        #[test]
        fn reduced_rows_match_full_rows_when_m_is_rk(
            vals in proptest::collection::vec(-2.0f64..2.0, 15),
            kv in proptest::collection::vec(-2.0f64..2.0, 4),
            rr in 0.1f64..3.0,
        ) {
            let table = fabricated_table(vec![fabricated_row(&vals, 1.0)]);
            let k_prev = mat(1, 2, &kv[0..2]);
            let k_new = mat(1, 2, &kv[2..4]);
            let r = s(rr);
            let full = assemble_psi(&table, 0.5, 0.1, &k_prev).unwrap();
            let red = assemble_psi_reduced(&table, 0.5, 0.1, &k_prev, &r).unwrap();
            let p = DVector::from_vec(vec![1.0, 0.2, 0.7]);
            let tf = testutil::stack(&[p.clone(), symquad::vec(&(&r * &k_new)), DVector::zeros(1)]);
            let tr = testutil::stack(&[p, symquad::vec(&k_new)]);
            let a = (full.row(0) * tf)[0];
            let b = (red.row(0) * tr)[0];
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}
