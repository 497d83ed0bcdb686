//! Dense kernels: generalized Lyapunov, SARE residual, Sylvester and the gain/α updates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, CostWeights, ParameterizedSystem, StabilityCertificate, StochasticSystem};
use crate::symquad;

/// Condition number above which a dense solve is declared singular.
pub const SINGULAR_COND: f64 = 1e12;

/// Eigenvalue sums closer to zero than this make the Sylvester operator singular.
pub const RESONANCE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSolution {
    pub p: DMatrix<f64>,
    pub residual_norm: f64,
    pub certificate: StabilityCertificate,
}

/// Solves `L_[K;S(alpha)](P) + K'RK + qmat = 0` on the `vech` coordinates.
pub fn solve_gen_lyap(
    sys: &ParameterizedSystem,
    k: &DMatrix<f64>,
    r: &DMatrix<f64>,
    qmat: &DMatrix<f64>,
) -> Result<LyapunovSolution> {
    let n = sys.base.n();
    if qmat.shape() != (n, n) || r.shape() != (sys.base.m(), sys.base.m()) {
        return Err(Error::Dimension(format!(
            "forcing must be {n}x{n} and R must be {m}x{m}",
            m = sys.base.m()
        )));
    }
    let op = sys.operator(k)?;
    let mat = op.matrix();
    let abscissa = model::eigenvalues(&mat)?
        .iter()
        .map(|(re, _)| *re)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(abscissa < 0.0) {
        return Err(Error::NotStabilizing { abscissa });
    }
    let cond = linalg::condition_number(&mat);
    if cond > SINGULAR_COND {
        return Err(Error::SingularOperator { cond });
    }

    let forcing = linalg::symmetrize(&(k.transpose() * r * k + qmat));
    let rhs = -symquad::vech_raw(&forcing);
    let ls = linalg::lstsq(&mat, &rhs, 1e-14)?;
    let p = symquad::unvech_raw(ls.solution.as_slice(), n);
    let residual = op.apply(&p) + &forcing;
    Ok(LyapunovSolution {
        p,
        residual_norm: residual.norm(),
        certificate: StabilityCertificate { abscissa, margin: 0.0, stabilizing: true },
    })
}

/// `K(P) = (R + D'PD)^{-1}(B'P + D'PC)`.
pub fn gain_update(sys: &StochasticSystem, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lhs = r + sys.d().transpose() * p * sys.d();
    let rhs = sys.b().transpose() * p + sys.d().transpose() * p * sys.c();
    linalg::spd_solve(&lhs, &rhs, "R + D'PD")
}

/// `alpha + eta * lambda_min(K'RK + forcing) / lambda_max(P)`.
pub fn alpha_update(
    alpha: f64,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    r: &DMatrix<f64>,
    eta: f64,
    forcing: &DMatrix<f64>,
) -> Result<f64> {
    let min_eig = linalg::lambda_min(p);
    if !(min_eig > 0.0) {
        return Err(Error::NonPositiveP { min_eig });
    }
    let max_eig = linalg::lambda_max(p);
    let num = linalg::lambda_min(&(k.transpose() * r * k + forcing));
    Ok(alpha + eta * num / max_eig)
}

/// Which algebraic form of the Riccati equation to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SareForm {
    /// `A'P + PA + H'QH + C'PC - (PB + C'PD)(R + D'PD)^{-1}(B'P + D'PC)`
    #[default]
    Consistent,
    /// Same with `Q` in place of `H'QH` and `-C'PC`; `Q` must then be `n x n`.
    AsPrinted,
}

pub fn sare_residual_matrix(
    sys: &StochasticSystem,
    cost: &CostWeights,
    p: &DMatrix<f64>,
    form: SareForm,
) -> Result<DMatrix<f64>> {
    let (a, b, c, d, h) = (sys.a(), sys.b(), sys.c(), sys.d(), sys.h());
    let gain_rhs = b.transpose() * p + d.transpose() * p * c;
    let lhs = cost.r() + d.transpose() * p * d;
    let k = linalg::spd_solve(&lhs, &gain_rhs, "R + D'PD")?;
    let ctpc = c.transpose() * p * c;
    let base = a.transpose() * p + p * a;
    let res = match form {
        SareForm::Consistent => base + h.transpose() * cost.q() * h + ctpc - gain_rhs.transpose() * k,
        SareForm::AsPrinted => {
            if cost.q().shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "printed form adds Q directly and needs it {}x{}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            base + cost.q() - ctpc - gain_rhs.transpose() * k
        }
    };
    Ok(res)
}

/// Frobenius norm of the SARE residual at `P`.
pub fn sare_residual(sys: &StochasticSystem, cost: &CostWeights, p: &DMatrix<f64>, form: SareForm) -> Result<f64> {
    Ok(sare_residual_matrix(sys, cost, p, form)?.norm())
}

/// Solves `A_c' Pi + Pi A_d = rhs` through `(I ⊗ A_c' + A_d' ⊗ I) vec(Pi) = vec(rhs)`.
pub fn solve_sylvester(a_c: &DMatrix<f64>, a_d: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a_c.nrows();
    let nd = a_d.nrows();
    if !a_c.is_square() || !a_d.is_square() || rhs.shape() != (n, nd) {
        return Err(Error::Dimension(format!(
            "Sylvester data: A_c {:?}, A_d {:?}, rhs {:?}",
            a_c.shape(),
            a_d.shape(),
            rhs.shape()
        )));
    }
    let ev_c = model::eigenvalues(a_c)?;
    let ev_d = model::eigenvalues(a_d)?;
    let mut gap = f64::INFINITY;
    for (cr, ci) in &ev_c {
        for (dr, di) in &ev_d {
            gap = gap.min(((cr + dr).powi(2) + (ci + di).powi(2)).sqrt());
        }
    }
    if gap < RESONANCE_TOL {
        return Err(Error::ResonantSpectra { gap });
    }
    let sylv = DMatrix::<f64>::identity(nd, nd).kronecker(&a_c.transpose())
        + a_d.transpose().kronecker(&DMatrix::<f64>::identity(n, n));
    let cond = linalg::condition_number(&sylv);
    if cond > SINGULAR_COND {
        return Err(Error::SingularOperator { cond });
    }
    let vec_rhs = symquad::vec(rhs);
    let sol = sylv
        .lu()
        .solve(&vec_rhs)
        .ok_or(Error::SingularOperator { cond: f64::INFINITY })?;
    symquad::unvec(&sol, n, nd)
}

/// `F = (R + D'PD)^{-1} B' Pi`.
pub fn ff_from_pi(sys: &StochasticSystem, r: &DMatrix<f64>, p_star: &DMatrix<f64>, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lhs = r + sys.d().transpose() * p_star * sys.d();
    linalg::spd_solve(&lhs, &(sys.b().transpose() * pi), "R + D'PD")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StochasticSystem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(a: f64, b: f64, c: f64, d: f64) -> StochasticSystem {
        StochasticSystem::new(s(a), s(b), s(c), s(d), s(1.0)).unwrap()
    }

    fn example_one() -> StochasticSystem {
        StochasticSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -5.0, -0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.2, 0.3]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn scalar_lyapunov_closed_forms() {
        let sol = solve_gen_lyap(&scalar(-1.0, 0.0, 0.5, 0.0).parameterized(1.0, 1.0), &s(0.0), &s(1.0), &s(1.75)).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(sol.residual_norm < 1e-14);
        let sol = solve_gen_lyap(&scalar(-1.0, 0.0, 0.0, 0.0).parameterized(1.0, 1.0), &s(1.0), &s(2.0), &s(0.0)).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable_operator() {
        let err = solve_gen_lyap(&scalar(1.0, 0.0, 0.0, 0.0).parameterized(1.0, 1.0), &s(0.0), &s(1.0), &s(1.0));
        assert!(matches!(err, Err(Error::NotStabilizing { .. })));
    }

    #[test]
    fn gain_update_scalars() {
        let k = gain_update(&scalar(0.0, 2.0, 0.0, 0.0), &s(1.0), &s(3.0)).unwrap();
        assert_eq!(k[(0, 0)], 6.0);
        let k = gain_update(&scalar(0.0, 1.0, 1.0, 1.0), &s(1.0), &s(1.0)).unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(gain_update(&scalar(0.0, 1.0, 0.0, 1.0), &s(-1.0), &s(0.5)).is_err());
    }

    #[test]
    fn alpha_update_arithmetic() {
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 1.0]));
        let a = alpha_update(0.1, &p, &DMatrix::zeros(1, 2), &s(1.0), 0.95, &(DMatrix::identity(2, 2) * 10.0)).unwrap();
        assert!((a - 2.0).abs() < 1e-14);
        let a = alpha_update(0.0, &DMatrix::identity(2, 2), &DMatrix::zeros(1, 2), &s(1.0), 0.5, &DMatrix::identity(2, 2)).unwrap();
        assert!((a - 0.5).abs() < 1e-15);
        let bad = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            alpha_update(0.0, &bad, &DMatrix::zeros(1, 2), &s(1.0), 0.5, &DMatrix::identity(2, 2)),
            Err(Error::NonPositiveP { .. })
        ));
    }

    #[test]
    fn scalar_sare_root() {
        let sys = scalar(1.0, 1.0, 0.0, 0.0);
        let cost = CostWeights::new(s(2.0), s(1.0)).unwrap();
        let root = 1.0 + 3f64.sqrt();
        assert!(sare_residual(&sys, &cost, &s(root), SareForm::Consistent).unwrap() < 1e-12);
        assert!((sare_residual(&sys, &cost, &s(0.0), SareForm::Consistent).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn printed_sare_differs_only_in_diffusion_sign() {
        let sys = scalar(1.0, 1.0, 0.5, 0.0);
        let cost = CostWeights::new(s(2.0), s(1.0)).unwrap();
        let p = s(1.3);
        let a = sare_residual_matrix(&sys, &cost, &p, SareForm::Consistent).unwrap();
        let b = sare_residual_matrix(&sys, &cost, &p, SareForm::AsPrinted).unwrap();
        assert!((a[(0, 0)] - b[(0, 0)] - 2.0 * 0.25 * 1.3).abs() < 1e-14);
    }

    #[test]
    fn sylvester_scalar_and_zero() {
        let pi = solve_sylvester(&s(-2.0), &s(0.0), &s(3.0)).unwrap();
        assert!((pi[(0, 0)] + 1.5).abs() < 1e-15);
        let a_d = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -5.0, 0.0]);
        let a_c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -30.0, -8.0]);
        let pi = solve_sylvester(&a_c, &a_d, &DMatrix::zeros(2, 3)).unwrap();
        assert_eq!(pi, DMatrix::zeros(2, 3));
        assert!(matches!(solve_sylvester(&s(0.0), &s(0.0), &s(1.0)), Err(Error::ResonantSpectra { .. })));
    }

    #[test]
    fn sylvester_residual_and_linearity() {
        let a_d = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -5.0, 0.0]);
        let a_c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -30.0, -8.0]);
        let rhs = DMatrix::from_row_slice(2, 3, &[10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let pi = solve_sylvester(&a_c, &a_d, &rhs).unwrap();
        let res = a_c.transpose() * &pi + &pi * &a_d - &rhs;
        assert!(res.norm() <= 1e-10 * (1.0 + rhs.norm()));
        let pi2 = solve_sylvester(&a_c, &a_d, &(&rhs * 2.0)).unwrap();
        assert!((pi2 - pi * 2.0).norm() < 1e-12);
    }

    #[test]
    fn ff_from_pi_scalars() {
        let sys = scalar(0.0, 1.0, 0.0, 0.0);
        assert!((ff_from_pi(&sys, &s(1.0), &s(4.0), &s(-1.5)).unwrap()[(0, 0)] + 1.5).abs() < 1e-15);
        assert_eq!(ff_from_pi(&sys, &s(1.0), &s(4.0), &s(0.0)).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn lyapunov_solution_is_positive_on_random_stable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 30 {
            let n = rng.random_range(1..=3);
            let g = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let sys = StochasticSystem::new(g(&mut rng, n, n), g(&mut rng, n, 1), g(&mut rng, n, n) * 0.3, g(&mut rng, n, 1) * 0.3, g(&mut rng, 1, n)).unwrap();
            let psys = sys.parameterized(2.0, rng.random_range(0.0..2.0));
            let k = g(&mut rng, 1, n);
            if model::spectral_abscissa(&psys, &k).unwrap() >= -1e-3 {
                continue;
            }
            let l = g(&mut rng, n, n);
            let forcing = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
            let sol = solve_gen_lyap(&psys, &k, &s(1.0), &forcing).unwrap();
            assert!(linalg::lambda_min(&sol.p) > 0.0);
            let scale = 1.0 + forcing.norm() + sol.p.norm();
            assert!(sol.residual_norm <= 1e-10 * scale);
            checked += 1;
        }
    }

    #[test]
    fn example_one_value_matches_monte_carlo_representation() {
        // P1 = E ∫ Φ(t)' Θ Φ(t) dt where dΦ = A(α0)Φ dt + CΦ dw, K = 0.
        let sys = example_one();
        let psys = sys.parameterized(1.0, 0.1);
        let theta = DMatrix::identity(2, 2) * 10.0;
        let sol = solve_gen_lyap(&psys, &DMatrix::zeros(1, 2), &s(0.01), &theta).unwrap();
        let a0 = psys.drift();
        let c = sys.c().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (paths, h, horizon) = (400usize, 1e-3_f64, 40.0);
        let steps = (horizon / h) as usize;
        let mut sum = DMatrix::<f64>::zeros(2, 2);
        let mut sum_sq = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..paths {
            let mut phi = DMatrix::<f64>::identity(2, 2);
            let mut acc = DMatrix::<f64>::zeros(2, 2);
            let mut prev = phi.transpose() * &theta * &phi;
            for _ in 0..steps {
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * h.sqrt();
                phi = &phi + (&a0 * &phi) * h + (&c * &phi) * dw;
                let cur = phi.transpose() * &theta * &phi;
                acc += (&prev + &cur) * (0.5 * h);
                prev = cur;
            }
            sum += &acc;
            sum_sq += acc.component_mul(&acc);
        }
        let mean = &sum / paths as f64;
        for i in 0..2 {
            for j in 0..2 {
                let var = sum_sq[(i, j)] / paths as f64 - mean[(i, j)].powi(2);
                let se = (var / paths as f64).sqrt();
                let err = (mean[(i, j)] - sol.p[(i, j)]).abs();
                assert!(err <= 3.0 * se + 0.02 * sol.p[(i, j)].abs(), "entry ({i},{j}): mc {} vs {}", mean[(i, j)], sol.p[(i, j)]);
            }
        }
    }
}
