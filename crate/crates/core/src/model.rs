//! Plant, reference and cost data, and the generalized Lyapunov operator.
//!
//! For a gain `K` and a (possibly shifted) plant the operator is
//! `L(X) = (A - BK)'X + X(A - BK) + (C - DK)'X(C - DK)` on symmetric `X`.
//! Its spectral abscissa certifies mean-square stability of the closed loop.

use nalgebra::{DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::symquad::{self, HalfVec};

/// Default guard band absorbed into stability tests.
pub const STABILITY_GUARD: f64 = 1e-9;

/// Tolerance on the real parts of the exosystem eigenvalues.
pub const MARGINAL_TOL: f64 = 1e-8;

fn require_dims(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Dimension(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Itô plant `dx = (Ax + Bu)dt + (Cx + Du)dw`, `y = Hx` with scalar Brownian motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    h: DMatrix<f64>,
}

impl StochasticSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        h: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let q = h.nrows();
        if n == 0 || m == 0 || q == 0 {
            return Err(Error::Dimension("n, m and q must all be at least 1".into()));
        }
        require_dims("A", &a, n, n)?;
        require_dims("B", &b, n, m)?;
        require_dims("C", &c, n, n)?;
        require_dims("D", &d, n, m)?;
        require_dims("H", &h, q, n)?;
        Ok(Self { a, b, c, d, h })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn q(&self) -> usize {
        self.h.nrows()
    }

    /// Same drift, no diffusion (`C = 0`, `D = 0`).
    pub fn noise_free(&self) -> Self {
        Self {
            c: DMatrix::zeros(self.n(), self.n()),
            d: DMatrix::zeros(self.n(), self.m()),
            ..self.clone()
        }
    }

    pub fn has_input_noise(&self) -> bool {
        self.d.iter().any(|v| *v != 0.0)
    }

    /// Plant `S(alpha)` with drift `A - (gamma - alpha)/2 I`.
    pub fn parameterized(&self, gamma: f64, alpha: f64) -> ParameterizedSystem {
        ParameterizedSystem { base: self.clone(), gamma, alpha }
    }

    /// Stable textual fingerprint of the plant matrices (hex SHA-256).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for m in [&self.a, &self.b, &self.c, &self.d, &self.h] {
            hasher.update((m.nrows() as u64).to_le_bytes());
            hasher.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Autonomous exosystem `x_d' = A_d x_d`, `y_d = H_d x_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGenerator {
    a_d: DMatrix<f64>,
    h_d: DMatrix<f64>,
    x_d0: DVector<f64>,
}

impl ReferenceGenerator {
    /// Validates dimensions and that every eigenvalue of `A_d` lies on the imaginary axis.
    pub fn new(a_d: DMatrix<f64>, h_d: DMatrix<f64>, x_d0: DVector<f64>) -> Result<Self> {
        let nd = a_d.nrows();
        require_dims("A_d", &a_d, nd, nd)?;
        if h_d.ncols() != nd || x_d0.len() != nd {
            return Err(Error::Dimension(format!(
                "H_d has {} columns and x_d0 has {} entries, expected {nd}",
                h_d.ncols(),
                x_d0.len()
            )));
        }
        let worst = eigenvalues(&a_d)?
            .iter()
            .fold(0.0_f64, |acc, (re, _)| acc.max(re.abs()));
        if worst > MARGINAL_TOL {
            return Err(Error::Admissibility(format!(
                "exosystem eigenvalues must have zero real part (max |Re| = {worst:e})"
            )));
        }
        Ok(Self { a_d, h_d, x_d0 })
    }

    pub fn a_d(&self) -> &DMatrix<f64> {
        &self.a_d
    }
    pub fn h_d(&self) -> &DMatrix<f64> {
        &self.h_d
    }
    pub fn x_d0(&self) -> &DVector<f64> {
        &self.x_d0
    }
    pub fn n_d(&self) -> usize {
        self.a_d.nrows()
    }

    /// Same exosystem with a different output map.
    pub fn with_output(&self, h_d: DMatrix<f64>) -> Result<Self> {
        if h_d.ncols() != self.n_d() {
            return Err(Error::Dimension(format!(
                "H_d must have {} columns, got {}",
                self.n_d(),
                h_d.ncols()
            )));
        }
        Ok(Self { h_d, ..self.clone() })
    }
}

/// Cost weights of `E ∫ |y - y_d|_Q^2 + |u|_R^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, w) in [("Q", &q), ("R", &r)] {
            symquad::check_symmetric(w)?;
            let min_eig = linalg::lambda_min(w);
            if !(min_eig > 0.0) {
                return Err(Error::Admissibility(format!(
                    "{name} must be positive definite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(Self { q, r })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Phase-II stopping rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `|K_i - K_{i-1}|_2 <= epsilon`
    #[default]
    GainChange,
    /// `|P_i - P_{i-1}|_2 <= epsilon`
    ValueChange,
}

/// Hyperparameters of the two-phase iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpiHyperParams {
    pub gamma: f64,
    pub alpha0: f64,
    pub eta: f64,
    pub theta: DMatrix<f64>,
    pub epsilon: f64,
    pub max_iter: usize,
    pub stop_rule: StopRule,
}

impl BpiHyperParams {
    /// `gamma = 1`, `alpha0 = 0.1`, `eta = 0.95`, `Theta = 10 I`, `epsilon = 1e-5`.
    pub fn defaults(n: usize) -> Self {
        Self {
            gamma: 1.0,
            alpha0: 0.1,
            eta: 0.95,
            theta: DMatrix::identity(n, n) * 10.0,
            epsilon: 1e-5,
            max_iter: 200,
            stop_rule: StopRule::GainChange,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 < self.gamma) {
            return Err(Error::Config(format!(
                "need 0 < alpha0 < gamma, got alpha0 = {}, gamma = {}",
                self.alpha0, self.gamma
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        require_dims("Theta", &self.theta, n, n)?;
        symquad::check_symmetric(&self.theta)?;
        if !(linalg::lambda_min(&self.theta) > 0.0) {
            return Err(Error::Config("Theta must be positive definite".into()));
        }
        Ok(())
    }

    /// Discount rate of the data transform, `(gamma - alpha0) / 2`.
    pub fn discount(&self) -> f64 {
        0.5 * (self.gamma - self.alpha0)
    }
}

/// Plant, reference, cost and iteration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingProblem {
    pub system: StochasticSystem,
    pub reference: ReferenceGenerator,
    pub cost: CostWeights,
    pub hyper: BpiHyperParams,
}

impl TrackingProblem {
    pub fn new(
        system: StochasticSystem,
        reference: ReferenceGenerator,
        cost: CostWeights,
        hyper: BpiHyperParams,
    ) -> Result<Self> {
        if reference.h_d().nrows() != system.q() {
            return Err(Error::Dimension(format!(
                "H_d has {} rows but the plant has {} outputs",
                reference.h_d().nrows(),
                system.q()
            )));
        }
        require_dims("Q", cost.q(), system.q(), system.q())?;
        require_dims("R", cost.r(), system.m(), system.m())?;
        hyper.validate(system.n())?;
        Ok(Self { system, reference, cost, hyper })
    }
}

/// Plant `S(alpha)`: drift replaced by `A - (gamma - alpha)/2 I`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterizedSystem {
    pub base: StochasticSystem,
    pub gamma: f64,
    pub alpha: f64,
}

impl ParameterizedSystem {
    pub fn drift(&self) -> DMatrix<f64> {
        let n = self.base.n();
        self.base.a() - DMatrix::identity(n, n) * (0.5 * (self.gamma - self.alpha))
    }

    fn check_gain(&self, k: &DMatrix<f64>) -> Result<()> {
        require_dims("K", k, self.base.m(), self.base.n())
    }

    pub fn operator(&self, k: &DMatrix<f64>) -> Result<LyapunovOperator> {
        self.check_gain(k)?;
        Ok(LyapunovOperator {
            a_cl: self.drift() - self.base.b() * k,
            c_cl: self.base.c() - self.base.d() * k,
        })
    }
}

/// `X -> A_cl'X + X A_cl + C_cl'X C_cl`.
#[derive(Clone, Debug)]
pub struct LyapunovOperator {
    pub a_cl: DMatrix<f64>,
    pub c_cl: DMatrix<f64>,
}

impl LyapunovOperator {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.a_cl.transpose() * x + x * &self.a_cl + self.c_cl.transpose() * x * &self.c_cl
    }

    /// Matrix of the operator acting on `vech` coordinates.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.a_cl.nrows();
        let dim = HalfVec::len_for(n);
        let mut out = DMatrix::zeros(dim, dim);
        let mut unit = vec![0.0; dim];
        for col in 0..dim {
            unit.iter_mut().for_each(|v| *v = 0.0);
            unit[col] = 1.0;
            let e = symquad::unvech_raw(&unit, n);
            out.set_column(col, &symquad::vech_raw(&self.apply(&e)));
        }
        out
    }

    /// Full `n^2 x n^2` Kronecker representation acting on `vec(X)`.
    pub fn kron_matrix(&self) -> DMatrix<f64> {
        let n = self.a_cl.nrows();
        let eye = DMatrix::<f64>::identity(n, n);
        let at = self.a_cl.transpose();
        let ct = self.c_cl.transpose();
        eye.kronecker(&at) + at.kronecker(&eye) + ct.kronecker(&ct)
    }
}

/// Eigenvalues `(re, im)` of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    if !m.is_square() {
        return Err(Error::NonSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure("matrix has non-finite entries".into()));
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::EigenFailure("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect())
}

pub fn lyap_matrix(sys: &ParameterizedSystem, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(sys.operator(k)?.matrix())
}

/// Largest real part in the spectrum of the closed-loop Lyapunov operator.
pub fn spectral_abscissa(sys: &ParameterizedSystem, k: &DMatrix<f64>) -> Result<f64> {
    let mat = lyap_matrix(sys, k)?;
    Ok(eigenvalues(&mat)?
        .iter()
        .map(|(re, _)| *re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Posterior stability certificate of a gain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub abscissa: f64,
    pub margin: f64,
    pub stabilizing: bool,
}

/// `stabilizing` iff the operator abscissa is below `-margin`.
pub fn is_stabilizing(sys: &ParameterizedSystem, k: &DMatrix<f64>, margin: f64) -> Result<StabilityCertificate> {
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("stability margin must be non-negative, got {margin}")));
    }
    let abscissa = spectral_abscissa(sys, k)?;
    Ok(StabilityCertificate { abscissa, margin, stabilizing: abscissa < -margin })
}

/// Spectral abscissa of the open-loop operator on the unshifted plant.
///
/// `K = 0` is stabilizing for `S(alpha0)` exactly when
/// `gamma > zero_gain_threshold + alpha0`.
pub fn zero_gain_threshold(sys: &StochasticSystem) -> Result<f64> {
    let psys = sys.parameterized(1.0, 1.0);
    spectral_abscissa(&psys, &DMatrix::zeros(sys.m(), sys.n()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64, c: f64, d: f64) -> StochasticSystem {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        StochasticSystem::new(m(a), m(b), m(c), m(d), m(1.0)).unwrap()
    }

    pub(crate) fn example_one() -> StochasticSystem {
        StochasticSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -5.0, -0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.2, 0.3]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap()
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g + g.transpose()
    }

    #[test]
    fn rejects_inconsistent_dimensions() {
        let err = StochasticSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(1, 2),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_operator_matrices() {
        let k0 = DMatrix::zeros(1, 1);
        let m = lyap_matrix(&scalar(-1.0, 0.0, 0.0, 0.0).parameterized(1.0, 1.0), &k0).unwrap();
        assert_eq!(m[(0, 0)], -2.0);
        let m = lyap_matrix(&scalar(-1.0, 0.0, 1.0, 0.0).parameterized(1.0, 1.0), &k0).unwrap();
        assert_eq!(m[(0, 0)], -1.0);
    }

    #[test]
    fn operator_matrix_matches_direct_application() {
        let sys = example_one();
        let psys = sys.parameterized(1.0, 1.0);
        let op = psys.operator(&DMatrix::zeros(1, 2)).unwrap();
        let mat = op.matrix();
        assert_eq!(mat.shape(), (3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = random_symmetric(&mut rng, 2);
            let direct = op.apply(&x);
            let via = symquad::unvech_raw((&mat * symquad::vech_raw(&x)).as_slice(), 2);
            let scale = linalg::max_abs(&direct).max(1.0);
            assert!(linalg::max_abs(&(direct - via)) <= 1e-11 * scale);
        }
    }

    #[test]
    fn scalar_abscissa_and_certificates() {
        let k0 = DMatrix::zeros(1, 1);
        let stable = scalar(-1.0, 0.0, 0.0, 0.0).parameterized(1.0, 1.0);
        assert!((spectral_abscissa(&stable, &k0).unwrap() + 2.0).abs() < 1e-14);
        let unstable = scalar(1.0, 0.0, 0.0, 0.0).parameterized(1.0, 1.0);
        assert!((spectral_abscissa(&unstable, &k0).unwrap() - 2.0).abs() < 1e-14);
        assert!(is_stabilizing(&stable, &k0, 0.0).unwrap().stabilizing);
        assert!(!is_stabilizing(&unstable, &k0, 0.0).unwrap().stabilizing);
        assert!(is_stabilizing(&stable, &k0, -1.0).is_err());
    }

    #[test]
    fn zero_gain_threshold_scalar() {
        assert!((zero_gain_threshold(&scalar(-1.0, 1.0, 0.0, 0.0)).unwrap() + 2.0).abs() < 1e-14);
        assert!((zero_gain_threshold(&scalar(0.5, 1.0, 0.1, 0.0)).unwrap() - 1.01).abs() < 1e-14);
    }

    #[test]
    fn example_one_zero_gain_is_stabilizing_at_alpha0() {
        let sys = example_one();
        let k0 = DMatrix::zeros(1, 2);
        let threshold = zero_gain_threshold(&sys).unwrap();
        let at_alpha0 = spectral_abscissa(&sys.parameterized(1.0, 0.1), &k0).unwrap();
        assert!((threshold - 0.9 - at_alpha0).abs() < 1e-9);
        assert!(is_stabilizing(&sys.parameterized(1.0, 0.1), &k0, 0.0).unwrap().stabilizing);
        // The open-loop plant happens to be mean-square stable as well.
        let open = is_stabilizing(&sys.parameterized(1.0, 1.0), &k0, 0.0).unwrap();
        assert!(open.abscissa < 0.0 && open.stabilizing);
    }

    #[test]
    fn abscissa_agrees_with_growth_rate_of_kron_flow() {
        // independent route: growth rate of vec(X)' = L_kron vec(X) via RK4
        let sys = example_one();
        let op = sys.parameterized(1.0, 1.0).operator(&DMatrix::zeros(1, 2)).unwrap();
        let big = op.kron_matrix();
        let f = |v: &DVector<f64>| &big * v;
        let mut v = DVector::from_vec(vec![1.0, 0.3, 0.3, 0.7]);
        let h = 1e-3;
        let mut log_growth = 0.0;
        let horizon = 60.0;
        let steps = (horizon / h) as usize;
        for _ in 0..steps {
            let k1 = f(&v);
            let k2 = f(&(&v + &k1 * (h / 2.0)));
            let k3 = f(&(&v + &k2 * (h / 2.0)));
            let k4 = f(&(&v + &k3 * h));
            v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let nrm = v.norm();
            log_growth += nrm.ln();
            v /= nrm;
        }
        let rate = log_growth / horizon;
        let abscissa = spectral_abscissa(&sys.parameterized(1.0, 1.0), &DMatrix::zeros(1, 2)).unwrap();
        assert!((rate - abscissa).abs() < 2e-2, "rate {rate} vs abscissa {abscissa}");
    }

    #[test]
    fn shift_identity_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=2);
            let gen = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let sys = StochasticSystem::new(
                gen(&mut rng, n, n),
                gen(&mut rng, n, m),
                gen(&mut rng, n, n) * 0.3,
                gen(&mut rng, n, m) * 0.3,
                gen(&mut rng, 1, n),
            )
            .unwrap();
            let k = gen(&mut rng, m, n);
            let gamma = rng.random_range(0.5..3.0);
            let alpha = rng.random_range(0.0..gamma);
            let shifted = spectral_abscissa(&sys.parameterized(gamma, alpha), &k).unwrap();
            let base = spectral_abscissa(&sys.parameterized(gamma, gamma), &k).unwrap();
            assert!((shifted - (base - (gamma - alpha))).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_generator_checks_marginality() {
        let a_d = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -5.0, 0.0]);
        let x_d0 = DVector::from_vec(vec![5f64.sqrt(), 0.5, 0.5]);
        let h_d = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        assert!(ReferenceGenerator::new(a_d, h_d.clone(), x_d0.clone()).is_ok());
        let damped = DMatrix::from_row_slice(3, 3, &[-0.1, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -5.0, 0.0]);
        assert!(matches!(
            ReferenceGenerator::new(damped, h_d, x_d0),
            Err(Error::Admissibility(_))
        ));
    }

    #[test]
    fn hyperparameter_validation() {
        let mut hp = BpiHyperParams::defaults(2);
        assert!(hp.validate(2).is_ok());
        hp.alpha0 = 1.5;
        assert!(matches!(hp.validate(2), Err(Error::Config(_))));
        let mut hp = BpiHyperParams::defaults(2);
        hp.eta = 1.0;
        assert!(hp.validate(2).is_err());
        assert!(BpiHyperParams::defaults(3).validate(2).is_err());
    }

    #[test]
    fn cost_weights_require_positive_definite() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(CostWeights::new(one.clone(), one.clone()).is_ok());
        assert!(CostWeights::new(DMatrix::from_element(1, 1, 0.0), one).is_err());
    }
}
