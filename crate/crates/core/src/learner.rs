//! Data-driven two-phase learning from moment tables.
//!
//! The loop mirrors [`crate::bpi`] but every Lyapunov solve is replaced by a
//! least-squares solve of the data equations built in [`crate::regressors`].
//! No plant matrix is used unless a validation model is supplied, in which
//! case every learned gain also gets a stability certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bpi::Phase;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    self, BpiHyperParams, CostWeights, ReferenceGenerator, StabilityCertificate, StochasticSystem, StopRule,
};
use crate::regressors::{self, MomentTable, RankReport, ShadowForm, RANK_TOL};
use crate::sim::{propagate_moments_exact, DataSpec, InputSignal, SimConfig};
use crate::symquad::{self, HalfVec};

/// Settings of the learner that are not part of the iteration itself.
#[derive(Clone, Debug)]
pub struct LearnOptions {
    pub stop_rule: StopRule,
    /// Relative tolerance of rank checks and of the least-squares pivots.
    pub rank_tol: f64,
    /// Consecutive non-increasing `alpha` updates tolerated in phase I.
    pub stall_limit: usize,
    /// True plant, used only to certify learned gains.
    pub validation: Option<StochasticSystem>,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self { stop_rule: StopRule::ValueChange, rank_tol: RANK_TOL, stall_limit: 3, validation: None }
    }
}

/// One learned iterate. `m` and `lambda` are zero in the reduced parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedIterate {
    pub index: usize,
    pub phase: Phase,
    pub p: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub alpha: f64,
    /// `|A theta - b| / |b|` of the least-squares solve.
    pub residual: f64,
    pub certificate: Option<StabilityCertificate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLearning {
    pub history: Vec<LearnedIterate>,
    pub p_star: DMatrix<f64>,
    pub k_star: DMatrix<f64>,
    pub lambda_star: DMatrix<f64>,
    pub ranks: Vec<RankReport>,
}

impl FeedbackLearning {
    pub fn phase_one_exit(&self) -> Option<&LearnedIterate> {
        self.history.iter().filter(|s| s.phase == Phase::One).last()
    }

    pub fn iterations(&self) -> usize {
        self.history.last().map_or(0, |s| s.index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardLearning {
    pub h_d: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardSet {
    pub cases: Vec<FeedforwardLearning>,
    pub rank: RankReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedSolution {
    pub feedback: FeedbackLearning,
    pub feedforward: FeedforwardSet,
}

/// How `theta` is laid out and which extra rows are appended.
enum Layout {
    /// `[vech P; vec M; vech Lambda]`.
    Full,
    /// `[vech P; vec K]`, with optional shadow rows added to every regressor.
    Reduced { omega_k: Option<DMatrix<f64>> },
}

struct FeedbackEquations<'a> {
    table: &'a MomentTable,
    layout: Layout,
    cost: &'a CostWeights,
    hyper: &'a BpiHyperParams,
}

struct Decoded {
    p: DMatrix<f64>,
    m: DMatrix<f64>,
    lambda: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl FeedbackEquations<'_> {
    fn rows(&self, alpha: f64, k_prev: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let a0 = self.hyper.alpha0;
        match &self.layout {
            Layout::Full => regressors::assemble_psi(self.table, alpha, a0, k_prev),
            Layout::Reduced { omega_k } => {
                let psi = regressors::assemble_psi_reduced(self.table, alpha, a0, k_prev, self.cost.r())?;
                Ok(match omega_k {
                    Some(om) => psi + om,
                    None => psi,
                })
            }
        }
    }

    fn decode(&self, theta: &DVector<f64>) -> Result<Decoded> {
        let d = self.table.dims;
        let np = HalfVec::len_for(d.n);
        let nm = d.n * d.m;
        let p = symquad::unvech_raw(&theta.as_slice()[..np], d.n);
        let block = DMatrix::from_column_slice(d.m, d.n, &theta.as_slice()[np..np + nm]);
        match self.layout {
            Layout::Full => {
                let lambda = symquad::unvech_raw(&theta.as_slice()[np + nm..], d.m);
                let k = linalg::spd_solve(&(self.cost.r() + &lambda), &block, "R + Lambda")?;
                Ok(Decoded { p, m: block, lambda, k })
            }
            Layout::Reduced { .. } => Ok(Decoded {
                p,
                m: self.cost.r() * &block,
                lambda: DMatrix::zeros(d.m, d.m),
                k: block,
            }),
        }
    }

    fn solve(&self, a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<(Decoded, f64)> {
        let ls = linalg::lstsq(a, b, tol)?;
        let scale = b.norm();
        let residual = if scale > 0.0 { ls.residual / scale } else { ls.residual };
        Ok((self.decode(&ls.solution)?, residual))
    }
}

fn certify(opts: &LearnOptions, gamma: f64, alpha: f64, k: &DMatrix<f64>) -> Result<Option<StabilityCertificate>> {
    opts.validation
        .as_ref()
        .map(|sys| model::is_stabilizing(&sys.parameterized(gamma, alpha), k, 0.0))
        .transpose()
}

fn run_two_phases(eq: &FeedbackEquations<'_>, opts: &LearnOptions, ranks: Vec<RankReport>) -> Result<FeedbackLearning> {
    let hp = eq.hyper;
    hp.validate(eq.table.dims.n)?;
    let (n, m) = (eq.table.dims.n, eq.table.dims.m);
    let r = eq.cost.r();
    let mut k = DMatrix::zeros(m, n);
    let mut alpha = hp.alpha0;
    let mut history = Vec::new();
    let mut stalls = 0;
    let mut index = 0;

    while alpha < hp.gamma {
        index += 1;
        if index > hp.max_iter {
            return Err(Error::MaxIterExceeded { phase: Phase::One, max_iter: hp.max_iter });
        }
        let a = eq.rows(alpha, &k)?;
        let b = regressors::psi_rhs(eq.table, &k, r, &hp.theta)?;
        let (dec, residual) = eq.solve(&a, &b, opts.rank_tol)?;
        let min_p = linalg::lambda_min(&dec.p);
        let next = if min_p > 0.0 {
            let gain = linalg::lambda_min(&(dec.k.transpose() * r * &dec.k + &hp.theta));
            alpha + hp.eta * gain / linalg::lambda_max(&dec.p)
        } else {
            alpha
        };
        if next > alpha {
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= opts.stall_limit {
                return Err(Error::DivergedAlpha(stalls));
            }
        }
        let certificate = certify(opts, hp.gamma, next, &dec.k)?;
        history.push(LearnedIterate {
            index,
            phase: Phase::One,
            p: dec.p,
            m: dec.m,
            lambda: dec.lambda,
            k: dec.k.clone(),
            alpha: next,
            residual,
            certificate,
        });
        k = dec.k;
        alpha = next;
    }

    let mut p_prev: Option<DMatrix<f64>> = None;
    for _ in 0..hp.max_iter {
        index += 1;
        let a = eq.rows(hp.gamma, &k)?;
        let b = regressors::phi_rhs(eq.table, &k, r, eq.cost.q())?;
        let (dec, residual) = eq.solve(&a, &b, opts.rank_tol)?;
        let change = match opts.stop_rule {
            StopRule::GainChange => linalg::spectral_norm(&(&dec.k - &k)),
            StopRule::ValueChange => p_prev
                .as_ref()
                .map_or(f64::INFINITY, |prev| linalg::spectral_norm(&(&dec.p - prev))),
        };
        let certificate = certify(opts, hp.gamma, hp.gamma, &dec.k)?;
        history.push(LearnedIterate {
            index,
            phase: Phase::Two,
            p: dec.p.clone(),
            m: dec.m,
            lambda: dec.lambda.clone(),
            k: dec.k.clone(),
            alpha: hp.gamma,
            residual,
            certificate,
        });
        k = dec.k;
        if change <= hp.epsilon {
            return Ok(FeedbackLearning { history, p_star: dec.p, k_star: k, lambda_star: dec.lambda, ranks });
        }
        p_prev = Some(dec.p);
    }
    Err(Error::MaxIterExceeded { phase: Phase::Two, max_iter: hp.max_iter })
}

/// Feedback learning with probing data, `theta = [vech P; vec M; vech Lambda]`.
pub fn learn_feedback(
    table: &MomentTable,
    cost: &CostWeights,
    hyper: &BpiHyperParams,
    opts: &LearnOptions,
) -> Result<FeedbackLearning> {
    let rank = regressors::rank_report(
        &regressors::feedback_excitation(table),
        regressors::feedback_excitation_rank(table),
        opts.rank_tol,
    )
    .require()?;
    let eq = FeedbackEquations { table, layout: Layout::Full, cost, hyper };
    run_two_phases(&eq, opts, vec![rank])
}

/// Feedback learning for `D = 0`, `theta = [vech P; vec K]`, without shadow rows.
pub fn learn_feedback_reduced(
    table: &MomentTable,
    cost: &CostWeights,
    hyper: &BpiHyperParams,
    opts: &LearnOptions,
) -> Result<FeedbackLearning> {
    let full = regressors::feedback_excitation(table);
    let d = table.dims;
    let cols = HalfVec::len_for(d.n) + d.n * d.m;
    let rank = regressors::rank_report(&full.columns(0, cols).into_owned(), cols, opts.rank_tol).require()?;
    let eq = FeedbackEquations { table, layout: Layout::Reduced { omega_k: None }, cost, hyper };
    run_two_phases(&eq, opts, vec![rank])
}

/// Feedforward gains for each output map in `h_ds`, sharing one data matrix.
pub fn learn_feedforward(
    table: &MomentTable,
    feedback: &FeedbackLearning,
    cost: &CostWeights,
    hyper: &BpiHyperParams,
    h_ds: &[DMatrix<f64>],
    opts: &LearnOptions,
) -> Result<FeedforwardSet> {
    let rank = regressors::rank_report(
        &regressors::feedforward_excitation(table),
        regressors::feedforward_excitation_rank(table),
        opts.rank_tol,
    )
    .require()?;
    let xi = regressors::assemble_xi(table, &feedback.k_star, &feedback.lambda_star, cost.r(), hyper.discount())?;
    solve_feedforward(table, &xi, cost, h_ds, opts, rank)
}

fn solve_feedforward(
    table: &MomentTable,
    xi: &DMatrix<f64>,
    cost: &CostWeights,
    h_ds: &[DMatrix<f64>],
    opts: &LearnOptions,
    rank: RankReport,
) -> Result<FeedforwardSet> {
    let d = table.dims;
    let cases = h_ds
        .iter()
        .map(|h_d| {
            let rhs = regressors::xi_rhs(table, h_d, cost.q())?;
            let scale = rhs.norm();
            if scale == 0.0 {
                return Ok(FeedforwardLearning {
                    h_d: h_d.clone(),
                    pi: DMatrix::zeros(d.n, d.nd),
                    f: DMatrix::zeros(d.m, d.nd),
                    residual: 0.0,
                });
            }
            let ls = linalg::lstsq(xi, &rhs, opts.rank_tol)?;
            let npi = d.n * d.nd;
            Ok(FeedforwardLearning {
                h_d: h_d.clone(),
                pi: DMatrix::from_column_slice(d.n, d.nd, &ls.solution.as_slice()[..npi]),
                f: DMatrix::from_column_slice(d.m, d.nd, &ls.solution.as_slice()[npi..]),
                residual: ls.residual / scale,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeedforwardSet { cases, rank })
}

/// Deterministic auxiliary systems `x_a' = A_a x_a + B u_a` and `y_a' = F_a y_a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowConfig {
    pub a_a: DMatrix<f64>,
    pub input: InputSignal,
    pub x_a0: DVector<f64>,
    pub f_a: DMatrix<f64>,
    pub y_a0: DVector<f64>,
    /// Step, sampling period and window; row counts are derived from the plant segments.
    pub sim: SimConfig,
    /// Simulated span; must cover all plant segments laid end to end.
    pub horizon: f64,
    #[serde(default)]
    pub form: ShadowForm,
}

/// Rank of `[B, AB, ..., A^{n-1}B]` after column scaling.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        ctrb.columns_mut(k * m, m).copy_from(&blk);
        blk = a * blk;
    }
    regressors::rank_report(&ctrb, n, tol).rank
}

/// Relative tolerance of the controllability test.
pub const CONTROLLABILITY_TOL: f64 = 1e-10;

impl ShadowConfig {
    pub fn validate(&self, b: &DMatrix<f64>) -> Result<()> {
        let n = b.nrows();
        if self.a_a.shape() != (n, n) || self.x_a0.len() != n {
            return Err(Error::Dimension("shadow A_a or x_a0 does not match the plant state".into()));
        }
        if self.input.channels() != b.ncols() {
            return Err(Error::Dimension("shadow input width does not match B".into()));
        }
        if self.f_a.nrows() != self.y_a0.len() {
            return Err(Error::Dimension("F_a and y_a0 disagree".into()));
        }
        let rank = controllability_rank(&self.a_a, b, CONTROLLABILITY_TOL);
        if rank < n {
            return Err(Error::ShadowUncontrollable { rank, n });
        }
        self.generator()?;
        self.sim.validate()
    }

    fn generator(&self) -> Result<ReferenceGenerator> {
        ReferenceGenerator::new(self.f_a.clone(), DMatrix::zeros(1, self.f_a.nrows()), self.y_a0.clone())
            .map_err(|e| match e {
                Error::Admissibility(msg) => Error::Admissibility(format!("shadow F_a: {msg}")),
                other => other,
            })
    }

    /// Window moments of the shadow pair on `[0, horizon]`.
    pub fn simulate(&self, b: &DMatrix<f64>) -> Result<MomentTable> {
        self.validate(b)?;
        let (n, m) = b.shape();
        let sys = StochasticSystem::new(
            self.a_a.clone(),
            b.clone(),
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, m),
            DMatrix::identity(n, n),
        )?;
        let reference = self.generator()?;
        let cfg = self.sim.covering(self.horizon)?;
        let spec = DataSpec { system: &sys, input: &self.input, x0: &self.x_a0, reference: &reference, discount: 0.0 };
        let grid = propagate_moments_exact(&spec, &cfg)?;
        MomentTable::from_grid(&grid, sys.h(), 0, cfg.n_samples, cfg.window_samples())
    }
}

/// Stacks plant segments and pairs each row with the shadow row at the same
/// absolute time, segments being laid end to end from `t = 0`.
pub fn align_shadow(plant_segments: &[MomentTable], shadow: &MomentTable, sample_period: f64) -> Result<(MomentTable, MomentTable)> {
    let plant = MomentTable::concat(plant_segments)?;
    let window = (shadow.window / sample_period).round() as usize;
    let mut idx = Vec::with_capacity(plant.len());
    let mut offset = 0;
    for seg in plant_segments {
        if (seg.window - shadow.window).abs() > 1e-9 {
            return Err(Error::Dimension("plant and shadow windows differ".into()));
        }
        idx.extend(offset..offset + seg.len());
        offset += seg.len() + window - 1;
    }
    let aligned = shadow.select(&idx).map_err(|_| {
        Error::WindowOutOfRange(format!(
            "shadow table has {} rows, plant segments need {}",
            shadow.len(),
            idx.last().map_or(0, |i| i + 1)
        ))
    })?;
    Ok((plant, aligned))
}

/// Inputs of the shadow learner besides the moment data.
#[derive(Clone, Debug)]
pub struct ShadowProblem<'a> {
    pub b: &'a DMatrix<f64>,
    pub cost: &'a CostWeights,
    pub hyper: &'a BpiHyperParams,
    pub h_ds: &'a [DMatrix<f64>],
}

/// Shadow-augmented learning for a `D = 0` plant driven by zero input.
pub fn learn_shadow(
    plant_segments: &[MomentTable],
    shadow: &ShadowConfig,
    problem: &ShadowProblem<'_>,
    opts: &LearnOptions,
) -> Result<LearnedSolution> {
    if let Some(sys) = &opts.validation {
        if sys.has_input_noise() {
            return Err(Error::ShadowPrecondition("validation model has D != 0".into()));
        }
    }
    for seg in plant_segments {
        if seg.rows.iter().any(|r| r.w.iter().chain(r.v.iter()).chain(r.i_xd_v.iter()).any(|v| *v != 0.0)) {
            return Err(Error::ShadowPrecondition("plant data carries a nonzero input".into()));
        }
    }
    let shadow_full = shadow.simulate(problem.b)?;
    let (plant, aux) = align_shadow(plant_segments, &shadow_full, shadow.sim.sample_period)?;
    let d = plant.dims;
    if aux.dims.nd != d.nd {
        return Err(Error::Dimension("F_a order must equal the reference order".into()));
    }
    let r = problem.cost.r();

    let fb_rank = regressors::rank_report(
        &regressors::shadow_feedback_excitation(&plant, &aux)?,
        HalfVec::len_for(d.n) + d.n * d.m,
        opts.rank_tol,
    )
    .require()?;
    let omega_k = regressors::shadow_omega_k(&aux, &shadow.a_a, r, shadow.form)?;
    let eq = FeedbackEquations {
        table: &plant,
        layout: Layout::Reduced { omega_k: Some(omega_k) },
        cost: problem.cost,
        hyper: problem.hyper,
    };
    let feedback = run_two_phases(&eq, opts, vec![fb_rank])?;

    let ff_rank = regressors::rank_report(
        &regressors::shadow_feedforward_excitation(&plant, &aux)?,
        (d.n + d.m) * d.nd,
        opts.rank_tol,
    )
    .require()?;
    let xi = regressors::assemble_xi(&plant, &feedback.k_star, &feedback.lambda_star, r, problem.hyper.discount())?
        + regressors::shadow_omega_f(&aux, &shadow.a_a, &shadow.f_a, r)?;
    let feedforward = solve_feedforward(&plant, &xi, problem.cost, problem.h_ds, opts, ff_rank)?;
    Ok(LearnedSolution { feedback, feedforward })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpi;
    use crate::testutil;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn example_two_shadow(ex: &testutil::ExampleTwo) -> ShadowConfig {
        ShadowConfig {
            a_a: ex.a_a.clone(),
            input: ex.u_a.clone(),
            x_a0: DVector::zeros(4),
            f_a: ex.f_a.clone(),
            y_a0: ex.y_a0.clone(),
            sim: ex.cfg.clone(),
            horizon: 2.0 * ex.segment,
            form: ShadowForm::Consistent,
        }
    }

    fn segments(ex: &testutil::ExampleTwo) -> Vec<MomentTable> {
        let both = ex.plant_table();
        let per = both.len() / 2;
        vec![
            both.select(&(0..per).collect::<Vec<_>>()).unwrap(),
            both.select(&(per..2 * per).collect::<Vec<_>>()).unwrap(),
        ]
    }

    #[test]
    fn exact_moments_reproduce_model_based_iterates() {
        let ex = testutil::example_one();
        let table = ex.probing_table();
        let mut problem = ex.problem.clone();
        problem.hyper.stop_rule = StopRule::ValueChange;
        let model = bpi::solve_tracking(&problem).unwrap();
        let opts = LearnOptions { validation: Some(problem.system.clone()), ..LearnOptions::default() };
        let learned = learn_feedback(&table, &problem.cost, &problem.hyper, &opts).unwrap();
        assert_eq!(learned.history.len(), model.history.len());
        for (a, b) in learned.history.iter().zip(&model.history) {
            assert_eq!((a.index, a.phase), (b.index, b.phase));
            assert!((&a.p - &b.p).amax() < 1e-6, "P at {}", a.index);
            assert!((&a.k - &b.k).amax() < 1e-6, "K at {}", a.index);
            assert!((a.alpha - b.alpha).abs() < 1e-6);
            let cert = a.certificate.unwrap();
            assert!((cert.abscissa - b.abscissa).abs() < 1e-5);
            assert!(a.residual.is_finite());
        }
        let ff = learn_feedforward(&table, &learned, &problem.cost, &problem.hyper, &[problem.reference.h_d().clone()], &opts)
            .unwrap();
        assert!((&ff.cases[0].f - &model.f_star).amax() < 1e-6);
    }

    #[test]
    fn feedforward_cases_scale_with_the_output_map() {
        let ex = testutil::example_one();
        let table = ex.probing_table();
        let opts = LearnOptions::default();
        let fb = learn_feedback(&table, &ex.problem.cost, &ex.problem.hyper, &opts).unwrap();
        let h1 = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let cases = [h1.clone(), &h1 * 2.0, &h1 * 3.0, DMatrix::zeros(1, 3)];
        let ff = learn_feedforward(&table, &fb, &ex.problem.cost, &ex.problem.hyper, &cases, &opts).unwrap();
        let f1 = &ff.cases[0].f;
        assert!((&ff.cases[1].f - f1 * 2.0).amax() <= 1e-10 * f1.amax());
        assert!((&ff.cases[2].f - f1 * 3.0).amax() <= 1e-10 * f1.amax());
        assert_eq!(ff.cases[3].f.amax(), 0.0);
    }

    #[test]
    fn too_few_rows_is_rank_deficient() {
        let ex = testutil::example_one();
        let table = ex.table_with_input(&ex.probing, 5);
        let err = learn_feedback(&table, &ex.problem.cost, &ex.problem.hyper, &LearnOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { required: 6, .. }));
    }

    #[test]
    fn shadow_learning_matches_the_model_on_exact_data() {
        let ex = testutil::example_two();
        let mut problem = ex.problem.clone();
        problem.hyper.stop_rule = StopRule::ValueChange;
        let model = bpi::solve_tracking(&problem).unwrap();
        let shadow = example_two_shadow(&ex);
        let h_ds = [problem.reference.h_d().clone()];
        let sp = ShadowProblem { b: problem.system.b(), cost: &problem.cost, hyper: &problem.hyper, h_ds: &h_ds };
        let opts = LearnOptions { validation: Some(problem.system.clone()), ..LearnOptions::default() };
        let learned = learn_shadow(&segments(&ex), &shadow, &sp, &opts).unwrap();
        assert_eq!(learned.feedback.history.len(), model.history.len());
        for (a, b) in learned.feedback.history.iter().zip(&model.history) {
            assert!((&a.k - &b.k).amax() < 1e-5 * (1.0 + b.k.amax()), "K at {}", a.index);
        }
        assert!((&learned.feedforward.cases[0].f - &model.f_star).amax() < 1e-5 * (1.0 + model.f_star.amax()));
    }

    #[test]
    fn state_noise_plant_without_shadow_is_rank_deficient() {
        let ex = testutil::example_two();
        let table = ex.plant_table();
        let err = learn_feedback_reduced(&table, &ex.problem.cost, &ex.problem.hyper, &LearnOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn shadow_preconditions() {
        let ex = testutil::example_two();
        let mut shadow = example_two_shadow(&ex);
        let b = ex.problem.system.b();
        shadow.a_a = DMatrix::identity(4, 4);
        assert!(matches!(shadow.validate(b), Err(Error::ShadowUncontrollable { .. })));
        let mut shadow = example_two_shadow(&ex);
        shadow.f_a = DMatrix::identity(3, 3);
        assert!(matches!(shadow.validate(b), Err(Error::Admissibility(_))));

        let one = testutil::example_one();
        let probed = one.table_with_input(&one.probing, 50);
        let shadow = example_two_shadow(&ex);
        let h_ds = [DMatrix::zeros(1, 3)];
        let sp = ShadowProblem { b: one.problem.system.b(), cost: &one.problem.cost, hyper: &one.problem.hyper, h_ds: &h_ds };
        let err = learn_shadow(&[probed], &shadow, &sp, &LearnOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ShadowPrecondition(_)));
    }

    #[test]
    fn example_two_shadow_is_controllable() {
        let ex = testutil::example_two();
        assert_eq!(controllability_rank(&ex.a_a, ex.problem.system.b(), CONTROLLABILITY_TOL), 4);
        assert_eq!(controllability_rank(&s(0.0), &s(0.0), CONTROLLABILITY_TOL), 0);
    }
}
