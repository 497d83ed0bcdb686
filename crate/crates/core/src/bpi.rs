//! Model-based bootstrap policy iteration.
//!
//! Phase I starts from `K = 0` on the shifted plant `S(alpha0)` and raises
//! `alpha` until it reaches `gamma`; the gain it ends with stabilizes the true
//! plant. Phase II is the usual policy iteration on the true plant. The
//! tracking solution is completed by a Sylvester solve for the feedforward.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, ReferenceGenerator, StopRule, TrackingProblem};
use crate::solvers::{self, SareForm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::One => f.write_str("phase I"),
            Phase::Two => f.write_str("phase II"),
        }
    }
}

/// One recorded iterate `(P_i, K_i, alpha_i)`.
///
/// `abscissa` is the spectral abscissa of `K_i` on `S(alpha_i)` in phase I and
/// on the true plant in phase II.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateState {
    pub index: usize,
    pub phase: Phase,
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub alpha: f64,
    pub abscissa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseOneOutcome {
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub trace: Vec<IterateState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTwoOutcome {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub trace: Vec<IterateState>,
}

/// Reference-dependent part of the tracking solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedforward {
    pub pi: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSolution {
    pub p_star: DMatrix<f64>,
    pub k_star: DMatrix<f64>,
    pub pi_star: DMatrix<f64>,
    pub f_star: DMatrix<f64>,
    pub lambda_star: DMatrix<f64>,
    pub sare_residual: f64,
    pub abscissa: f64,
    pub history: Vec<IterateState>,
}

impl TrackingSolution {
    pub fn phase_one_exit(&self) -> Option<&IterateState> {
        self.history.iter().filter(|s| s.phase == Phase::One).last()
    }

    pub fn iterations(&self) -> usize {
        self.history.last().map_or(0, |s| s.index)
    }
}

/// Errors unless `K = 0` is stabilizing for `S(alpha0)`.
pub fn check_initial_condition(problem: &TrackingProblem) -> Result<f64> {
    let threshold = model::zero_gain_threshold(&problem.system)?;
    let hp = &problem.hyper;
    if !(hp.gamma > threshold + hp.alpha0 + model::STABILITY_GUARD) {
        return Err(Error::InitConditionViolated { gamma: hp.gamma, threshold, alpha0: hp.alpha0 });
    }
    Ok(threshold)
}

pub fn run_phase1(problem: &TrackingProblem) -> Result<PhaseOneOutcome> {
    check_initial_condition(problem)?;
    let sys = &problem.system;
    let hp = &problem.hyper;
    let r = problem.cost.r();
    let mut k = DMatrix::zeros(sys.m(), sys.n());
    let mut alpha = hp.alpha0;
    let mut trace = Vec::new();
    for i in 1..=hp.max_iter {
        let psys = sys.parameterized(hp.gamma, alpha);
        let sol = solvers::solve_gen_lyap(&psys, &k, r, &hp.theta)?;
        let k_next = solvers::gain_update(sys, r, &sol.p)?;
        let alpha_next = solvers::alpha_update(alpha, &sol.p, &k_next, r, hp.eta, &hp.theta)?;
        let abscissa = model::spectral_abscissa(&sys.parameterized(hp.gamma, alpha_next), &k_next)?;
        trace.push(IterateState {
            index: i,
            phase: Phase::One,
            p: sol.p,
            k: k_next.clone(),
            alpha: alpha_next,
            abscissa,
        });
        k = k_next;
        alpha = alpha_next;
        if alpha >= hp.gamma {
            return Ok(PhaseOneOutcome { k, iterations: i, trace });
        }
    }
    Err(Error::MaxIterExceeded { phase: Phase::One, max_iter: hp.max_iter })
}

/// Policy iteration on the true plant from a stabilizing `k_init`.
///
/// Iterate indices continue from `first_index`.
pub fn run_phase2(problem: &TrackingProblem, k_init: &DMatrix<f64>, first_index: usize) -> Result<PhaseTwoOutcome> {
    let sys = &problem.system;
    let hp = &problem.hyper;
    let r = problem.cost.r();
    let psys = sys.parameterized(hp.gamma, hp.gamma);
    let cert = model::is_stabilizing(&psys, k_init, 0.0)?;
    if !cert.stabilizing {
        return Err(Error::NotStabilizing { abscissa: cert.abscissa });
    }
    let hqh = sys.h().transpose() * problem.cost.q() * sys.h();
    let mut k = k_init.clone();
    let mut p_prev: Option<DMatrix<f64>> = None;
    let mut trace = Vec::new();
    for step in 0..hp.max_iter {
        let sol = solvers::solve_gen_lyap(&psys, &k, r, &hqh)?;
        let k_next = solvers::gain_update(sys, r, &sol.p)?;
        let abscissa = model::spectral_abscissa(&psys, &k_next)?;
        let change = match hp.stop_rule {
            StopRule::GainChange => linalg::spectral_norm(&(&k_next - &k)),
            StopRule::ValueChange => p_prev
                .as_ref()
                .map_or(f64::INFINITY, |prev| linalg::spectral_norm(&(&sol.p - prev))),
        };
        trace.push(IterateState {
            index: first_index + step,
            phase: Phase::Two,
            p: sol.p.clone(),
            k: k_next.clone(),
            alpha: hp.gamma,
            abscissa,
        });
        k = k_next;
        if change <= hp.epsilon {
            return Ok(PhaseTwoOutcome { p: sol.p, k, trace });
        }
        p_prev = Some(sol.p);
    }
    Err(Error::MaxIterExceeded { phase: Phase::Two, max_iter: hp.max_iter })
}

/// Upper bound on the phase-I iteration count implied by a recorded trace.
pub fn phase1_iteration_bound(problem: &TrackingProblem, trace: &[IterateState]) -> f64 {
    let hp = &problem.hyper;
    let r = problem.cost.r();
    let max_p = trace.iter().map(|s| linalg::lambda_max(&s.p)).fold(0.0, f64::max);
    let min_forcing = trace
        .iter()
        .map(|s| linalg::lambda_min(&(s.k.transpose() * r * &s.k + &hp.theta)))
        .fold(f64::INFINITY, f64::min);
    1.0 + (hp.gamma - hp.alpha0) * max_p / (hp.eta * min_forcing)
}

/// Feedforward `F = (R + D'PD)^{-1} B' Pi` with `(A - BK)'Pi + Pi A_d = H'QH_d`.
pub fn feedforward(
    problem: &TrackingProblem,
    p_star: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    reference: &ReferenceGenerator,
) -> Result<Feedforward> {
    let sys = &problem.system;
    let a_c = sys.a() - sys.b() * k_star;
    let rhs = sys.h().transpose() * problem.cost.q() * reference.h_d();
    let pi = solvers::solve_sylvester(&a_c, reference.a_d(), &rhs)?;
    let f = solvers::ff_from_pi(sys, problem.cost.r(), p_star, &pi)?;
    Ok(Feedforward { pi, f })
}

pub fn solve_tracking(problem: &TrackingProblem) -> Result<TrackingSolution> {
    let one = run_phase1(problem)?;
    let two = run_phase2(problem, &one.k, one.iterations + 1)?;
    let ff = feedforward(problem, &two.p, &two.k, &problem.reference)?;
    let sys = &problem.system;
    let sare_residual = solvers::sare_residual(sys, &problem.cost, &two.p, SareForm::Consistent)?;
    let abscissa = model::spectral_abscissa(&sys.parameterized(1.0, 1.0), &two.k)?;
    let mut history = one.trace;
    history.extend(two.trace);
    Ok(TrackingSolution {
        lambda_star: sys.d().transpose() * &two.p * sys.d(),
        p_star: two.p,
        k_star: two.k,
        pi_star: ff.pi,
        f_star: ff.f,
        sare_residual,
        abscissa,
        history,
    })
}
