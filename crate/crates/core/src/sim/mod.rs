//! Trajectory generation: single SDE/ODE paths, Monte Carlo ensembles,
//! exact moment propagation and closed-loop cost estimates.

mod closed_loop;
mod ensemble;
mod exact;
mod store;

pub use closed_loop::{
    compare_average_cost, estimate_average_cost, simulate_tracking, CostComparison, CostEstimate, TrackingSegment,
    TrackingTrace,
};
pub use ensemble::run_ensemble;
pub use exact::propagate_moments_exact;
pub(crate) use store::timestamp;
pub use store::{export_csv, load_dataset, save_dataset, DATASET_SCHEMA};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ReferenceGenerator, StochasticSystem};

/// States whose norm exceeds this are treated as a blow-up.
pub const BLOWUP_NORM: f64 = 1e8;

/// Integration step, sampling grid and ensemble size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Integration step.
    pub h: f64,
    /// Sampling period `T_s`.
    pub sample_period: f64,
    /// Integration window `T`.
    pub window: f64,
    /// First row instant.
    pub t1: f64,
    /// Number of row instants `l`; the grid reaches `t1 + (l - 1) T_s + T`.
    pub n_samples: usize,
    pub n_paths: usize,
    pub base_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            sample_period: 1e-3,
            window: 0.1,
            t1: 0.0,
            n_samples: 5001,
            n_paths: 2000,
            base_seed: 20240601,
        }
    }
}

fn ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let k = r.round();
    if k < 1.0 || (r - k).abs() > 1e-6 {
        return Err(Error::Config(format!("{what} must be a positive integer multiple ({num} / {den} = {r})")));
    }
    Ok(k as usize)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h <= self.sample_period) {
            return Err(Error::Config(format!("need 0 < h <= T_s, got h = {}, T_s = {}", self.h, self.sample_period)));
        }
        ratio(self.sample_period, self.h, "T_s / h")?;
        ratio(self.window, self.h, "T / h")?;
        ratio(self.window, self.sample_period, "T / T_s")?;
        if self.t1 < 0.0 {
            return Err(Error::Config("t1 must be non-negative".into()));
        }
        ratio(self.t1 + self.sample_period, self.sample_period, "t1 / T_s + 1")?;
        if self.n_samples == 0 || self.n_paths == 0 {
            return Err(Error::Config("n_samples and n_paths must be at least 1".into()));
        }
        Ok(())
    }

    /// Integration steps per sampling period.
    pub fn steps_per_sample(&self) -> usize {
        (self.sample_period / self.h).round() as usize
    }

    /// Sampling periods per window.
    pub fn window_samples(&self) -> usize {
        (self.window / self.sample_period).round() as usize
    }

    /// Sample index of `t1`.
    pub fn first_sample(&self) -> usize {
        (self.t1 / self.sample_period).round() as usize
    }

    /// Number of stored sample instants, starting at `t = 0`.
    pub fn grid_len(&self) -> usize {
        self.first_sample() + self.n_samples + self.window_samples()
    }

    pub fn horizon(&self) -> f64 {
        (self.grid_len() - 1) as f64 * self.sample_period
    }

    pub fn total_steps(&self) -> usize {
        (self.grid_len() - 1) * self.steps_per_sample()
    }

    /// Config whose grid covers `[0, horizon]` with rows on `[0, horizon - T]`.
    pub fn covering(&self, horizon: f64) -> Result<Self> {
        let total = ratio(horizon, self.sample_period, "horizon / T_s")?;
        let w = self.window_samples();
        if total < w {
            return Err(Error::Config(format!("horizon {horizon} shorter than the window")));
        }
        Ok(Self { t1: 0.0, n_samples: total - w + 1, ..self.clone() })
    }
}

/// `u(t) = a * sum_j sin(omega_j t)` with frequencies drawn once from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbingSignal {
    pub amplitude: f64,
    pub frequencies: Vec<f64>,
    pub seed: u64,
}

impl ProbingSignal {
    pub fn new(amplitude: f64, count: usize, range: (f64, f64), seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("probing signal needs at least one sinusoid".into()));
        }
        if !(range.0 < range.1) {
            return Err(Error::Config(format!("empty frequency range [{}, {}]", range.0, range.1)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..count).map(|_| rng.random_range(range.0..range.1)).collect();
        Ok(Self { amplitude, frequencies, seed })
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * self.frequencies.iter().map(|w| (w * t).sin()).sum::<f64>()
    }

    pub fn bound(&self) -> f64 {
        self.amplitude.abs() * self.frequencies.len() as f64
    }
}

/// Deterministic open-loop input shared by every path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSignal {
    Zero { channels: usize },
    /// One probing signal per input channel.
    Probing(Vec<ProbingSignal>),
}

impl InputSignal {
    pub fn channels(&self) -> usize {
        match self {
            InputSignal::Zero { channels } => *channels,
            InputSignal::Probing(v) => v.len(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            InputSignal::Zero { .. } => true,
            InputSignal::Probing(v) => v.iter().all(|p| p.amplitude == 0.0),
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            InputSignal::Zero { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            InputSignal::Probing(sig) => {
                for (o, s) in out.iter_mut().zip(sig) {
                    *o = s.eval(t);
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.channels());
        self.eval_into(t, out.as_mut_slice());
        out
    }
}

/// Samples of one trajectory on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PathRecord {
    pub times: Vec<f64>,
    /// `n x len`, one column per instant.
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
    pub seed: Option<u64>,
}

fn check_blowup(x: &[f64], path: usize, time: f64) -> Result<()> {
    let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(nrm <= BLOWUP_NORM) {
        return Err(Error::Blowup { path, time });
    }
    Ok(())
}

/// `out = a * x` for column-major `a`.
pub(crate) fn matvec(out: &mut [f64], a: &DMatrix<f64>, x: &[f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matvec_add(out, a, x, 1.0);
}

/// `out += scale * a * x`.
pub(crate) fn matvec_add(out: &mut [f64], a: &DMatrix<f64>, x: &[f64], scale: f64) {
    let rows = a.nrows();
    let data = a.as_slice();
    for (j, xj) in x.iter().enumerate() {
        let s = scale * xj;
        if s == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        for (o, c) in out.iter_mut().zip(col) {
            *o += s * c;
        }
    }
}

/// Euler–Maruyama path of the plant on `[0, horizon]` with step `h`.
pub fn simulate_sde_path(
    sys: &StochasticSystem,
    input: &InputSignal,
    x0: &DVector<f64>,
    h: f64,
    horizon: f64,
    seed: u64,
) -> Result<PathRecord> {
    let (n, m) = (sys.n(), sys.m());
    if x0.len() != n || input.channels() != m {
        return Err(Error::Dimension("initial state or input width does not match the plant".into()));
    }
    let steps = ratio(horizon, h, "horizon / h")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = DMatrix::zeros(n, steps + 1);
    let mut inputs = DMatrix::zeros(m, steps + 1);
    let mut x = x0.as_slice().to_vec();
    let mut u = vec![0.0; m];
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let sqrt_h = h.sqrt();
    let mut times = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * h;
        times.push(t);
        input.eval_into(t, &mut u);
        states.column_mut(k).copy_from_slice(&x);
        inputs.column_mut(k).copy_from_slice(&u);
        if k == steps {
            break;
        }
        matvec(&mut drift, sys.a(), &x);
        matvec_add(&mut drift, sys.b(), &u, 1.0);
        matvec(&mut diff, sys.c(), &x);
        matvec_add(&mut diff, sys.d(), &u, 1.0);
        let xi: f64 = rng.sample(StandardNormal);
        let dw = sqrt_h * xi;
        for i in 0..n {
            x[i] += drift[i] * h + diff[i] * dw;
        }
        check_blowup(&x, 0, t + h)?;
    }
    let outputs = sys.h() * &states;
    Ok(PathRecord { times, states, inputs, outputs, seed: Some(seed) })
}

/// Classical RK4 for `x' = A x + B u(t)`.
pub fn simulate_ode(
    a: &DMatrix<f64>,
    forcing: Option<(&DMatrix<f64>, &InputSignal)>,
    x0: &DVector<f64>,
    h: f64,
    horizon: f64,
) -> Result<PathRecord> {
    let n = a.nrows();
    if !a.is_square() || x0.len() != n {
        return Err(Error::Dimension("ODE matrix and initial state disagree".into()));
    }
    let steps = ratio(horizon, h, "horizon / h")?;
    let m = forcing.map_or(0, |(b, _)| b.ncols());
    let rhs = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let mut dx = a * x;
        if let Some((b, sig)) = forcing {
            dx += b * sig.eval(t);
        }
        dx
    };
    let mut states = DMatrix::zeros(n, steps + 1);
    let mut inputs = DMatrix::zeros(m, steps + 1);
    let mut x = x0.clone();
    let mut times = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * h;
        times.push(t);
        states.set_column(k, &x);
        if let Some((_, sig)) = forcing {
            inputs.set_column(k, &sig.eval(t));
        }
        if k == steps {
            break;
        }
        x = rk4_step(&rhs, t, &x, h);
        check_blowup(x.as_slice(), 0, t + h)?;
    }
    Ok(PathRecord { times, outputs: states.clone(), states, inputs, seed: None })
}

pub(crate) fn rk4_step<F: Fn(f64, &DVector<f64>) -> DVector<f64>>(f: &F, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Number of columns stored per quantity at each sample instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub n: usize,
    pub m: usize,
    pub nd: usize,
}

/// Expectations of the discounted data on the sampling grid.
///
/// Column `k` of every array refers to `t_k = k T_s`. The `cum_*` arrays hold
/// running integrals from `t = 0`, so a window integral is a difference of two
/// columns. `chi` is the discounted state and `v` the discounted input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentGrid {
    pub dims: GridDims,
    pub sample_period: f64,
    pub n_paths: usize,
    /// `E chi`, `n x L`.
    pub mean: DMatrix<f64>,
    /// `vec E[chi chi']`, `n^2 x L`.
    pub second: DMatrix<f64>,
    /// Path variance of `vec(chi chi')`; empty for exact moments.
    pub second_var: DMatrix<f64>,
    /// Discounted input `v`, `m x L`.
    pub input: DMatrix<f64>,
    /// Reference state `x_d`, `nd x L`.
    pub x_d: DMatrix<f64>,
    /// `E[x_d ⊗ chi]`, `nd n x L`.
    pub xd_chi: DMatrix<f64>,
    /// `∫ vec E[chi chi']`.
    pub cum_s: DMatrix<f64>,
    /// `∫ vec E[chi v']`, `n m x L`.
    pub cum_w: DMatrix<f64>,
    /// `∫ vec(v v')`.
    pub cum_v: DMatrix<f64>,
    /// `∫ E[x_d ⊗ chi]`.
    pub cum_xd_chi: DMatrix<f64>,
    /// `∫ x_d ⊗ v`.
    pub cum_xd_v: DMatrix<f64>,
}

fn reshape(col: nalgebra::DVectorView<'_, f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, col.as_slice())
}

impl MomentGrid {
    pub fn len(&self) -> usize {
        self.mean.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.sample_period
    }

    /// `E[chi chi']` at sample `k`.
    pub fn g(&self, k: usize) -> DMatrix<f64> {
        let n = self.dims.n;
        reshape(self.second.column(k).as_view(), n, n)
    }

    /// `E ∫ chi chi'` over `[t_a, t_b]`.
    pub fn s_between(&self, a: usize, b: usize) -> DMatrix<f64> {
        let n = self.dims.n;
        reshape((self.cum_s.column(b) - self.cum_s.column(a)).as_view(), n, n)
    }

    /// `E ∫ chi v'` over `[t_a, t_b]`, `n x m`.
    pub fn w_between(&self, a: usize, b: usize) -> DMatrix<f64> {
        reshape((self.cum_w.column(b) - self.cum_w.column(a)).as_view(), self.dims.n, self.dims.m)
    }

    pub fn v_between(&self, a: usize, b: usize) -> DMatrix<f64> {
        let m = self.dims.m;
        reshape((self.cum_v.column(b) - self.cum_v.column(a)).as_view(), m, m)
    }

    pub fn xd_chi_at(&self, k: usize) -> DVector<f64> {
        self.xd_chi.column(k).into_owned()
    }

    pub fn xd_chi_between(&self, a: usize, b: usize) -> DVector<f64> {
        self.cum_xd_chi.column(b) - self.cum_xd_chi.column(a)
    }

    pub fn xd_v_between(&self, a: usize, b: usize) -> DVector<f64> {
        self.cum_xd_v.column(b) - self.cum_xd_v.column(a)
    }

    /// Standard error of `E[chi chi']` at sample `k`; `None` for exact moments.
    pub fn g_std_error(&self, k: usize) -> Option<DMatrix<f64>> {
        if self.second_var.ncols() == 0 {
            return None;
        }
        let n = self.dims.n;
        let var = reshape(self.second_var.column(k).as_view(), n, n);
        Some(var.map(|v| (v.max(0.0) / self.n_paths as f64).sqrt()))
    }
}

/// What to simulate: the plant, its open-loop input, the reference and the discount.
#[derive(Clone, Debug)]
pub struct DataSpec<'a> {
    pub system: &'a StochasticSystem,
    pub input: &'a InputSignal,
    pub x0: &'a DVector<f64>,
    pub reference: &'a ReferenceGenerator,
    /// Rate `(gamma - alpha0) / 2` of the transform `chi = exp(-rate t) x`.
    pub discount: f64,
}

impl DataSpec<'_> {
    fn check(&self) -> Result<()> {
        if self.x0.len() != self.system.n() {
            return Err(Error::Dimension(format!(
                "x0 has {} entries, plant has {} states",
                self.x0.len(),
                self.system.n()
            )));
        }
        if self.input.channels() != self.system.m() {
            return Err(Error::Dimension(format!(
                "input has {} channels, plant has {}",
                self.input.channels(),
                self.system.m()
            )));
        }
        Ok(())
    }

    fn dims(&self) -> GridDims {
        GridDims { n: self.system.n(), m: self.system.m(), nd: self.reference.n_d() }
    }
}

/// Ensemble output with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDataset {
    pub config: SimConfig,
    pub plant_hash: String,
    pub discount: f64,
    pub x0: DVector<f64>,
    pub input: InputSignal,
    pub created_at: String,
    pub grid: MomentGrid,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn config_grid_arithmetic() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.steps_per_sample(), 10);
        assert_eq!(cfg.window_samples(), 100);
        assert_eq!(cfg.grid_len(), 5101);
        assert!((cfg.horizon() - 5.1).abs() < 1e-12);
        let cov = cfg.covering(5.0).unwrap();
        assert_eq!(cov.n_samples, 4901);
        assert_eq!(cov.grid_len(), 5001);
        let bad = SimConfig { h: 3e-4, ..SimConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn probing_signal_properties() {
        let one = ProbingSignal::new(1.0, 1, (-100.0, 100.0), 9).unwrap();
        assert_eq!(one.eval(0.0), 0.0);
        let sig = ProbingSignal::new(10.0, 50, (-100.0, 100.0), 11).unwrap();
        let again = ProbingSignal::new(10.0, 50, (-100.0, 100.0), 11).unwrap();
        for k in 0..5000 {
            let t = k as f64 * 1e-3;
            let u = sig.eval(t);
            assert!(u.abs() <= 500.0);
            assert_eq!(u.to_bits(), again.eval(t).to_bits());
        }
        assert!(ProbingSignal::new(1.0, 0, (0.0, 1.0), 0).is_err());
    }

    #[test]
    fn sde_trivial_paths() {
        let zero = StochasticSystem::new(s(0.0), s(0.0), s(0.0), s(0.0), s(1.0)).unwrap();
        let x0 = DVector::from_element(1, 0.7);
        let p = simulate_sde_path(&zero, &InputSignal::Zero { channels: 1 }, &x0, 1e-3, 1.0, 1).unwrap();
        assert!(p.states.iter().all(|v| *v == 0.7));
        let decay = StochasticSystem::new(s(-1.0), s(0.0), s(0.0), s(0.0), s(1.0)).unwrap();
        let h = 1e-3;
        let p = simulate_sde_path(&decay, &InputSignal::Zero { channels: 1 }, &DVector::from_element(1, 1.0), h, 1.0, 1).unwrap();
        let last = p.states[(0, p.states.ncols() - 1)];
        assert!((last - (-1f64).exp()).abs() <= 5.0 * h);
    }

    #[test]
    fn sde_blowup_is_reported() {
        let wild = StochasticSystem::new(s(50.0), s(0.0), s(0.0), s(0.0), s(1.0)).unwrap();
        let err = simulate_sde_path(&wild, &InputSignal::Zero { channels: 1 }, &DVector::from_element(1, 1.0), 1e-3, 1.0, 1);
        assert!(matches!(err, Err(Error::Blowup { .. })));
    }

    #[test]
    fn reference_oscillator_returns_after_one_period() {
        let a_d = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -5.0, 0.0]);
        let x0 = DVector::from_vec(vec![5f64.sqrt(), 0.5, 0.5]);
        let period = 2.0 * std::f64::consts::PI / 5f64.sqrt();
        let steps = 4000;
        let p = simulate_ode(&a_d, None, &x0, period / steps as f64, period).unwrap();
        let last = p.states.column(steps).into_owned();
        assert!((last - &x0).amax() < 1e-6);
        let k = 1234;
        let exact = (&a_d * p.times[k]).exp() * &x0;
        assert!((p.states.column(k) - exact).amax() < 1e-9);
    }

    #[test]
    fn skew_generator_conserves_norm() {
        let f_a = DMatrix::from_row_slice(3, 3, &[0.0, -1.5604, 0.1161, 1.5604, 0.0, -0.2366, -0.1161, 0.2366, 0.0]);
        let y0 = DVector::from_vec(vec![0.5, 0.85, 0.25]);
        let p = simulate_ode(&f_a, None, &y0, 1e-3, 10.0).unwrap();
        let n0 = y0.norm();
        for col in p.states.column_iter() {
            assert!((col.norm() - n0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_ode_is_constant() {
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let p = simulate_ode(&DMatrix::zeros(2, 2), None, &x0, 0.1, 1.0).unwrap();
        assert!(p.states.column_iter().all(|c| c == x0));
    }
}
