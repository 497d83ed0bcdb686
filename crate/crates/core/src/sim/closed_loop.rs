use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_blowup, matvec, matvec_add, ratio};
use crate::error::{Error, Result};
use crate::model::{CostWeights, ReferenceGenerator, StochasticSystem};

const CHUNK: usize = 50;

/// Reference output map and feedforward gain active for `duration` time units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSegment {
    pub duration: f64,
    pub h_d: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

/// Ensemble-mean output against the reference on the sampling grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingTrace {
    pub times: Vec<f64>,
    /// `q x L`.
    pub y_mean: DMatrix<f64>,
    pub y_d: DMatrix<f64>,
    /// `m x L` mean input `-K E x - F x_d`.
    pub u_mean: DMatrix<f64>,
    /// Index of the active segment at each sample.
    pub segment: Vec<usize>,
    pub n_paths: usize,
}

impl TrackingTrace {
    /// Largest `|E y - y_d|` over the last `tail` time units of each segment.
    pub fn settled_errors(&self, tail: f64) -> Vec<f64> {
        let nseg = self.segment.iter().copied().max().map_or(0, |s| s + 1);
        let mut out = vec![0.0_f64; nseg];
        for s in 0..nseg {
            let idx: Vec<usize> = (0..self.times.len()).filter(|&k| self.segment[k] == s).collect();
            let Some(&end) = idx.last() else { continue };
            let t_end = self.times[end];
            for &k in &idx {
                if self.times[k] >= t_end - tail {
                    let e = (self.y_mean.column(k) - self.y_d.column(k)).amax();
                    out[s] = out[s].max(e);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub horizon: f64,
}

/// Paired estimate of two policies driven by the same noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub first: CostEstimate,
    pub second: CostEstimate,
    /// Mean of `cost(first) - cost(second)` over paths.
    pub diff_mean: f64,
    pub diff_std_error: f64,
}

struct Plan<'a> {
    sys: &'a StochasticSystem,
    h: f64,
    steps: usize,
    x0: DVector<f64>,
    x_d: DMatrix<f64>,
    /// Segment index per integration step.
    active: Vec<usize>,
}

impl<'a> Plan<'a> {
    fn new(sys: &'a StochasticSystem, reference: &ReferenceGenerator, x0: &DVector<f64>, durations: &[f64], h: f64) -> Result<Self> {
        if x0.len() != sys.n() {
            return Err(Error::Dimension("closed-loop initial state has the wrong length".into()));
        }
        let mut active = Vec::new();
        for (s, d) in durations.iter().enumerate() {
            let n = ratio(*d, h, "segment duration / h")?;
            active.extend(std::iter::repeat_n(s, n));
        }
        let steps = active.len();
        active.push(durations.len().saturating_sub(1));
        let x_d = super::simulate_ode(reference.a_d(), None, reference.x_d0(), h, steps as f64 * h)?.states;
        Ok(Self { sys, h, steps, x0: x0.clone(), x_d, active })
    }
}

/// One path under `u = -K x - F_s x_d`; returns the running cost integral and
/// calls `record(k, x)` at every step.
fn closed_loop_path(
    plan: &Plan<'_>,
    k_gain: &DMatrix<f64>,
    f_gains: &[&DMatrix<f64>],
    outputs: &[&DMatrix<f64>],
    cost: Option<&CostWeights>,
    seed: u64,
    path: usize,
    mut record: impl FnMut(usize, &[f64]),
) -> Result<f64> {
    let sys = plan.sys;
    let (n, m, q) = (sys.n(), sys.m(), sys.q());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = plan.x0.as_slice().to_vec();
    let mut u = vec![0.0; m];
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut y = vec![0.0; q];
    let mut yd = vec![0.0; q];
    let mut qe = vec![0.0; q];
    let mut ru = vec![0.0; m];
    let sqrt_h = plan.h.sqrt();
    let mut acc = 0.0;
    let mut prev = 0.0;
    for k in 0..=plan.steps {
        let s = plan.active[k];
        let xd = plan.x_d.column(k);
        matvec(&mut u, k_gain, &x);
        matvec_add(&mut u, f_gains[s], xd.as_slice(), 1.0);
        u.iter_mut().for_each(|v| *v = -*v);
        record(k, &x);
        if let Some(c) = cost {
            matvec(&mut y, sys.h(), &x);
            matvec(&mut yd, outputs[s], xd.as_slice());
            for (a, b) in y.iter_mut().zip(&yd) {
                *a -= b;
            }
            matvec(&mut qe, c.q(), &y);
            matvec(&mut ru, c.r(), &u);
            let cur: f64 = y.iter().zip(&qe).map(|(a, b)| a * b).sum::<f64>() + u.iter().zip(&ru).map(|(a, b)| a * b).sum::<f64>();
            if k > 0 {
                acc += 0.5 * plan.h * (prev + cur);
            }
            prev = cur;
        }
        if k == plan.steps {
            break;
        }
        matvec(&mut drift, sys.a(), &x);
        matvec_add(&mut drift, sys.b(), &u, 1.0);
        matvec(&mut diff, sys.c(), &x);
        matvec_add(&mut diff, sys.d(), &u, 1.0);
        let xi: f64 = rng.sample(StandardNormal);
        let dw = sqrt_h * xi;
        for i in 0..n {
            x[i] += drift[i] * plan.h + diff[i] * dw;
        }
        check_blowup(&x, path, (k + 1) as f64 * plan.h)?;
    }
    Ok(acc)
}

fn chunks(n_paths: usize) -> Vec<std::ops::Range<usize>> {
    (0..n_paths).step_by(CHUNK).map(|lo| lo..(lo + CHUNK).min(n_paths)).collect()
}

fn check_gains(sys: &StochasticSystem, reference: &ReferenceGenerator, k: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<()> {
    if k.shape() != (sys.m(), sys.n()) || f.shape() != (sys.m(), reference.n_d()) {
        return Err(Error::Dimension(format!(
            "gains must be {m}x{n} and {m}x{nd}",
            m = sys.m(),
            n = sys.n(),
            nd = reference.n_d()
        )));
    }
    Ok(())
}

/// Mean output of the closed loop over a schedule of reference outputs.
#[allow(clippy::too_many_arguments)]
pub fn simulate_tracking(
    sys: &StochasticSystem,
    reference: &ReferenceGenerator,
    k: &DMatrix<f64>,
    segments: &[TrackingSegment],
    x0: &DVector<f64>,
    h: f64,
    sample_period: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<TrackingTrace> {
    if segments.is_empty() || n_paths == 0 {
        return Err(Error::Config("tracking needs at least one segment and one path".into()));
    }
    for seg in segments {
        check_gains(sys, reference, k, &seg.f)?;
    }
    let durations: Vec<f64> = segments.iter().map(|s| s.duration).collect();
    let plan = Plan::new(sys, reference, x0, &durations, h)?;
    let per = ratio(sample_period, h, "T_s / h")?;
    let len = plan.steps / per + 1;
    let f_gains: Vec<&DMatrix<f64>> = segments.iter().map(|s| &s.f).collect();
    let outputs: Vec<&DMatrix<f64>> = segments.iter().map(|s| &s.h_d).collect();
    let n = sys.n();
    let partial: Vec<Result<DMatrix<f64>>> = chunks(n_paths)
        .into_par_iter()
        .map(|range| {
            let mut sum = DMatrix::zeros(n, len);
            for p in range {
                closed_loop_path(&plan, k, &f_gains, &outputs, None, base_seed.wrapping_add(p as u64), p, |step, x| {
                    if step % per == 0 {
                        for (o, v) in sum.column_mut(step / per).iter_mut().zip(x) {
                            *o += v;
                        }
                    }
                })?;
            }
            Ok(sum)
        })
        .collect();
    let mut total = DMatrix::zeros(n, len);
    for part in partial {
        total += part?;
    }
    let x_mean = total / n_paths as f64;
    let y_mean = sys.h() * &x_mean;
    let mut y_d = DMatrix::zeros(sys.q(), len);
    let mut u_mean = DMatrix::zeros(sys.m(), len);
    let mut segment = Vec::with_capacity(len);
    let mut times = Vec::with_capacity(len);
    for s in 0..len {
        let step = s * per;
        let seg = plan.active[step];
        segment.push(seg);
        times.push(step as f64 * h);
        y_d.set_column(s, &(&segments[seg].h_d * plan.x_d.column(step)));
        u_mean.set_column(s, &-(k * x_mean.column(s) + &segments[seg].f * plan.x_d.column(step)));
    }
    Ok(TrackingTrace { times, y_mean, y_d, u_mean, segment, n_paths })
}

fn path_costs(
    plan: &Plan<'_>,
    gains: &[(&DMatrix<f64>, &DMatrix<f64>)],
    h_d: &DMatrix<f64>,
    cost: &CostWeights,
    n_paths: usize,
    base_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let partial: Vec<Result<Vec<Vec<f64>>>> = chunks(n_paths)
        .into_par_iter()
        .map(|range| {
            let mut out = Vec::with_capacity(range.len());
            for p in range {
                let seed = base_seed.wrapping_add(p as u64);
                let mut row = Vec::with_capacity(gains.len());
                for (k, f) in gains {
                    row.push(closed_loop_path(plan, k, &[*f], &[h_d], Some(cost), seed, p, |_, _| {})?);
                }
                out.push(row);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(n_paths);
    for part in partial {
        all.extend(part?);
    }
    Ok(all)
}

fn summarize(values: &[f64], horizon: f64) -> CostEstimate {
    let n = values.len() as f64;
    let scaled: Vec<f64> = values.iter().map(|v| v / horizon).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    CostEstimate { mean, std_error: (var / n).sqrt(), n_paths: values.len(), horizon }
}

/// `(1 / T_h) E ∫_0^{T_h} |y - y_d|_Q^2 + |u|_R^2 dt` under `u = -K x - F x_d`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_average_cost(
    sys: &StochasticSystem,
    reference: &ReferenceGenerator,
    k: &DMatrix<f64>,
    f: &DMatrix<f64>,
    cost: &CostWeights,
    x0: &DVector<f64>,
    horizon: f64,
    h: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<CostEstimate> {
    check_gains(sys, reference, k, f)?;
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let plan = Plan::new(sys, reference, x0, &[horizon], h)?;
    let costs = path_costs(&plan, &[(k, f)], reference.h_d(), cost, n_paths, base_seed)?;
    let first: Vec<f64> = costs.iter().map(|r| r[0]).collect();
    Ok(summarize(&first, horizon))
}

/// Average costs of two policies on common noise, with a paired difference.
#[allow(clippy::too_many_arguments)]
pub fn compare_average_cost(
    sys: &StochasticSystem,
    reference: &ReferenceGenerator,
    first: (&DMatrix<f64>, &DMatrix<f64>),
    second: (&DMatrix<f64>, &DMatrix<f64>),
    cost: &CostWeights,
    x0: &DVector<f64>,
    horizon: f64,
    h: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<CostComparison> {
    check_gains(sys, reference, first.0, first.1)?;
    check_gains(sys, reference, second.0, second.1)?;
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let plan = Plan::new(sys, reference, x0, &[horizon], h)?;
    let costs = path_costs(&plan, &[first, second], reference.h_d(), cost, n_paths, base_seed)?;
    let a: Vec<f64> = costs.iter().map(|r| r[0]).collect();
    let b: Vec<f64> = costs.iter().map(|r| r[1]).collect();
    let d: Vec<f64> = costs.iter().map(|r| r[0] - r[1]).collect();
    let diff = summarize(&d, horizon);
    Ok(CostComparison {
        first: summarize(&a, horizon),
        second: summarize(&b, horizon),
        diff_mean: diff.mean,
        diff_std_error: diff.std_error,
    })
}
