//! Fixtures shared by unit tests.

use nalgebra::{DMatrix, DVector};

use crate::model::{BpiHyperParams, CostWeights, ReferenceGenerator, StochasticSystem, TrackingProblem};
use crate::regressors::MomentTable;
use crate::sim::{propagate_moments_exact, DataSpec, InputSignal, ProbingSignal, SimConfig};

pub(crate) fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let mut out = Vec::new();
    for p in parts {
        out.extend(p.iter().copied());
    }
    DVector::from_vec(out)
}

fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub(crate) fn example_one_reference() -> ReferenceGenerator {
    ReferenceGenerator::new(
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -5.0, 0.0]),
        DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
        DVector::from_vec(vec![5f64.sqrt(), 0.5, 0.5]),
    )
    .unwrap()
}

pub(crate) struct ExampleOne {
    pub problem: TrackingProblem,
    pub probing: InputSignal,
    pub x0: DVector<f64>,
    pub cfg: SimConfig,
}

pub(crate) fn example_one() -> ExampleOne {
    let sys = StochasticSystem::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -5.0, -0.5]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.2, 0.3]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
    )
    .unwrap();
    let cost = CostWeights::new(s(10.0), s(0.01)).unwrap();
    let problem = TrackingProblem::new(sys, example_one_reference(), cost, BpiHyperParams::defaults(2)).unwrap();
    let probing = InputSignal::Probing(vec![ProbingSignal::new(10.0, 50, (-100.0, 100.0), 7).unwrap()]);
    ExampleOne { problem, probing, x0: DVector::zeros(2), cfg: SimConfig::default() }
}

impl ExampleOne {
    pub fn table_for(&self, input: &InputSignal, reference: &ReferenceGenerator, n_samples: usize) -> MomentTable {
        let cfg = SimConfig { n_samples, ..self.cfg.clone() };
        let spec = DataSpec {
            system: &self.problem.system,
            input,
            x0: &self.x0,
            reference,
            discount: self.problem.hyper.discount(),
        };
        let grid = propagate_moments_exact(&spec, &cfg).unwrap();
        MomentTable::from_grid(&grid, self.problem.system.h(), cfg.first_sample(), n_samples, cfg.window_samples())
            .unwrap()
    }

    pub fn table_with_input(&self, input: &InputSignal, n_samples: usize) -> MomentTable {
        self.table_for(input, &self.problem.reference, n_samples)
    }

    pub fn probing_table(&self) -> MomentTable {
        self.table_with_input(&self.probing, self.cfg.n_samples)
    }
}

pub(crate) struct ExampleTwo {
    pub problem: TrackingProblem,
    pub a_a: DMatrix<f64>,
    pub f_a: DMatrix<f64>,
    pub y_a0: DVector<f64>,
    pub u_a: InputSignal,
    pub x0s: [DVector<f64>; 2],
    pub segment: f64,
    pub cfg: SimConfig,
}

pub(crate) fn example_two() -> ExampleTwo {
    let sys = StochasticSystem::new(
        DMatrix::from_row_slice(4, 4, &[0.0, 1.0, 0.0, 0.0, -2.5, 0.0, 1.25, 0.0, 0.0, 0.0, 0.0, 1.0, 1.25, 0.0, -1.25, 0.0]),
        DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::identity(4, 4) * 0.01,
        DMatrix::zeros(4, 1),
        DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]),
    )
    .unwrap();
    let cost = CostWeights::new(s(100.0), s(1.0)).unwrap();
    let mut hyper = BpiHyperParams::defaults(4);
    hyper.theta = DMatrix::identity(4, 4) * 10.0;
    let problem = TrackingProblem::new(sys, example_one_reference(), cost, hyper).unwrap();
    let a_a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.8621, 0.5503, -0.1755, -0.3494, 2904.0, -27.1262, -446.529, 3033.6, -2.7848, -0.5140, -0.2129, 0.0238,
            0.5827, -0.7117, 0.2438, 2.770,
        ],
    );
    let f_a = DMatrix::from_row_slice(3, 3, &[0.0, -1.5604, 0.1161, 1.5604, 0.0, -0.2366, -0.1161, 0.2366, 0.0]);
    ExampleTwo {
        problem,
        a_a,
        f_a,
        y_a0: DVector::from_vec(vec![0.5, 0.85, 0.25]),
        u_a: InputSignal::Probing(vec![ProbingSignal::new(5.0, 100, (-100.0, 100.0), 11).unwrap()]),
        x0s: [DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]), DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0])],
        segment: 5.0,
        cfg: SimConfig::default(),
    }
}

impl ExampleTwo {
    pub fn plant_table(&self) -> MomentTable {
        let cfg = self.cfg.covering(self.segment).unwrap();
        let input = InputSignal::Zero { channels: 1 };
        let parts: Vec<MomentTable> = self
            .x0s
            .iter()
            .map(|x0| {
                let spec = DataSpec {
                    system: &self.problem.system,
                    input: &input,
                    x0,
                    reference: &self.problem.reference,
                    discount: self.problem.hyper.discount(),
                };
                let grid = propagate_moments_exact(&spec, &cfg).unwrap();
                MomentTable::from_grid(&grid, self.problem.system.h(), 0, cfg.n_samples, cfg.window_samples()).unwrap()
            })
            .collect();
        MomentTable::concat(&parts).unwrap()
    }

    /// Shadow table over `[0, horizon]`, one row per sample.
    pub fn shadow_table_with(&self, input: &InputSignal, x_a0: &DVector<f64>, horizon: f64) -> MomentTable {
        let cfg = self.cfg.covering(horizon).unwrap();
        let sys = self.problem.system.b().clone();
        let shadow = StochasticSystem::new(
            self.a_a.clone(),
            sys,
            DMatrix::zeros(4, 4),
            DMatrix::zeros(4, 1),
            self.problem.system.h().clone(),
        )
        .unwrap();
        let reference = ReferenceGenerator::new(self.f_a.clone(), DMatrix::zeros(1, 3), self.y_a0.clone()).unwrap();
        let spec = DataSpec { system: &shadow, input, x0: x_a0, reference: &reference, discount: 0.0 };
        let grid = propagate_moments_exact(&spec, &cfg).unwrap();
        MomentTable::from_grid(&grid, shadow.h(), 0, cfg.n_samples, cfg.window_samples()).unwrap()
    }

    /// Shadow rows paired with the two plant segments.
    pub fn shadow_table(&self) -> MomentTable {
        let full = self.shadow_table_with(&self.u_a, &DVector::zeros(4), 2.0 * self.segment);
        let per = self.cfg.covering(self.segment).unwrap().n_samples;
        let offset = (self.segment / self.cfg.sample_period).round() as usize;
        let idx: Vec<usize> = (0..per).chain(offset..offset + per).collect();
        full.select(&idx).unwrap()
    }
}
