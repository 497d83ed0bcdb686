//! Experiment configuration (`slqt-config/1`).
//!
//! Matrices are row-major nested arrays, vectors are flat arrays. Every block
//! is checked by [`ExperimentConfig::validate`] before any computation starts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{LearnOptions, ShadowConfig};
use crate::model::{BpiHyperParams, CostWeights, ReferenceGenerator, StochasticSystem, StopRule, TrackingProblem};
use crate::regressors::{ShadowForm, RANK_TOL};
use crate::sim::{InputSignal, ProbingSignal, SimConfig, TrackingSegment};

pub const CONFIG_SCHEMA: &str = "slqt-config/1";

/// Seed offset between consecutive data segments.
pub const SEGMENT_SEED_STRIDE: u64 = 1_000_000;

const EXAMPLE_ONE: &str = include_str!("../configs/example1.json");
const EXAMPLE_TWO: &str = include_str!("../configs/example2.json");

/// Serde adapter for matrices stored as row-major nested arrays.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || ncols == 0 {
            return Err("matrix must have at least one row and one column".into());
        }
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("matrix rows have different lengths".into());
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    /// Lists of matrices.
    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter().map(|r| from_rows(r).map_err(D::Error::custom)).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ModelBased,
    DataDriven,
    Shadow,
}

/// Where the learner's moments come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    #[default]
    MonteCarlo,
    /// Exact moment propagation from the model (oracle runs only).
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantBlock {
    #[serde(with = "rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "rows")]
    pub d: DMatrix<f64>,
    #[serde(with = "rows")]
    pub h: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceBlock {
    #[serde(with = "rows")]
    pub a_d: DMatrix<f64>,
    #[serde(with = "rows")]
    pub h_d: DMatrix<f64>,
    pub x_d0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    #[serde(with = "rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "rows")]
    pub r: DMatrix<f64>,
}

fn default_max_iter() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperBlock {
    pub gamma: f64,
    pub alpha0: f64,
    pub eta: f64,
    #[serde(with = "rows")]
    pub theta: DMatrix<f64>,
    pub epsilon: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Phase-II stop of the model-based iteration.
    #[serde(default)]
    pub stop_rule: StopRule,
    /// Evaluate the SARE residual with the printed sign convention.
    #[serde(default)]
    pub sare_as_printed: bool,
}

fn value_change() -> StopRule {
    StopRule::ValueChange
}

fn default_rank_tol() -> f64 {
    RANK_TOL
}

fn default_stall_limit() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerBlock {
    #[serde(default = "value_change")]
    pub stop_rule: StopRule,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_stall_limit")]
    pub stall_limit: usize,
}

impl Default for LearnerBlock {
    fn default() -> Self {
        Self { stop_rule: value_change(), rank_tol: RANK_TOL, stall_limit: 3 }
    }
}

/// `u(t) = amplitude * sum_{j=1}^{count} sin(omega_j t)`, `omega_j ~ U(range)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbingBlock {
    pub amplitude: f64,
    pub count: usize,
    pub range: [f64; 2],
    pub seed: u64,
}

impl ProbingBlock {
    pub fn signal(&self) -> Result<ProbingSignal> {
        ProbingSignal::new(self.amplitude, self.count, (self.range[0], self.range[1]), self.seed)
    }
}

fn input_from(blocks: &[ProbingBlock], channels: usize) -> Result<InputSignal> {
    if blocks.is_empty() {
        return Ok(InputSignal::Zero { channels });
    }
    Ok(InputSignal::Probing(blocks.iter().map(ProbingBlock::signal).collect::<Result<_>>()?))
}

/// One data-collection run from `x0`.
///
/// Without `duration` the rows follow `sim.t1` and `sim.n_samples`; with it the
/// rows cover `[0, duration - T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentBlock {
    pub x0: Vec<f64>,
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowBlock {
    #[serde(with = "rows")]
    pub a_a: DMatrix<f64>,
    pub input: Vec<ProbingBlock>,
    pub x_a0: Vec<f64>,
    #[serde(with = "rows")]
    pub f_a: DMatrix<f64>,
    pub y_a0: Vec<f64>,
    #[serde(default)]
    pub form: ShadowForm,
}

/// Reference case (1-based index into `feedforward_cases`) held for `duration`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioStep {
    pub case: usize,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    pub name: String,
    pub steps: Vec<ScenarioStep>,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    /// Sampling period of the written trace.
    pub sample_period: f64,
}

/// Noise-aware gains against gains designed for `C = 0, D = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCheckBlock {
    pub case: usize,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Integration step of the closed-loop paths.
    pub h: f64,
    pub x0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub name: String,
    pub mode: Mode,
    pub plant: PlantBlock,
    pub reference: ReferenceBlock,
    pub cost: CostBlock,
    pub hyper: HyperBlock,
    #[serde(default)]
    pub learner: LearnerBlock,
    pub sim: SimConfig,
    #[serde(default)]
    pub moments: MomentSource,
    /// One block per input channel; empty means `u = 0`.
    #[serde(default)]
    pub probing: Vec<ProbingBlock>,
    #[serde(default)]
    pub segments: Vec<SegmentBlock>,
    #[serde(default)]
    pub shadow: Option<ShadowBlock>,
    /// Output maps `H_d` of the reference cases; empty means the reference's own.
    #[serde(default, with = "rows::list")]
    pub feedforward_cases: Vec<DMatrix<f64>>,
    #[serde(default)]
    pub tracking: Vec<ScenarioBlock>,
    #[serde(default)]
    pub cost_check: Option<CostCheckBlock>,
    /// Certify learned gains against the model.
    #[serde(default)]
    pub validate_with_model: bool,
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn example_one() -> Self {
        Self::from_json(EXAMPLE_ONE).expect("bundled example 1 config is valid")
    }

    pub fn example_two() -> Self {
        Self::from_json(EXAMPLE_TWO).expect("bundled example 2 config is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<StochasticSystem> {
        let p = &self.plant;
        StochasticSystem::new(p.a.clone(), p.b.clone(), p.c.clone(), p.d.clone(), p.h.clone())
    }

    pub fn reference(&self) -> Result<ReferenceGenerator> {
        let r = &self.reference;
        ReferenceGenerator::new(r.a_d.clone(), r.h_d.clone(), vector(&r.x_d0))
    }

    pub fn hyper_params(&self) -> BpiHyperParams {
        let h = &self.hyper;
        BpiHyperParams {
            gamma: h.gamma,
            alpha0: h.alpha0,
            eta: h.eta,
            theta: h.theta.clone(),
            epsilon: h.epsilon,
            max_iter: h.max_iter,
            stop_rule: h.stop_rule,
        }
    }

    pub fn problem(&self) -> Result<TrackingProblem> {
        let cost = CostWeights::new(self.cost.q.clone(), self.cost.r.clone())?;
        TrackingProblem::new(self.system()?, self.reference()?, cost, self.hyper_params())
    }

    /// Hyperparameters used by the learner, whose phase-II stop may differ.
    pub fn learner_hyper(&self) -> BpiHyperParams {
        BpiHyperParams { stop_rule: self.learner.stop_rule, ..self.hyper_params() }
    }

    pub fn learn_options(&self) -> Result<LearnOptions> {
        Ok(LearnOptions {
            stop_rule: self.learner.stop_rule,
            rank_tol: self.learner.rank_tol,
            stall_limit: self.learner.stall_limit,
            validation: if self.validate_with_model { Some(self.system()?) } else { None },
        })
    }

    pub fn input(&self) -> Result<InputSignal> {
        input_from(&self.probing, self.plant.b.ncols())
    }

    /// Output maps of the feedforward cases.
    pub fn cases(&self) -> Vec<DMatrix<f64>> {
        if self.feedforward_cases.is_empty() {
            vec![self.reference.h_d.clone()]
        } else {
            self.feedforward_cases.clone()
        }
    }

    /// Segments, defaulting to one run from the origin.
    pub fn data_segments(&self) -> Vec<SegmentBlock> {
        if self.segments.is_empty() {
            vec![SegmentBlock { x0: vec![0.0; self.plant.a.nrows()], duration: None }]
        } else {
            self.segments.clone()
        }
    }

    /// Simulation settings of segment `j`.
    pub fn segment_sim(&self, j: usize) -> Result<SimConfig> {
        let seg = &self.data_segments()[j];
        let base = match seg.duration {
            Some(d) => self.sim.covering(d)?,
            None => self.sim.clone(),
        };
        Ok(SimConfig { base_seed: base.base_seed.wrapping_add(SEGMENT_SEED_STRIDE * j as u64), ..base })
    }

    /// Span covered by all segments laid end to end.
    pub fn data_horizon(&self) -> Result<f64> {
        (0..self.data_segments().len()).map(|j| self.segment_sim(j).map(|c| c.horizon())).sum()
    }

    pub fn shadow_config(&self) -> Result<Option<ShadowConfig>> {
        let Some(s) = &self.shadow else { return Ok(None) };
        Ok(Some(ShadowConfig {
            a_a: s.a_a.clone(),
            input: input_from(&s.input, self.plant.b.ncols())?,
            x_a0: vector(&s.x_a0),
            f_a: s.f_a.clone(),
            y_a0: vector(&s.y_a0),
            sim: self.sim.clone(),
            horizon: self.data_horizon()?,
            form: s.form,
        }))
    }

    /// Tracking segments of a scenario, with the feedforward gain of each case.
    pub fn scenario_segments(&self, scenario: &ScenarioBlock, f_gains: &[DMatrix<f64>]) -> Result<Vec<TrackingSegment>> {
        let cases = self.cases();
        scenario
            .steps
            .iter()
            .map(|s| {
                let i = self.case_index(s.case)?;
                let f = f_gains.get(i).ok_or_else(|| Error::Config(format!("no feedforward gain for case {}", s.case)))?;
                Ok(TrackingSegment { duration: s.duration, h_d: cases[i].clone(), f: f.clone() })
            })
            .collect()
    }

    /// Zero-based index of a 1-based case number.
    pub fn case_index(&self, case: usize) -> Result<usize> {
        let n = self.cases().len();
        if case == 0 || case > n {
            return Err(Error::Config(format!("case {case} out of range 1..={n}")));
        }
        Ok(case - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::SchemaVersion { expected: CONFIG_SCHEMA.into(), found: self.schema.clone() });
        }
        self.problem().map_err(config_err)?;
        let (n, m, q) = (self.plant.a.nrows(), self.plant.b.ncols(), self.plant.h.nrows());
        let nd = self.reference.a_d.nrows();
        self.sim.validate()?;
        if !(self.learner.rank_tol > 0.0) || self.learner.stall_limit == 0 {
            return Err(Error::Config("learner rank_tol must be positive and stall_limit at least 1".into()));
        }
        if !self.probing.is_empty() && self.probing.len() != m {
            return Err(Error::Config(format!("{} probing blocks for {m} input channels", self.probing.len())));
        }
        self.input().map_err(config_err)?;
        for (j, seg) in self.data_segments().iter().enumerate() {
            if seg.x0.len() != n {
                return Err(Error::Config(format!("segment {j}: x0 has {} entries, plant has {n} states", seg.x0.len())));
            }
            self.segment_sim(j)?;
        }
        for (i, h_d) in self.cases().iter().enumerate() {
            if h_d.shape() != (q, nd) {
                return Err(Error::Config(format!("feedforward case {}: H_d must be {q}x{nd}", i + 1)));
            }
        }
        match self.mode {
            Mode::Shadow => {
                let shadow = self
                    .shadow_config()?
                    .ok_or_else(|| Error::Config("shadow mode needs a shadow block".into()))?;
                if !self.probing.is_empty() {
                    return Err(Error::Config("shadow mode runs the plant with zero input; remove probing".into()));
                }
                if self.plant.d.amax() != 0.0 {
                    return Err(Error::Config("shadow mode requires D = 0".into()));
                }
                if self.segments.iter().any(|s| s.duration.is_none()) {
                    return Err(Error::Config("shadow segments need explicit durations".into()));
                }
                shadow.validate(&self.plant.b).map_err(config_err)?;
            }
            Mode::DataDriven if self.probing.is_empty() && self.plant.d.amax() == 0.0 => {
                return Err(Error::Config("data-driven mode with D = 0 needs probing; use shadow mode".into()));
            }
            _ => {}
        }
        for sc in &self.tracking {
            if sc.steps.is_empty() || sc.n_paths == 0 {
                return Err(Error::Config(format!("scenario {}: needs steps and paths", sc.name)));
            }
            if sc.x0.len() != n {
                return Err(Error::Config(format!("scenario {}: x0 must have {n} entries", sc.name)));
            }
            for s in &sc.steps {
                self.case_index(s.case)?;
                if !(s.duration > 0.0) {
                    return Err(Error::Config(format!("scenario {}: durations must be positive", sc.name)));
                }
            }
            if !(sc.sample_period >= self.sim.h) {
                return Err(Error::Config(format!("scenario {}: sample_period below the step", sc.name)));
            }
        }
        if let Some(cc) = &self.cost_check {
            self.case_index(cc.case)?;
            if !(cc.horizon > 0.0 && cc.h > 0.0) || cc.n_paths < 2 || cc.x0.len() != n {
                return Err(Error::Config("cost_check needs positive horizon and step, >= 2 paths, and an n-vector x0".into()));
            }
        }
        Ok(())
    }
}
