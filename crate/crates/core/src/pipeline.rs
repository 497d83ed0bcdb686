//! End-to-end runs: simulate, build moments, learn, certify, track, report.
//!
//! Each stage is a public function so the command-line runner can invoke them
//! one at a time; [`run_experiment`] chains all stages selected by the mode
//! and never loses a partial report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;

use crate::bpi::{self, Phase, TrackingSolution};
use crate::config::{ExperimentConfig, Mode, MomentSource};
use crate::error::{Error, Result};
use crate::learner::{self, FeedbackLearning, FeedforwardSet, LearnedSolution, ShadowProblem};
use crate::linalg;
use crate::model::{self, TrackingProblem};
use crate::regressors::{MomentTable, RankReport};
use crate::report::{
    Certificate, CostCheckReport, DataSummary, FeedforwardCase, IterationRow, LearnedSection, ModelGap, ModelSection,
    RankEntry, RunReport, SegmentSummary, TrackingSummary,
};
use crate::sim::{self, EnsembleDataset, TrackingTrace};
use crate::solvers::{self, SareForm};

/// Command-line overrides applied on top of a config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub validate_with_model: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = cfg.clone();
        if let Some(seed) = self.seed {
            cfg.sim.base_seed = seed;
        }
        if let Some(paths) = self.paths {
            cfg.sim.n_paths = paths;
        }
        cfg.validate_with_model |= self.validate_with_model;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Model-based solution plus the feedforward of every reference case.
#[derive(Clone, Debug)]
pub struct ModelOutcome {
    pub problem: TrackingProblem,
    pub solution: TrackingSolution,
    pub feedforward: Vec<bpi::Feedforward>,
}

/// Moments of one data segment, with the ensemble they came from.
#[derive(Clone, Debug)]
pub struct SegmentData {
    pub table: MomentTable,
    pub dataset: EnsembleDataset,
}

pub fn solve_model(cfg: &ExperimentConfig) -> Result<ModelOutcome> {
    let problem = cfg.problem()?;
    let solution = bpi::solve_tracking(&problem)?;
    let reference = cfg.reference()?;
    let feedforward = cfg
        .cases()
        .into_iter()
        .map(|h_d| bpi::feedforward(&problem, &solution.p_star, &solution.k_star, &reference.with_output(h_d)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelOutcome { problem, solution, feedforward })
}

pub fn model_section(cfg: &ExperimentConfig, outcome: &ModelOutcome) -> Result<ModelSection> {
    let sol = &outcome.solution;
    let (form, residual) = if cfg.hyper.sare_as_printed {
        let r = solvers::sare_residual(&outcome.problem.system, &outcome.problem.cost, &sol.p_star, SareForm::AsPrinted)?;
        ("as_printed", r)
    } else {
        ("consistent", sol.sare_residual)
    };
    let phase_one: Vec<_> = sol.history.iter().filter(|s| s.phase == Phase::One).cloned().collect();
    Ok(ModelSection {
        iterations: sol.history.iter().map(IterationRow::from).collect(),
        p_star: sol.p_star.clone(),
        k_star: sol.k_star.clone(),
        lambda_star: sol.lambda_star.clone(),
        sare_residual: residual,
        sare_form: form.into(),
        abscissa: sol.abscissa,
        phase_one_exit: sol.phase_one_exit().map_or(0, |s| s.index),
        phase_one_bound: bpi::phase1_iteration_bound(&outcome.problem, &phase_one),
    })
}

fn table_of(cfg: &ExperimentConfig, ds: &EnsembleDataset) -> Result<MomentTable> {
    let c = &ds.config;
    MomentTable::from_grid(&ds.grid, &cfg.plant.h, c.first_sample(), c.n_samples, c.window_samples())
}

/// Simulates every data segment (ensemble or exact moments).
pub fn collect(cfg: &ExperimentConfig) -> Result<Vec<SegmentData>> {
    let system = cfg.system()?;
    let reference = cfg.reference()?;
    let input = cfg.input()?;
    let discount = cfg.hyper_params().discount();
    cfg.data_segments()
        .iter()
        .enumerate()
        .map(|(j, seg)| {
            let sim_cfg = cfg.segment_sim(j)?;
            let x0 = nalgebra::DVector::from_column_slice(&seg.x0);
            let spec = sim::DataSpec { system: &system, input: &input, x0: &x0, reference: &reference, discount };
            let dataset = match cfg.moments {
                MomentSource::MonteCarlo => sim::run_ensemble(&spec, &sim_cfg)?,
                MomentSource::Exact => EnsembleDataset {
                    config: sim_cfg.clone(),
                    plant_hash: system.fingerprint(),
                    discount,
                    x0: x0.clone(),
                    input: input.clone(),
                    created_at: sim::timestamp(),
                    grid: sim::propagate_moments_exact(&spec, &sim_cfg)?,
                },
            };
            Ok(SegmentData { table: table_of(cfg, &dataset)?, dataset })
        })
        .collect()
}

fn segment_dir(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("segment-{j}"))
}

pub fn save_segments(segments: &[SegmentData], dir: &Path) -> Result<Vec<String>> {
    segments
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let d = segment_dir(dir, j);
            sim::save_dataset(&s.dataset, &d)?;
            Ok(d.display().to_string())
        })
        .collect()
}

/// Loads `segment-0`, `segment-1`, ... from `dir`, checking them against the config.
pub fn load_segments(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SegmentData>> {
    let expected = cfg.data_segments().len();
    let hash = cfg.system()?.fingerprint();
    (0..expected)
        .map(|j| {
            let dataset = sim::load_dataset(&segment_dir(dir, j))?;
            if dataset.plant_hash != hash {
                return Err(Error::Config(format!("segment {j} was collected on a different plant")));
            }
            Ok(SegmentData { table: table_of(cfg, &dataset)?, dataset })
        })
        .collect()
}

pub fn data_summary(cfg: &ExperimentConfig, segments: &[SegmentData], dirs: Option<&[String]>) -> DataSummary {
    DataSummary {
        moments: cfg.moments,
        segments: segments
            .iter()
            .enumerate()
            .map(|(j, s)| SegmentSummary {
                x0: s.dataset.x0.iter().copied().collect(),
                rows: s.table.len(),
                base_seed: s.dataset.config.base_seed,
                n_paths: s.dataset.grid.n_paths,
                dataset: dirs.map(|d| d[j].clone()),
            })
            .collect(),
        plant_input_zero: segments.iter().all(|s| plant_input_is_zero(s)),
    }
}

fn plant_input_is_zero(s: &SegmentData) -> bool {
    s.dataset.input.is_zero()
        && s.dataset.grid.input.iter().all(|v| *v == 0.0)
        && s.table.rows.iter().all(|r| r.w.iter().chain(r.v.iter()).all(|v| *v == 0.0))
}

fn stacked(segments: &[SegmentData]) -> Result<MomentTable> {
    MomentTable::concat(&segments.iter().map(|s| s.table.clone()).collect::<Vec<_>>())
}

pub fn learn_fb(cfg: &ExperimentConfig, segments: &[SegmentData]) -> Result<FeedbackLearning> {
    let table = stacked(segments)?;
    let cost = cfg.problem()?.cost;
    learner::learn_feedback(&table, &cost, &cfg.learner_hyper(), &cfg.learn_options()?)
}

pub fn learn_ff(cfg: &ExperimentConfig, segments: &[SegmentData], feedback: &FeedbackLearning) -> Result<FeedforwardSet> {
    let table = stacked(segments)?;
    let cost = cfg.problem()?.cost;
    learner::learn_feedforward(&table, feedback, &cost, &cfg.learner_hyper(), &cfg.cases(), &cfg.learn_options()?)
}

/// Shadow-system learning; the plant data must carry no input at all.
pub fn learn_shadow(cfg: &ExperimentConfig, segments: &[SegmentData]) -> Result<LearnedSolution> {
    if let Some(j) = segments.iter().position(|s| !plant_input_is_zero(s)) {
        return Err(Error::ShadowPrecondition(format!("segment {j} was collected with a nonzero plant input")));
    }
    let shadow = cfg
        .shadow_config()?
        .ok_or_else(|| Error::Config("shadow learning needs a shadow block".into()))?;
    let problem = cfg.problem()?;
    let hyper = cfg.learner_hyper();
    let cases = cfg.cases();
    let sp = ShadowProblem { b: problem.system.b(), cost: &problem.cost, hyper: &hyper, h_ds: &cases };
    let tables: Vec<MomentTable> = segments.iter().map(|s| s.table.clone()).collect();
    learner::learn_shadow(&tables, &shadow, &sp, &cfg.learn_options()?)
}

fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn learned_section(
    cfg: &ExperimentConfig,
    feedback: &FeedbackLearning,
    extra_ranks: &[(&str, &RankReport)],
    model: Option<&ModelOutcome>,
) -> Result<LearnedSection> {
    let labels = match cfg.mode {
        Mode::Shadow => ["feedback (shadow-augmented)"],
        _ => ["feedback excitation"],
    };
    let mut ranks: Vec<RankEntry> =
        feedback.ranks.iter().zip(labels).map(|(r, l)| RankEntry { label: l.into(), report: r.clone() }).collect();
    ranks.extend(extra_ranks.iter().map(|(l, r)| RankEntry { label: (*l).into(), report: (*r).clone() }));
    let certificate = if cfg.validate_with_model {
        let sys = cfg.system()?;
        let hp = cfg.hyper_params();
        Certificate::Certified(model::is_stabilizing(&sys.parameterized(hp.gamma, hp.gamma), &feedback.k_star, 0.0)?)
    } else {
        Certificate::from_option(None)
    };
    Ok(LearnedSection {
        moments: cfg.moments,
        iterations: feedback.history.iter().map(IterationRow::from).collect(),
        p_star: feedback.p_star.clone(),
        k_star: feedback.k_star.clone(),
        lambda_star: feedback.lambda_star.clone(),
        phase_one_exit: feedback.phase_one_exit().map_or(0, |s| s.index),
        ranks,
        certificate,
        model_gap: model.map(|m| ModelGap {
            k_relative: relative(&feedback.k_star, &m.solution.k_star),
            p_relative: relative(&feedback.p_star, &m.solution.p_star),
        }),
    })
}

pub fn model_cases(outcome: &ModelOutcome, cases: &[DMatrix<f64>]) -> Vec<FeedforwardCase> {
    outcome
        .feedforward
        .iter()
        .zip(cases)
        .enumerate()
        .map(|(i, (ff, h_d))| FeedforwardCase {
            case: i + 1,
            h_d: h_d.clone(),
            pi: ff.pi.clone(),
            f: ff.f.clone(),
            residual: None,
            source: "model".into(),
        })
        .collect()
}

pub fn learned_cases(set: &FeedforwardSet) -> Vec<FeedforwardCase> {
    set.cases
        .iter()
        .enumerate()
        .map(|(i, c)| FeedforwardCase {
            case: i + 1,
            h_d: c.h_d.clone(),
            pi: c.pi.clone(),
            f: c.f.clone(),
            residual: Some(c.residual),
            source: "learned".into(),
        })
        .collect()
}

/// Closed-loop ensemble runs of every configured scenario.
pub fn track(cfg: &ExperimentConfig, k: &DMatrix<f64>, f_gains: &[DMatrix<f64>]) -> Result<Vec<(TrackingSummary, TrackingTrace)>> {
    let sys = cfg.system()?;
    let reference = cfg.reference()?;
    cfg.tracking
        .iter()
        .map(|sc| {
            let segments = cfg.scenario_segments(sc, f_gains)?;
            let x0 = nalgebra::DVector::from_column_slice(&sc.x0);
            let trace = sim::simulate_tracking(&sys, &reference, k, &segments, &x0, cfg.sim.h, sc.sample_period, sc.n_paths, sc.seed)?;
            let summary = TrackingSummary {
                name: sc.name.clone(),
                cases: sc.steps.iter().map(|s| s.case).collect(),
                n_paths: sc.n_paths,
                settled_errors: trace.settled_errors(1.0),
                file: format!("{}/tracking.csv", sc.name),
            };
            Ok((summary, trace))
        })
        .collect()
}

/// Paired average-cost comparison against the design that ignores the noise.
pub fn cost_check(cfg: &ExperimentConfig, k: &DMatrix<f64>, f_gains: &[DMatrix<f64>]) -> Result<Option<CostCheckReport>> {
    let Some(cc) = &cfg.cost_check else { return Ok(None) };
    let i = cfg.case_index(cc.case)?;
    let h_d = cfg.cases()[i].clone();
    let problem = cfg.problem()?;
    let naive_problem = TrackingProblem { system: problem.system.noise_free(), ..problem.clone() };
    let naive = bpi::solve_tracking(&naive_problem)?;
    let reference = problem.reference.with_output(h_d)?;
    let naive_ff = bpi::feedforward(&naive_problem, &naive.p_star, &naive.k_star, &reference)?;
    let f = f_gains.get(i).ok_or_else(|| Error::Config(format!("no feedforward gain for case {}", cc.case)))?;
    let x0 = nalgebra::DVector::from_column_slice(&cc.x0);
    let cmp = sim::compare_average_cost(
        &problem.system,
        &reference,
        (k, f),
        (&naive.k_star, &naive_ff.f),
        &problem.cost,
        &x0,
        cc.horizon,
        cc.h,
        cc.n_paths,
        cc.seed,
    )?;
    let separation = if cmp.diff_std_error > 0.0 { -cmp.diff_mean / cmp.diff_std_error } else { 0.0 };
    Ok(Some(CostCheckReport {
        case: cc.case,
        aware: cmp.first,
        naive: cmp.second,
        diff_mean: cmp.diff_mean,
        diff_std_error: cmp.diff_std_error,
        separation,
        aware_lower: cmp.diff_mean < 0.0,
        naive_k: naive.k_star,
        naive_f: naive_ff.f,
    }))
}

/// Report plus the tracking traces that go next to it.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub report: RunReport,
    pub traces: Vec<(String, TrackingTrace)>,
}

impl Artifacts {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { report: RunReport::new(cfg), traces: Vec::new() }
    }

    pub fn emit(&self, dir: &Path) -> Result<()> {
        crate::report::emit_report(&self.report, &self.traces, dir)
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.report.timing.insert(stage.into(), start.elapsed().as_secs_f64());
        out
    }

    /// Tracking scenarios and the cost check with the given gains.
    pub fn closed_loop(&mut self, cfg: &ExperimentConfig, k: &DMatrix<f64>, f_gains: &[DMatrix<f64>]) -> Result<()> {
        let runs = self.timed("track", |_| track(cfg, k, f_gains))?;
        for (summary, trace) in runs {
            self.traces.push((summary.name.clone(), trace));
            self.report.tracking.push(summary);
        }
        self.report.cost_check = self.timed("cost_check", |_| cost_check(cfg, k, f_gains))?;
        Ok(())
    }
}

/// Where a run keeps its datasets.
#[derive(Clone, Debug, Default)]
pub struct DataLocation {
    /// Load previously collected segments from here instead of simulating.
    pub load: Option<PathBuf>,
    /// Save freshly collected segments here.
    pub save: Option<PathBuf>,
}

fn gather(art: &mut Artifacts, cfg: &ExperimentConfig, data: &DataLocation) -> Result<Vec<SegmentData>> {
    let segments = match &data.load {
        Some(dir) => art.timed("load", |_| load_segments(cfg, dir))?,
        None => art.timed("collect", |_| collect(cfg))?,
    };
    let dirs = match (&data.load, &data.save) {
        (None, Some(dir)) => Some(save_segments(&segments, dir)?),
        _ => None,
    };
    art.report.data = Some(data_summary(cfg, &segments, dirs.as_deref()));
    Ok(segments)
}

fn run_stages(art: &mut Artifacts, cfg: &ExperimentConfig, data: &DataLocation) -> Result<()> {
    let model = if cfg.mode == Mode::ModelBased || cfg.validate_with_model {
        let outcome = art.timed("solve", |_| solve_model(cfg))?;
        art.report.model = Some(model_section(cfg, &outcome)?);
        Some(outcome)
    } else {
        None
    };
    let cases = cfg.cases();
    match cfg.mode {
        Mode::ModelBased => {
            let outcome = model.as_ref().expect("model-based mode solves the model");
            art.report.feedforward = model_cases(outcome, &cases);
            let f_gains: Vec<_> = outcome.feedforward.iter().map(|f| f.f.clone()).collect();
            art.closed_loop(cfg, &outcome.solution.k_star, &f_gains)?;
        }
        Mode::DataDriven => {
            let segments = gather(art, cfg, data)?;
            let fb = art.timed("learn_fb", |_| learn_fb(cfg, &segments))?;
            art.report.learned = Some(learned_section(cfg, &fb, &[], model.as_ref())?);
            let ff = art.timed("learn_ff", |_| learn_ff(cfg, &segments, &fb))?;
            if let Some(l) = art.report.learned.as_mut() {
                l.ranks.push(RankEntry { label: "feedforward excitation".into(), report: ff.rank.clone() });
            }
            art.report.feedforward = learned_cases(&ff);
            let f_gains: Vec<_> = ff.cases.iter().map(|c| c.f.clone()).collect();
            art.closed_loop(cfg, &fb.k_star, &f_gains)?;
        }
        Mode::Shadow => {
            let segments = gather(art, cfg, data)?;
            let sol = art.timed("learn_shadow", |_| learn_shadow(cfg, &segments))?;
            let ff_rank = ("feedforward (shadow-augmented)", &sol.feedforward.rank);
            art.report.learned = Some(learned_section(cfg, &sol.feedback, &[ff_rank], model.as_ref())?);
            art.report.feedforward = learned_cases(&sol.feedforward);
            let f_gains: Vec<_> = sol.feedforward.cases.iter().map(|c| c.f.clone()).collect();
            art.closed_loop(cfg, &sol.feedback.k_star, &f_gains)?;
        }
    }
    Ok(())
}

/// Runs every stage of the configured mode. On error the returned report is
/// marked failed and holds whatever was computed before the failure.
pub fn run_experiment(cfg: &ExperimentConfig, data: &DataLocation) -> (Artifacts, Option<Error>) {
    let mut art = Artifacts::new(cfg);
    let start = Instant::now();
    let err = run_stages(&mut art, cfg, data).err();
    art.report.timing.insert("total".into(), start.elapsed().as_secs_f64());
    if let Some(e) = &err {
        art.report.fail(e);
    }
    (art, err)
}

/// Largest `|E y - y_d|` over all settled windows of all scenarios.
pub fn worst_settled_error(report: &RunReport) -> f64 {
    report.tracking.iter().flat_map(|t| t.settled_errors.iter().copied()).fold(0.0, f64::max)
}

/// Relative 2-norm distance `|a - b| / |b|` of two gains.
pub fn gain_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    linalg::spectral_norm(&(a - b)) / linalg::spectral_norm(b)
}
