use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use slqt_core::config::{ExperimentConfig, Mode};
use slqt_core::learner::FeedbackLearning;
use slqt_core::pipeline::{self, Artifacts, DataLocation, Overrides};
use slqt_core::report::{self, RankEntry, RunReport, Status};
use slqt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "slqt", version, about = "Stochastic LQ tracking: model-based and data-driven policy iteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON, schema slqt-config/1).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override `sim.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `sim.n_paths`.
    #[arg(long)]
    paths: Option<usize>,
    /// Certify learned gains and compare them with the model-based solution.
    #[arg(long)]
    validate_with_model: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Model-based bootstrap policy iteration and feedforward.
    Solve(Common),
    /// Simulate the data segments and save them under `<out>/data`.
    Collect(Common),
    /// Learn the feedback gain from collected data.
    LearnFb {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `collect` (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Learn the feedforward gains of all cases from data and a learned feedback.
    LearnFf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `feedback.json` written by `learn-fb` (default `<out>/feedback.json`).
        #[arg(long)]
        fb: Option<PathBuf>,
    },
    /// Shadow-system learning with zero plant input.
    Shadow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Closed-loop tracking scenarios and the cost check.
    Track {
        #[command(flatten)]
        common: Common,
        /// Report whose gains to use; the model-based gains otherwise.
        #[arg(long)]
        gains: Option<PathBuf>,
    },
    /// Full reproduction of the spring-mass-damper example.
    Example1(Common),
    /// Full reproduction of the shadow-system example.
    Example2(Common),
    /// Re-emit a report canonically and print its summary.
    Report {
        /// `report.json` to read.
        #[arg(long)]
        data: PathBuf,
        /// Directory to re-emit into; prints only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common, bundled: Option<fn() -> ExperimentConfig>) -> Result<ExperimentConfig> {
    let base = match (&common.config, bundled) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(f)) => f(),
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    Overrides { seed: common.seed, paths: common.paths, validate_with_model: common.validate_with_model }.apply(&base)
}

fn summary(r: &RunReport) -> String {
    let mut lines = vec![format!("{} [{:?}] status: {:?}", r.name, r.mode, r.status)];
    if let Some(e) = &r.error {
        lines.push(format!("error (exit {}): {}", e.exit_code, e.message));
    }
    if let Some(m) = &r.model {
        lines.push(format!(
            "model: K* = {:?}, phase I exit {}, {} iterations, SARE residual {:.3e}, abscissa {:.4}",
            m.k_star.as_slice(),
            m.phase_one_exit,
            m.iterations.len(),
            m.sare_residual,
            m.abscissa
        ));
    }
    if let Some(d) = &r.data {
        let rows: usize = d.segments.iter().map(|s| s.rows).sum();
        lines.push(format!("data: {} segment(s), {rows} rows, plant input zero: {}", d.segments.len(), d.plant_input_zero));
    }
    if let Some(l) = &r.learned {
        lines.push(format!(
            "learned: K = {:?}, phase I exit {}, {} iterations",
            l.k_star.as_slice(),
            l.phase_one_exit,
            l.iterations.len()
        ));
        for RankEntry { label, report } in &l.ranks {
            lines.push(format!("  rank {label}: {}/{} (margin {:.3e})", report.rank, report.required, report.margin));
        }
        if let Some(g) = l.model_gap {
            lines.push(format!("  relative gap to model: K {:.3e}, P {:.3e}", g.k_relative, g.p_relative));
        }
    }
    for c in &r.feedforward {
        lines.push(format!("F case {}: {:?}", c.case, c.f.as_slice()));
    }
    for t in &r.tracking {
        lines.push(format!("tracking {}: settled |E y - y_d| per step {:?}", t.name, t.settled_errors));
    }
    if let Some(c) = &r.cost_check {
        lines.push(format!(
            "cost case {}: aware {:.4} vs noise-free design {:.4}, separation {:.1} SE",
            c.case, c.aware.mean, c.naive.mean, c.separation
        ));
    }
    lines.join("\n")
}

/// Writes the artifacts and turns the outcome into an exit status.
fn finish(mut art: Artifacts, result: Result<()>, out: &Path) -> ExitCode {
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            art.report.fail(e);
            e.exit_code()
        }
    };
    if let Err(e) = art.emit(out) {
        eprintln!("error: could not write outputs to {}: {e}", out.display());
        return ExitCode::from(4);
    }
    println!("{}", summary(&art.report));
    println!("outputs written to {}", out.display());
    if let Err(e) = result {
        eprintln!("error: {e}");
    }
    ExitCode::from(code as u8)
}

fn timed<T>(art: &mut Artifacts, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    art.report.timing.insert(stage.into(), start.elapsed().as_secs_f64());
    out
}

fn data_dir(data: &Option<PathBuf>, out: &Path) -> PathBuf {
    data.clone().unwrap_or_else(|| out.join("data"))
}

fn staged(cfg: &ExperimentConfig, out: &Path, body: impl FnOnce(&mut Artifacts) -> Result<()>) -> ExitCode {
    let mut art = Artifacts::new(cfg);
    let result = body(&mut art);
    finish(art, result, out)
}

fn run_full(cfg: ExperimentConfig, data: DataLocation, out: &Path) -> ExitCode {
    let (art, err) = pipeline::run_experiment(&cfg, &data);
    finish(art, err.map_or(Ok(()), Err), out)
}

fn run(cli: Cli) -> Result<ExitCode> {
    Ok(match cli.command {
        Command::Solve(common) => {
            let mut cfg = load_config(&common, None)?;
            cfg.mode = Mode::ModelBased;
            staged(&cfg, &common.out, |art| {
                let outcome = timed(art, "solve", || pipeline::solve_model(&cfg))?;
                art.report.model = Some(pipeline::model_section(&cfg, &outcome)?);
                art.report.feedforward = pipeline::model_cases(&outcome, &cfg.cases());
                Ok(())
            })
        }
        Command::Collect(common) => {
            let cfg = load_config(&common, None)?;
            staged(&cfg, &common.out, |art| {
                let segments = timed(art, "collect", || pipeline::collect(&cfg))?;
                let dirs = pipeline::save_segments(&segments, &common.out.join("data"))?;
                art.report.data = Some(pipeline::data_summary(&cfg, &segments, Some(&dirs)));
                Ok(())
            })
        }
        Command::LearnFb { common, data } => {
            let cfg = load_config(&common, None)?;
            let dir = data_dir(&data, &common.out);
            staged(&cfg, &common.out, |art| {
                let segments = timed(art, "load", || pipeline::load_segments(&cfg, &dir))?;
                art.report.data = Some(pipeline::data_summary(&cfg, &segments, None));
                let model = if cfg.validate_with_model { Some(pipeline::solve_model(&cfg)?) } else { None };
                if let Some(m) = &model {
                    art.report.model = Some(pipeline::model_section(&cfg, m)?);
                }
                let fb = timed(art, "learn_fb", || pipeline::learn_fb(&cfg, &segments))?;
                art.report.learned = Some(pipeline::learned_section(&cfg, &fb, &[], model.as_ref())?);
                fs::create_dir_all(&common.out)?;
                fs::write(common.out.join("feedback.json"), report::to_canonical_json(&fb))?;
                Ok(())
            })
        }
        Command::LearnFf { common, data, fb } => {
            let cfg = load_config(&common, None)?;
            let dir = data_dir(&data, &common.out);
            let fb_path = fb.unwrap_or_else(|| common.out.join("feedback.json"));
            staged(&cfg, &common.out, |art| {
                let feedback: FeedbackLearning = serde_json::from_str(&fs::read_to_string(&fb_path)?)?;
                let segments = timed(art, "load", || pipeline::load_segments(&cfg, &dir))?;
                art.report.data = Some(pipeline::data_summary(&cfg, &segments, None));
                let ff = timed(art, "learn_ff", || pipeline::learn_ff(&cfg, &segments, &feedback))?;
                art.report.feedforward = pipeline::learned_cases(&ff);
                let mut section = pipeline::learned_section(&cfg, &feedback, &[], None)?;
                section.ranks.push(RankEntry { label: "feedforward excitation".into(), report: ff.rank });
                art.report.learned = Some(section);
                Ok(())
            })
        }
        Command::Shadow { common, data } => {
            let mut cfg = load_config(&common, None)?;
            if cfg.mode != Mode::Shadow {
                return Err(Error::Config("the shadow command needs a config with mode \"shadow\"".into()));
            }
            cfg.tracking.clear();
            cfg.cost_check = None;
            let location = match data {
                Some(d) => DataLocation { load: Some(d), save: None },
                None => DataLocation { load: None, save: Some(common.out.join("data")) },
            };
            run_full(cfg, location, &common.out)
        }
        Command::Track { common, gains } => {
            let cfg = load_config(&common, None)?;
            staged(&cfg, &common.out, |art| {
                let (k, f_gains) = match &gains {
                    Some(path) => {
                        let prior = RunReport::load(path)?;
                        let k = prior.k_gain().cloned().ok_or_else(|| Error::Config("gains report has no feedback gain".into()))?;
                        art.report.feedforward = prior.feedforward.clone();
                        (k, prior.f_gains())
                    }
                    None => {
                        let outcome = timed(art, "solve", || pipeline::solve_model(&cfg))?;
                        art.report.model = Some(pipeline::model_section(&cfg, &outcome)?);
                        art.report.feedforward = pipeline::model_cases(&outcome, &cfg.cases());
                        (outcome.solution.k_star.clone(), outcome.feedforward.iter().map(|f| f.f.clone()).collect())
                    }
                };
                art.closed_loop(&cfg, &k, &f_gains)
            })
        }
        Command::Example1(common) => {
            let cfg = load_config(&common, Some(ExperimentConfig::example_one))?;
            let save = Some(common.out.join("data"));
            run_full(cfg, DataLocation { load: None, save }, &common.out)
        }
        Command::Example2(common) => {
            let cfg = load_config(&common, Some(ExperimentConfig::example_two))?;
            let save = Some(common.out.join("data"));
            run_full(cfg, DataLocation { load: None, save }, &common.out)
        }
        Command::Report { data, out } => {
            let report = RunReport::load(&data)?;
            if let Some(dir) = out {
                report::emit_report(&report, &[], &dir)?;
            }
            println!("{}", summary(&report));
            ExitCode::from(if report.status == Status::Ok { 0 } else { 1 })
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
