//! Run reports (`slqt-report/1`) and their CSV companions.
//!
//! `report.json` is written with sorted keys and every float as `{:.16e}`
//! (17 significant digits), so parsing and re-emitting it is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::bpi::{IterateState, Phase};
use crate::config::{rows, ExperimentConfig, Mode, MomentSource};
use crate::error::{Error, Result};
use crate::learner::LearnedIterate;
use crate::model::StabilityCertificate;
use crate::regressors::RankReport;
use crate::sim::{CostEstimate, TrackingTrace};

pub const REPORT_SCHEMA: &str = "slqt-report/1";
pub const UNCERTIFIED: &str = "uncertified (model-free)";
/// Marker file written next to the report of a failed run.
pub const FAILED_MARKER: &str = "failed";

/// Abscissa certificate, or the explicit model-free tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Certificate {
    Certified(StabilityCertificate),
    Uncertified(String),
}

impl Certificate {
    pub fn from_option(c: Option<StabilityCertificate>) -> Self {
        c.map_or_else(|| Certificate::Uncertified(UNCERTIFIED.into()), Certificate::Certified)
    }

    pub fn abscissa(&self) -> Option<f64> {
        match self {
            Certificate::Certified(c) => Some(c.abscissa),
            Certificate::Uncertified(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub index: usize,
    pub phase: Phase,
    pub alpha: f64,
    #[serde(with = "rows")]
    pub p: DMatrix<f64>,
    #[serde(with = "rows")]
    pub k: DMatrix<f64>,
    /// Relative least-squares residual; absent for model-based iterates.
    pub residual: Option<f64>,
    pub certificate: Certificate,
}

impl From<&IterateState> for IterationRow {
    fn from(s: &IterateState) -> Self {
        Self {
            index: s.index,
            phase: s.phase,
            alpha: s.alpha,
            p: s.p.clone(),
            k: s.k.clone(),
            residual: None,
            certificate: Certificate::Certified(StabilityCertificate {
                abscissa: s.abscissa,
                margin: 0.0,
                stabilizing: s.abscissa < 0.0,
            }),
        }
    }
}

impl From<&LearnedIterate> for IterationRow {
    fn from(s: &LearnedIterate) -> Self {
        Self {
            index: s.index,
            phase: s.phase,
            alpha: s.alpha,
            p: s.p.clone(),
            k: s.k.clone(),
            residual: Some(s.residual),
            certificate: Certificate::from_option(s.certificate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub iterations: Vec<IterationRow>,
    #[serde(with = "rows")]
    pub p_star: DMatrix<f64>,
    #[serde(with = "rows")]
    pub k_star: DMatrix<f64>,
    #[serde(with = "rows")]
    pub lambda_star: DMatrix<f64>,
    pub sare_residual: f64,
    /// `consistent` or `as_printed`.
    pub sare_form: String,
    pub abscissa: f64,
    pub phase_one_exit: usize,
    /// Upper bound on the phase-I iteration count implied by the trace.
    pub phase_one_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub label: String,
    pub report: RankReport,
}

/// Distance of the learned solution from the model-based one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGap {
    /// `|K_hat - K*| / |K*|`.
    pub k_relative: f64,
    pub p_relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedSection {
    pub moments: MomentSource,
    pub iterations: Vec<IterationRow>,
    #[serde(with = "rows")]
    pub p_star: DMatrix<f64>,
    #[serde(with = "rows")]
    pub k_star: DMatrix<f64>,
    #[serde(with = "rows")]
    pub lambda_star: DMatrix<f64>,
    pub phase_one_exit: usize,
    pub ranks: Vec<RankEntry>,
    pub certificate: Certificate,
    pub model_gap: Option<ModelGap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardCase {
    pub case: usize,
    #[serde(with = "rows")]
    pub h_d: DMatrix<f64>,
    #[serde(with = "rows")]
    pub pi: DMatrix<f64>,
    #[serde(with = "rows")]
    pub f: DMatrix<f64>,
    pub residual: Option<f64>,
    /// `model` or `learned`.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub name: String,
    pub cases: Vec<usize>,
    pub n_paths: usize,
    /// Largest `|E y - y_d|` over the last second of each step.
    pub settled_errors: Vec<f64>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCheckReport {
    pub case: usize,
    pub aware: CostEstimate,
    pub naive: CostEstimate,
    /// Mean of `cost(aware) - cost(naive)` over paired paths.
    pub diff_mean: f64,
    pub diff_std_error: f64,
    /// `-diff_mean / diff_std_error`.
    pub separation: f64,
    pub aware_lower: bool,
    #[serde(with = "rows")]
    pub naive_k: DMatrix<f64>,
    #[serde(with = "rows")]
    pub naive_f: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub x0: Vec<f64>,
    pub rows: usize,
    pub base_seed: u64,
    pub n_paths: usize,
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub moments: MomentSource,
    pub segments: Vec<SegmentSummary>,
    /// True when every plant input sample used for learning was zero.
    pub plant_input_zero: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub name: String,
    pub mode: Mode,
    pub status: Status,
    pub error: Option<ErrorInfo>,
    pub config: ExperimentConfig,
    pub data: Option<DataSummary>,
    pub model: Option<ModelSection>,
    pub learned: Option<LearnedSection>,
    pub feedforward: Vec<FeedforwardCase>,
    pub tracking: Vec<TrackingSummary>,
    pub cost_check: Option<CostCheckReport>,
    /// Wall-clock seconds per stage; not reproducible.
    pub timing: BTreeMap<String, f64>,
    pub created_at: String,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            name: config.name.clone(),
            mode: config.mode,
            status: Status::Ok,
            error: None,
            config: config.clone(),
            data: None,
            model: None,
            learned: None,
            feedforward: Vec::new(),
            tracking: Vec::new(),
            cost_check: None,
            timing: BTreeMap::new(),
            created_at: crate::sim::timestamp(),
        }
    }

    pub fn fail(&mut self, err: &Error) {
        self.status = Status::Failed;
        self.error = Some(ErrorInfo { message: err.to_string(), exit_code: err.exit_code() });
    }

    /// Canonical JSON without the timing fields, for determinism checks.
    pub fn payload(&self) -> String {
        let mut copy = self.clone();
        copy.timing.clear();
        copy.created_at.clear();
        to_canonical_json(&copy)
    }

    pub fn to_json(&self) -> String {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::SchemaVersion { expected: REPORT_SCHEMA.into(), found: report.schema });
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Feedforward gains in case order.
    pub fn f_gains(&self) -> Vec<DMatrix<f64>> {
        self.feedforward.iter().map(|c| c.f.clone()).collect()
    }

    /// Feedback gain of the learned section, else of the model section.
    pub fn k_gain(&self) -> Option<&DMatrix<f64>> {
        self.learned.as_ref().map(|l| &l.k_star).or(self.model.as_ref().map(|m| &m.k_star))
    }
}

/// Pretty JSON with `{:.16e}` floats.
struct Canonical<'a>(PrettyFormatter<'a>);

impl Formatter for Canonical<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Sorted-key JSON with 17-significant-digit floats. Non-finite floats become `null`.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let tree = serde_json::to_value(value).expect("report values serialize");
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Canonical(PrettyFormatter::new()));
    tree.serialize(&mut ser).expect("writing to memory");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let line: Vec<String> = cells.into_iter().collect();
    out.push_str(&line.join(","));
    out.push('\n');
}

/// One row per iterate: index, phase, alpha, residual, K row-major, vech P.
pub fn iterations_csv(rows_in: &[IterationRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows_in.first() else {
        out.push_str("index,phase,alpha,residual,abscissa\n");
        return out;
    };
    let (m, n) = first.k.shape();
    let mut header = vec!["index".to_string(), "phase".into(), "alpha".into(), "residual".into(), "abscissa".into()];
    header.extend((0..m).flat_map(|i| (0..n).map(move |j| format!("k_{}_{}", i + 1, j + 1))));
    header.extend((0..n).flat_map(|i| (i..n).map(move |j| format!("p_{}_{}", i + 1, j + 1))));
    csv_row(&mut out, header);
    for r in rows_in {
        let mut cells = vec![
            r.index.to_string(),
            match r.phase {
                Phase::One => "1".into(),
                Phase::Two => "2".into(),
            },
            num(r.alpha),
            r.residual.map_or_else(String::new, num),
            r.certificate.abscissa().map_or_else(String::new, num),
        ];
        cells.extend(r.k.row_iter().flat_map(|row| row.iter().map(|v| num(*v)).collect::<Vec<_>>()));
        cells.extend((0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|ij| num(r.p[ij])));
        csv_row(&mut out, cells);
    }
    out
}

/// Table II layout: one row per case, the row-major entries of `F`.
pub fn table2_csv(cases: &[FeedforwardCase]) -> String {
    let mut out = String::new();
    let width = cases.first().map_or(0, |c| c.f.len());
    let mut header = vec!["case".to_string()];
    header.extend((1..=width).map(|j| format!("f_{j}")));
    csv_row(&mut out, header);
    for c in cases {
        let mut cells = vec![c.case.to_string()];
        cells.extend(c.f.transpose().iter().map(|v| num(*v)));
        csv_row(&mut out, cells);
    }
    out
}

/// Columns `t`, then `y`, `y_d` per output channel, then `u` per input channel.
pub fn tracking_csv(trace: &TrackingTrace) -> String {
    let (q, m) = (trace.y_mean.nrows(), trace.u_mean.nrows());
    let label = |base: &str, i: usize, count: usize| if count == 1 { base.to_string() } else { format!("{base}_{}", i + 1) };
    let mut header = vec!["t".to_string()];
    for i in 0..q {
        header.push(label("y", i, q));
        header.push(label("y_d", i, q));
    }
    header.extend((0..m).map(|i| label("u", i, m)));
    let mut out = String::new();
    csv_row(&mut out, header);
    for (k, t) in trace.times.iter().enumerate() {
        let mut line = num(*t);
        for i in 0..q {
            let _ = write!(line, ",{},{}", num(trace.y_mean[(i, k)]), num(trace.y_d[(i, k)]));
        }
        for i in 0..m {
            let _ = write!(line, ",{}", num(trace.u_mean[(i, k)]));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Writes `report.json`, the iteration traces, `table2.csv` and, on failure,
/// the `failed` marker. Tracking traces go to `<scenario>/tracking.csv`.
pub fn emit_report(report: &RunReport, traces: &[(String, TrackingTrace)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json())?;
    if let Some(m) = &report.model {
        fs::write(dir.join("model_trace.csv"), iterations_csv(&m.iterations))?;
    }
    if let Some(l) = &report.learned {
        fs::write(dir.join("learned_trace.csv"), iterations_csv(&l.iterations))?;
    }
    if !report.feedforward.is_empty() {
        fs::write(dir.join("table2.csv"), table2_csv(&report.feedforward))?;
    }
    for (name, trace) in traces {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        fs::write(sub.join("tracking.csv"), tracking_csv(trace))?;
    }
    let marker = dir.join(FAILED_MARKER);
    match report.status {
        Status::Failed => fs::write(marker, report.error.as_ref().map_or("", |e| e.message.as_str()))?,
        Status::Ok if marker.exists() => fs::remove_file(marker)?,
        Status::Ok => {}
    }
    Ok(())
}
