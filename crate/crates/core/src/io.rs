//! End-to-end pipeline behind the command-line tool: config parsing,
//! structural checks, continuation, and the emitted artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::SolverOptions;
use crate::continuation::{
    continue_path, path_report, ContinuationError, ContinuationSchedule, SolutionPath,
};
use crate::model::{
    assemble_nlp, evaluate_schedule, validate, CascadeSpec, Diagnostic, HydroNlp, ModelError,
    SpecIoError,
};
use crate::structure::{full_report, StructuralReport};

/// Joules per megawatt-hour.
pub const JOULES_PER_MWH: f64 = 3.6e9;

/// Sample points used by the structural report of a run.
pub const REPORT_SAMPLES: usize = 5;

pub const PATH_CSV: &str = "path.csv";
pub const PATH_SUMMARY_CSV: &str = "path_summary.csv";
pub const REPORT_JSON: &str = "structural_report.json";
pub const COMPARISON_TXT: &str = "comparison.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitFlags {
    pub path_csv: bool,
    pub report_json: bool,
    pub comparison_txt: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self {
            path_csv: true,
            report_json: true,
            comparison_txt: true,
        }
    }
}

/// Command-line overrides; `None` keeps the config file value or default.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub theta_step: Option<f64>,
    pub mu_min: Option<f64>,
    pub kkt_tolerance: Option<f64>,
    pub no_adaptive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec_path: PathBuf,
    pub output_dir: PathBuf,
    pub overrides: Overrides,
    pub emit: EmitFlags,
    /// Write the structural report and stop before solving.
    pub check_only: bool,
}

impl RunConfig {
    pub fn new(spec_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            spec_path: spec_path.into(),
            output_dir: output_dir.into(),
            overrides: Overrides::default(),
            emit: EmitFlags::default(),
            check_only: false,
        }
    }
}

/// Solver options and continuation schedule after applying the config file
/// and then the command-line overrides to the defaults.
pub fn resolve_settings(
    spec: &CascadeSpec,
    o: &Overrides,
) -> (SolverOptions, ContinuationSchedule) {
    let s = spec.solver;
    let mut options = SolverOptions::default();
    let mut schedule = ContinuationSchedule::default();
    options.mu_initial = s.mu_initial.unwrap_or(options.mu_initial);
    options.mu_factor = s.mu_factor.unwrap_or(options.mu_factor);
    options.mu_min = o.mu_min.or(s.mu_min).unwrap_or(options.mu_min);
    options.kkt_tolerance = o
        .kkt_tolerance
        .or(s.kkt_tolerance)
        .unwrap_or(options.kkt_tolerance);
    options.max_newton_iters = s.max_newton_iters.unwrap_or(options.max_newton_iters);
    options.warm_start_mu = options.warm_start_mu.min(options.mu_initial);
    schedule.theta_step = o.theta_step.or(s.theta_step).unwrap_or(schedule.theta_step);
    schedule.theta_step_min = schedule.theta_step_min.min(schedule.theta_step);
    schedule.adaptive = !o.no_adaptive && s.adaptive.unwrap_or(schedule.adaptive);
    (options, schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// θ = 0 optimal schedule scored under the full nonlinear physics, MWh.
    pub energy_linear_schedule: f64,
    /// θ = 1 optimal schedule, same scoring, MWh.
    pub energy_nonlinear_schedule: f64,
    pub absolute_gain: f64,
    /// Percent.
    pub relative_gain: f64,
    /// Not written to files.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl ComparisonReport {
    /// `key = value` lines; wall time is left out so the file is
    /// reproducible.
    pub fn to_text(&self) -> String {
        format!(
            "energy_linear_schedule_mwh = {}\nenergy_nonlinear_schedule_mwh = {}\nabsolute_gain_mwh = {}\nrelative_gain_percent = {}\n",
            self.energy_linear_schedule,
            self.energy_nonlinear_schedule,
            self.absolute_gain,
            self.relative_gain
        )
    }
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("solution path has no entry at theta = {0}")]
    MissingEntry(f64),
    #[error("schedule extracted at theta = {theta} is infeasible: {source}")]
    Infeasible {
        theta: f64,
        #[source]
        source: ModelError,
    },
}

fn energy_mwh(spec: &CascadeSpec, releases: &[Vec<f64>], theta: f64) -> Result<f64, CompareError> {
    evaluate_schedule(spec, releases)
        .map(|r| r.total_energy_j / JOULES_PER_MWH)
        .map_err(|source| CompareError::Infeasible { theta, source })
}

/// Score the `θ = 0` and `θ = 1` release schedules of a path under the full
/// nonlinear physics.
pub fn compare_schedules(
    spec: &CascadeSpec,
    nlp: &HydroNlp,
    path: &SolutionPath,
) -> Result<ComparisonReport, CompareError> {
    let linear = path.entry_at(0.0).ok_or(CompareError::MissingEntry(0.0))?;
    let nonlinear = path.entry_at(1.0).ok_or(CompareError::MissingEntry(1.0))?;
    let e_lin = energy_mwh(spec, &nlp.releases(&linear.solution.x), 0.0)?;
    let e_nl = energy_mwh(spec, &nlp.releases(&nonlinear.solution.x), 1.0)?;
    let gain = e_nl - e_lin;
    Ok(ComparisonReport {
        energy_linear_schedule: e_lin,
        energy_nonlinear_schedule: e_nl,
        absolute_gain: gain,
        relative_gain: if e_lin > 0.0 {
            100.0 * gain / e_lin
        } else {
            0.0
        },
        wall_time_ms: 0.0,
    })
}

/// One data row of `path.csv`. `time_step` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCsvRow {
    pub theta: f64,
    pub time_step: usize,
    pub variable: String,
    pub value: f64,
}

fn format_value(v: f64) -> String {
    // 17 significant digits: exact round trip for every finite f64
    format!("{v:.16e}")
}

/// Serialize rows with a fixed header and 17-significant-digit values.
pub fn write_path_rows(rows: &[PathCsvRow]) -> Result<String, csv::Error> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["theta", "time_step", "variable", "value"])?;
    for r in rows {
        w.write_record([
            format_value(r.theta),
            r.time_step.to_string(),
            r.variable.clone(),
            format_value(r.value),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_path_rows(text: &str) -> Result<Vec<PathCsvRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect()
}

/// Rows of a path: θ ascending, then timestep, then the per-step variable
/// order given by `names` (`names.len()` variables per step).
pub fn path_rows(path: &SolutionPath, step_count: usize, names: &[String]) -> Vec<PathCsvRow> {
    let per_step = names.len();
    let mut rows = Vec::with_capacity(path.entries.len() * step_count * per_step);
    for e in &path.entries {
        for k in 0..step_count {
            for (slot, name) in names.iter().enumerate() {
                rows.push(PathCsvRow {
                    theta: e.theta,
                    time_step: k + 1,
                    variable: name.clone(),
                    value: e.solution.x[k * per_step + slot],
                });
            }
        }
    }
    rows
}

pub fn emit_path_csv(
    path: &SolutionPath,
    step_count: usize,
    names: &[String],
) -> Result<String, csv::Error> {
    write_path_rows(&path_rows(path, step_count, names))
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Spec(#[from] SpecIoError),
    #[error("invalid cascade configuration:\n  {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid solver settings: {0}")]
    Settings(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot format output: {0}")]
    Format(String),
    #[error("structural checks failed: {}", .failed.join(", "))]
    Structural {
        failed: Vec<&'static str>,
        report: Box<StructuralReport>,
    },
    #[error(transparent)]
    Path(#[from] ContinuationError),
    #[error(transparent)]
    Compare(#[from] CompareError),
}

impl RunError {
    /// Process exit code: 1 for I/O and configuration problems, 2 when the
    /// path cannot be tracked to `θ = 1`, 3 when a structural check fails.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Path(_) | Self::Compare(_) => 2,
            Self::Structural { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: StructuralReport,
    pub path: Option<SolutionPath>,
    pub comparison: Option<ComparisonReport>,
    pub written: Vec<PathBuf>,
}

fn write_file(
    dir: &Path,
    name: &str,
    contents: &str,
    written: &mut Vec<PathBuf>,
) -> Result<(), RunError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| RunError::Write {
        path: path.clone(),
        source,
    })?;
    written.push(path);
    Ok(())
}

fn write_path_files(
    dir: &Path,
    nlp: &HydroNlp,
    path: &SolutionPath,
    emit: &EmitFlags,
    written: &mut Vec<PathBuf>,
) -> Result<(), RunError> {
    if !emit.path_csv {
        return Ok(());
    }
    let csv = emit_path_csv(path, nlp.grid().step_count, nlp.family_names())
        .map_err(|e| RunError::Format(e.to_string()))?;
    write_file(dir, PATH_CSV, &csv, written)?;
    if let Some(summary) = path_report(path) {
        write_file(dir, PATH_SUMMARY_CSV, &summary.to_csv(), written)?;
    }
    Ok(())
}

/// Parse, check, solve and write artifacts. Structural failures still write
/// the report; a failed path still writes the entries tracked so far.
pub fn run(config: &RunConfig) -> Result<RunSummary, RunError> {
    let start = Instant::now();
    let spec = CascadeSpec::from_path(&config.spec_path)?;
    let diagnostics = validate(&spec);
    if !diagnostics.is_empty() {
        return Err(RunError::Invalid(diagnostics));
    }
    let (options, schedule) = resolve_settings(&spec, &config.overrides);
    options
        .validate()
        .map_err(|e| RunError::Settings(e.to_string()))?;
    schedule.validate().map_err(RunError::Settings)?;

    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|source| RunError::Write {
        path: dir.clone(),
        source,
    })?;
    let mut written = Vec::new();

    let nlp = assemble_nlp(&spec)?;
    let report = full_report(&nlp, REPORT_SAMPLES).expect("positive sample count");
    if config.emit.report_json {
        let json =
            serde_json::to_string_pretty(&report).map_err(|e| RunError::Format(e.to_string()))?;
        write_file(dir, REPORT_JSON, &(json + "\n"), &mut written)?;
    }
    if !report.all_passed() {
        return Err(RunError::Structural {
            failed: report.failed_flags(),
            report: Box::new(report),
        });
    }
    if config.check_only {
        return Ok(RunSummary {
            report,
            path: None,
            comparison: None,
            written,
        });
    }

    let path = match continue_path(&nlp, &schedule, &options) {
        Ok(path) => path,
        Err(e) => {
            if let Some(partial) = e.partial_path() {
                write_path_files(dir, &nlp, partial, &config.emit, &mut written)?;
            }
            return Err(e.into());
        }
    };
    write_path_files(dir, &nlp, &path, &config.emit, &mut written)?;

    let mut comparison = compare_schedules(&spec, &nlp, &path)?;
    if config.emit.comparison_txt {
        write_file(dir, COMPARISON_TXT, &comparison.to_text(), &mut written)?;
    }
    comparison.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RunSummary {
        report,
        path: Some(path),
        comparison: Some(comparison),
        written,
    })
}

/// Human-readable summary of a structural report's failures.
pub fn describe_failures(report: &StructuralReport) -> String {
    let mut out = String::new();
    for d in report.details.iter().filter(|d| !d.passed) {
        let _ = write!(out, "  [{}] {}", d.check, d.message);
        if let Some(theta) = d.theta {
            let _ = write!(out, " (theta = {theta}");
            if let Some(s) = d.sample {
                let _ = write!(out, ", sample {s}");
            }
            out.push(')');
        }
        out.push('\n');
    }
    out
}
