//! Homotopy loop: solve at `θ = 0`, then track the solution to `θ = 1`,
//! warm-starting every barrier solve from the previous stored solution.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::barrier::{
    interior_initializer, solve_from, BarrierError, BarrierSolution, SolverOptions,
};
use crate::linalg::{BandedLu, LinalgError};
use crate::nlp::{assemble_kkt, KktSystem, ParametricNlp};

/// θ values are rounded to this grid so repeated increments stay exact.
const THETA_GRID: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContinuationSchedule {
    pub theta_step: f64,
    /// Halve the step after a failed solve (and regrow it after successes).
    pub adaptive: bool,
    pub theta_step_min: f64,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self {
            theta_step: 0.05,
            adaptive: true,
            theta_step_min: 1e-4,
        }
    }
}

impl ContinuationSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.theta_step > 0.0 && self.theta_step <= 1.0) {
            return Err("theta_step must lie in (0, 1]".into());
        }
        if !(self.theta_step_min > 0.0 && self.theta_step_min <= self.theta_step) {
            return Err("theta_step_min must lie in (0, theta_step]".into());
        }
        Ok(())
    }
}

fn snap(theta: f64) -> f64 {
    let t = (theta * THETA_GRID).round() / THETA_GRID;
    if t >= 1.0 || 1.0 - t < 1.0 / THETA_GRID {
        1.0
    } else {
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEntry {
    pub theta: f64,
    pub solution: BarrierSolution,
    /// Smallest KKT pivot at the accepted solution.
    pub min_pivot: f64,
    pub objective: f64,
    /// Excluded from serialization so that repeated runs serialize
    /// identically.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// A θ at which a solve hit a singular KKT matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalEvent {
    pub theta: f64,
    pub mu: f64,
    pub min_pivot: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolutionPath {
    pub entries: Vec<PathEntry>,
    pub critical_events: Vec<CriticalEvent>,
}

impl SolutionPath {
    pub fn first(&self) -> Option<&PathEntry> {
        self.entries.first()
    }

    pub fn last(&self) -> Option<&PathEntry> {
        self.entries.last()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.first().is_some_and(|e| e.theta == 0.0)
            && self.entries.last().is_some_and(|e| e.theta == 1.0)
    }

    pub fn entry_at(&self, theta: f64) -> Option<&PathEntry> {
        self.entries.iter().find(|e| e.theta == theta)
    }

    /// `(θ, x_i)` along the path.
    pub fn trajectory(&self, index: usize) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .map(|e| (e.theta, e.solution.x[index]))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ContinuationError {
    #[error("invalid continuation schedule: {0}")]
    InvalidSchedule(String),
    #[error("path failure at theta = {theta}: {cause}")]
    PathFailure {
        theta: f64,
        cause: BarrierError,
        path: Box<SolutionPath>,
    },
    #[error("critical point suspected at theta = {theta} (smallest pivot {min_pivot:e})")]
    CriticalPointSuspected {
        theta: f64,
        min_pivot: f64,
        path: Box<SolutionPath>,
    },
}

impl ContinuationError {
    /// Entries stored before the failure.
    pub fn partial_path(&self) -> Option<&SolutionPath> {
        match self {
            Self::PathFailure { path, .. } | Self::CriticalPointSuspected { path, .. } => {
                Some(path)
            }
            Self::InvalidSchedule(_) => None,
        }
    }
}

fn solve_entry(
    nlp: &dyn ParametricNlp,
    theta: f64,
    init: (&[f64], &[f64]),
    mu_start: f64,
    options: &SolverOptions,
) -> Result<PathEntry, BarrierError> {
    let start = Instant::now();
    let solution = solve_from(nlp, theta, init, mu_start, options)?;
    let kkt = assemble_kkt(nlp, &solution.x, &solution.lambda, solution.mu_final, theta)
        .map_err(BarrierError::NotInterior)?;
    let min_pivot = match critical_point_monitor(&kkt, options.singularity_pivot_threshold) {
        MonitorVerdict::Ok { min_pivot } => min_pivot,
        MonitorVerdict::Suspect { min_pivot } => {
            return Err(BarrierError::SingularKkt {
                mu: solution.mu_final,
                min_pivot,
            })
        }
    };
    Ok(PathEntry {
        theta,
        min_pivot,
        objective: nlp.objective(&solution.x, theta),
        solution,
        wall_time: start.elapsed(),
    })
}

/// Track the solution of the parametric problem from `θ = 0` to `θ = 1`.
pub fn continue_path(
    nlp: &dyn ParametricNlp,
    schedule: &ContinuationSchedule,
    options: &SolverOptions,
) -> Result<SolutionPath, ContinuationError> {
    schedule
        .validate()
        .map_err(ContinuationError::InvalidSchedule)?;
    let mut path = SolutionPath::default();

    let (x0, l0) = interior_initializer(nlp);
    match solve_entry(nlp, 0.0, (&x0, &l0), options.mu_initial, options) {
        Ok(entry) => path.entries.push(entry),
        Err(cause) => return Err(fail(path, 0.0, cause)),
    }

    let mut theta = 0.0;
    let mut step = schedule.theta_step;
    while theta < 1.0 {
        let next = snap(theta + step);
        let prev = &path.entries.last().expect("θ = 0 entry").solution;
        match solve_entry(
            nlp,
            next,
            (&prev.x, &prev.lambda),
            options.warm_start_mu,
            options,
        ) {
            Ok(entry) => {
                path.entries.push(entry);
                theta = next;
                if schedule.adaptive {
                    step = (2.0 * step).min(schedule.theta_step);
                }
            }
            Err(cause) => {
                if let BarrierError::SingularKkt { mu, min_pivot } = cause {
                    path.critical_events.push(CriticalEvent {
                        theta: next,
                        mu,
                        min_pivot,
                    });
                }
                if !schedule.adaptive || 0.5 * step < schedule.theta_step_min {
                    return Err(fail(path, next, cause));
                }
                step *= 0.5;
            }
        }
    }
    Ok(path)
}

fn fail(path: SolutionPath, theta: f64, cause: BarrierError) -> ContinuationError {
    match cause {
        BarrierError::SingularKkt { min_pivot, .. } => ContinuationError::CriticalPointSuspected {
            theta,
            min_pivot,
            path: Box::new(path),
        },
        cause => ContinuationError::PathFailure {
            theta,
            cause,
            path: Box::new(path),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum MonitorVerdict {
    Ok { min_pivot: f64 },
    Suspect { min_pivot: f64 },
}

/// Factor the KKT matrix and flag it when its smallest pivot magnitude falls
/// below `threshold`.
pub fn critical_point_monitor(kkt: &KktSystem, threshold: f64) -> MonitorVerdict {
    match BandedLu::factor(&kkt.matrix) {
        Ok(lu) if lu.min_pivot() >= threshold => MonitorVerdict::Ok {
            min_pivot: lu.min_pivot(),
        },
        Ok(lu) => MonitorVerdict::Suspect {
            min_pivot: lu.min_pivot(),
        },
        Err(LinalgError::Singular { .. }) | Err(LinalgError::NonFinite) => {
            MonitorVerdict::Suspect { min_pivot: 0.0 }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathRow {
    pub theta: f64,
    pub objective: f64,
    pub min_pivot: f64,
    pub iterations: usize,
    pub kkt_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathReport {
    pub rows: Vec<PathRow>,
    pub objective_start: f64,
    pub objective_end: f64,
    /// `objective_end − objective_start`.
    pub objective_change: f64,
    pub complete: bool,
    pub critical_events: usize,
}

impl PathReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,objective,min_pivot,iterations,kkt_norm\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{},{:.16e}",
                r.theta, r.objective, r.min_pivot, r.iterations, r.kkt_norm
            );
        }
        out
    }
}

/// Per-θ summary of a non-empty path.
pub fn path_report(path: &SolutionPath) -> Option<PathReport> {
    let first = path.first()?;
    let last = path.last()?;
    Some(PathReport {
        rows: path
            .entries
            .iter()
            .map(|e| PathRow {
                theta: e.theta,
                objective: e.objective,
                min_pivot: e.min_pivot,
                iterations: e.solution.iterations,
                kkt_norm: e.solution.kkt_norm,
            })
            .collect(),
        objective_start: first.objective,
        objective_end: last.objective,
        objective_change: last.objective - first.objective,
        complete: path.is_complete(),
        critical_events: path.critical_events.len(),
    })
}
