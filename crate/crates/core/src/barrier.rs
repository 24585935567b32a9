//! Damped Newton iteration on the barrier KKT system over a decreasing μ
//! schedule.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{BandedLu, LinalgError};
use crate::nlp::{
    assemble_kkt_with_slacks, first_bound_violation, inf_norm, kkt_residual_with_slacks,
    BoundSlacks, NlpError, ParametricNlp,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub mu_initial: f64,
    pub mu_factor: f64,
    pub mu_min: f64,
    pub kkt_tolerance: f64,
    /// Newton iterations allowed per barrier parameter.
    pub max_newton_iters: usize,
    pub fraction_to_boundary: f64,
    pub min_step: f64,
    pub singularity_pivot_threshold: f64,
    /// Barrier parameter at which warm-started solves (continuation steps
    /// after the first) enter the μ schedule.
    pub warm_start_mu: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            mu_initial: 1.0,
            mu_factor: 0.2,
            mu_min: 1e-9,
            kkt_tolerance: 1e-8,
            max_newton_iters: 50,
            fraction_to_boundary: 0.995,
            min_step: 1e-12,
            singularity_pivot_threshold: 1e-12,
            warm_start_mu: 1e-4,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), BarrierError> {
        let positive = [
            ("mu_initial", self.mu_initial),
            ("mu_min", self.mu_min),
            ("kkt_tolerance", self.kkt_tolerance),
            ("min_step", self.min_step),
            (
                "singularity_pivot_threshold",
                self.singularity_pivot_threshold,
            ),
            ("warm_start_mu", self.warm_start_mu),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BarrierError::InvalidOptions(format!(
                    "{name} must be positive"
                )));
            }
        }
        if !(self.mu_factor > 0.0 && self.mu_factor < 1.0) {
            return Err(BarrierError::InvalidOptions(
                "mu_factor must lie in (0, 1)".into(),
            ));
        }
        if !(self.fraction_to_boundary > 0.0 && self.fraction_to_boundary < 1.0) {
            return Err(BarrierError::InvalidOptions(
                "fraction_to_boundary must lie in (0, 1)".into(),
            ));
        }
        if self.max_newton_iters == 0 {
            return Err(BarrierError::InvalidOptions(
                "max_newton_iters must be positive".into(),
            ));
        }
        if self.mu_min >= self.mu_initial {
            return Err(BarrierError::InvalidOptions(
                "mu_min must be below mu_initial".into(),
            ));
        }
        if self.warm_start_mu > self.mu_initial {
            return Err(BarrierError::InvalidOptions(
                "warm_start_mu must not exceed mu_initial".into(),
            ));
        }
        Ok(())
    }

    /// `mu_initial, mu_initial·factor, …` clamped to end exactly at `mu_min`.
    pub fn mu_schedule(&self) -> Vec<f64> {
        let mut out = vec![self.mu_initial];
        let mut mu = self.mu_initial;
        while mu > self.mu_min {
            mu = (mu * self.mu_factor).max(self.mu_min);
            out.push(mu);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierSolution {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu_final: f64,
    pub kkt_norm: f64,
    /// Newton steps taken (summed over the μ schedule for [`solve`]).
    pub iterations: usize,
    /// Smallest KKT pivot magnitude over every factorization performed.
    pub min_pivot_seen: f64,
    /// Newton steps per barrier parameter, in schedule order.
    pub iterations_per_mu: Vec<usize>,
    /// `‖F_μ‖∞` at each accepted iterate of the last barrier parameter,
    /// starting with the initial point.
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("variable {name} has empty bounds [{lower}, {upper}]")]
    InfeasibleBounds {
        name: String,
        lower: f64,
        upper: f64,
    },
    #[error("initial point is not strictly interior: {0}")]
    NotInterior(NlpError),
    #[error("no convergence within {iterations} Newton iterations at mu = {mu:e} (residual {kkt_norm:e})")]
    MaxIterations {
        mu: f64,
        iterations: usize,
        kkt_norm: f64,
    },
    #[error("line search fell below the minimum step at mu = {mu:e} (residual {kkt_norm:e})")]
    StepTooSmall { mu: f64, kkt_norm: f64 },
    #[error("singular KKT matrix at mu = {mu:e} (smallest pivot {min_pivot:e})")]
    SingularKkt { mu: f64, min_pivot: f64 },
    #[error("non-finite Newton direction at mu = {mu:e}")]
    NonFinite { mu: f64 },
}

impl BarrierError {
    pub fn mu(&self) -> Option<f64> {
        match *self {
            Self::MaxIterations { mu, .. }
            | Self::StepTooSmall { mu, .. }
            | Self::SingularKkt { mu, .. }
            | Self::NonFinite { mu } => Some(mu),
            _ => None,
        }
    }
}

fn check_bounds(nlp: &dyn ParametricNlp) -> Result<(), BarrierError> {
    for v in nlp.variables() {
        if let (Some(l), Some(u)) = (v.lower, v.upper) {
            if !(l < u) {
                return Err(BarrierError::InfeasibleBounds {
                    name: v.name.clone(),
                    lower: l,
                    upper: u,
                });
            }
        }
    }
    Ok(())
}

/// Largest `α ≤ 1` keeping every barrier variable at least a fraction
/// `1 − τ` of its current distance away from its bounds.
fn boundary_step(slacks: &BoundSlacks, dx: &[f64], tau: f64) -> f64 {
    let mut alpha = 1.0_f64;
    for ((&sl, &su), &di) in slacks.lower().iter().zip(slacks.upper()).zip(dx) {
        if di < 0.0 && sl.is_finite() {
            alpha = alpha.min(tau * sl / -di);
        } else if di > 0.0 && su.is_finite() {
            alpha = alpha.min(tau * su / di);
        }
    }
    alpha
}

/// Newton-solve `F_μ(x, λ, θ) = 0` for one barrier parameter.
pub fn solve_barrier(
    nlp: &dyn ParametricNlp,
    theta: f64,
    mu: f64,
    init: (&[f64], &[f64]),
    options: &SolverOptions,
) -> Result<BarrierSolution, BarrierError> {
    if !(mu > 0.0) {
        return Err(BarrierError::NotInterior(NlpError::NonPositiveMu(mu)));
    }
    let (mut x, mut lambda) = (init.0.to_vec(), init.1.to_vec());
    let n = x.len();
    if let Some(e) = first_bound_violation(nlp, &x) {
        return Err(BarrierError::NotInterior(e));
    }
    // Slacks are updated with each step rather than recomputed from x; see
    // `BoundSlacks`.
    let mut slacks = BoundSlacks::from_point(nlp, &x);
    let residual = kkt_residual_with_slacks(nlp, &x, &slacks, &lambda, mu, theta)
        .map_err(BarrierError::NotInterior)?;
    let mut norm = inf_norm(&residual);
    let mut history = vec![norm];
    let mut min_pivot = f64::INFINITY;
    let mut iterations = 0;

    loop {
        if norm <= options.kkt_tolerance {
            return Ok(BarrierSolution {
                x,
                lambda,
                mu_final: mu,
                kkt_norm: norm,
                iterations,
                min_pivot_seen: min_pivot,
                iterations_per_mu: vec![iterations],
                residual_history: history,
            });
        }
        if iterations == options.max_newton_iters {
            return Err(BarrierError::MaxIterations {
                mu,
                iterations,
                kkt_norm: norm,
            });
        }
        if !norm.is_finite() {
            return Err(BarrierError::NonFinite { mu });
        }
        iterations += 1;

        let kkt = assemble_kkt_with_slacks(nlp, &x, &slacks, &lambda, mu, theta)
            .map_err(BarrierError::NotInterior)?;
        let lu = match BandedLu::factor(&kkt.matrix) {
            Ok(lu) => lu,
            Err(LinalgError::Singular { .. }) => {
                return Err(BarrierError::SingularKkt { mu, min_pivot: 0.0 })
            }
            Err(LinalgError::NonFinite) => return Err(BarrierError::NonFinite { mu }),
        };
        min_pivot = min_pivot.min(lu.min_pivot());
        if lu.min_pivot() < options.singularity_pivot_threshold {
            return Err(BarrierError::SingularKkt {
                mu,
                min_pivot: lu.min_pivot(),
            });
        }
        let d = lu.solve(&kkt.rhs);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(BarrierError::NonFinite { mu });
        }
        let (dx, dl) = d.split_at(n);

        let mut alpha = boundary_step(&slacks, dx, options.fraction_to_boundary);
        let mut trial_x = vec![0.0; n];
        let mut trial_l = vec![0.0; lambda.len()];
        loop {
            if alpha < options.min_step {
                return Err(BarrierError::StepTooSmall { mu, kkt_norm: norm });
            }
            for i in 0..n {
                trial_x[i] = x[i] + alpha * dx[i];
            }
            for i in 0..lambda.len() {
                trial_l[i] = lambda[i] + alpha * dl[i];
            }
            let trial_s = slacks.stepped(dx, alpha);
            if first_bound_violation(nlp, &trial_x).is_none() {
                if let Ok(r) =
                    kkt_residual_with_slacks(nlp, &trial_x, &trial_s, &trial_l, mu, theta)
                {
                    let trial_norm = inf_norm(&r);
                    if trial_norm.is_finite() && trial_norm < norm {
                        norm = trial_norm;
                        slacks = trial_s;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        std::mem::swap(&mut x, &mut trial_x);
        std::mem::swap(&mut lambda, &mut trial_l);
        history.push(norm);
    }
}

/// Run [`solve_barrier`] over the whole μ schedule, warm-starting each
/// barrier problem from the previous one.
pub fn solve(
    nlp: &dyn ParametricNlp,
    theta: f64,
    init: (&[f64], &[f64]),
    options: &SolverOptions,
) -> Result<BarrierSolution, BarrierError> {
    solve_from(nlp, theta, init, options.mu_initial, options)
}

/// [`solve`] with the μ schedule entered at `mu_start` (clamped to
/// `[mu_min, mu_initial]`).
pub fn solve_from(
    nlp: &dyn ParametricNlp,
    theta: f64,
    init: (&[f64], &[f64]),
    mu_start: f64,
    options: &SolverOptions,
) -> Result<BarrierSolution, BarrierError> {
    options.validate()?;
    check_bounds(nlp)?;
    if let Some(e) = first_bound_violation(nlp, init.0) {
        return Err(BarrierError::NotInterior(e));
    }
    let mut x = init.0.to_vec();
    let mut lambda = init.1.to_vec();
    let mut iterations = 0;
    let mut min_pivot = f64::INFINITY;
    let mut last = None;
    let mut per_mu = Vec::new();
    let start = mu_start.clamp(options.mu_min, options.mu_initial);
    let mut schedule: Vec<f64> = options
        .mu_schedule()
        .into_iter()
        .filter(|&mu| mu < start)
        .collect();
    schedule.insert(0, start);
    for mu in schedule {
        let sol = solve_barrier(nlp, theta, mu, (&x, &lambda), options)?;
        iterations += sol.iterations;
        per_mu.push(sol.iterations);
        min_pivot = min_pivot.min(sol.min_pivot_seen);
        x.clone_from(&sol.x);
        lambda.clone_from(&sol.lambda);
        last = Some(sol);
    }
    let mut sol = last.expect("schedule is never empty");
    sol.iterations = iterations;
    sol.iterations_per_mu = per_mu;
    sol.min_pivot_seen = min_pivot;
    Ok(sol)
}

/// Strictly interior starting point: bounded proper variables at their box
/// midpoint (one unit inside a one-sided bound), redundant variables seeded
/// by the problem, multipliers zero.
pub fn interior_initializer(nlp: &dyn ParametricNlp) -> (Vec<f64>, Vec<f64>) {
    let mut x: Vec<f64> = nlp
        .variables()
        .iter()
        .map(|v| match (v.lower, v.upper) {
            (Some(l), Some(u)) => 0.5 * (l + u),
            (Some(l), None) => l + 1.0,
            (None, Some(u)) => u - 1.0,
            (None, None) => 0.0,
        })
        .collect();
    nlp.seed_redundant(&mut x);
    (x, vec![0.0; nlp.num_constraints()])
}
