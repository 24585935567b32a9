//! Numerical checks of the structural hypotheses behind path stability:
//! bounds only on proper variables (BND), proper variables entering the
//! constraints affinely (LIN), independent constraint gradients (IND), a
//! convex problem at `θ = 0`, the redundant-variable span condition and the
//! block structure of the barrier Hessian.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::numerical_rank;
use crate::nlp::{
    constraint_jacobian, lagrangian_hessian, objective_hessian, ConstraintRole, ParametricNlp,
    VariableKind,
};

/// Relative tolerance of the numerical rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Largest entry deviation still considered constant across samples.
pub const AFFINE_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_SEED: u64 = 0x5EED_2024;
pub const REPORT_THETAS: [f64; 3] = [0.0, 0.5, 1.0];
/// Barrier parameter used for the Hessian block check.
const HESSIAN_CHECK_MU: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub check: String,
    pub passed: bool,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl Diagnostic {
    fn new(check: &str, passed: bool, message: impl Into<String>) -> Self {
        Self {
            check: check.into(),
            passed,
            message: message.into(),
            theta: None,
            sample: None,
            rank: None,
            expected_rank: None,
            value: None,
        }
    }

    fn at(mut self, theta: f64, sample: usize) -> Self {
        self.theta = Some(theta);
        self.sample = Some(sample);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub passed: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl CheckOutcome {
    fn from(diagnostics: Vec<Diagnostic>) -> Self {
        Self {
            passed: diagnostics.iter().all(|d| d.passed),
            diagnostics,
        }
    }
}

/// Every proper variable has at least one bound, no redundant variable has
/// any.
pub fn check_bnd(nlp: &dyn ParametricNlp) -> CheckOutcome {
    let mut out = Vec::new();
    for v in nlp.variables() {
        let bounded = v.lower.is_some() || v.upper.is_some();
        match v.kind {
            VariableKind::Proper if !bounded => out.push(Diagnostic::new(
                "bnd",
                false,
                format!("proper variable {} has no bound", v.name),
            )),
            VariableKind::Redundant if bounded => out.push(Diagnostic::new(
                "bnd",
                false,
                format!("redundant variable {} is bounded", v.name),
            )),
            _ => {}
        }
    }
    if out.is_empty() {
        out.push(Diagnostic::new(
            "bnd",
            true,
            format!("{} variables classified consistently", nlp.num_variables()),
        ));
    }
    CheckOutcome::from(out)
}

fn max_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>, columns: &[usize]) -> f64 {
    let mut worst = 0.0_f64;
    for &j in columns {
        for i in 0..a.nrows() {
            let d = (a[(i, j)] - b[(i, j)]).abs();
            if d.is_nan() {
                return f64::NAN;
            }
            worst = worst.max(d);
        }
    }
    worst
}

fn proper_columns(nlp: &dyn ParametricNlp) -> Vec<usize> {
    nlp.variables()
        .iter()
        .filter(|v| v.kind == VariableKind::Proper)
        .map(|v| v.index)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityOutcome {
    pub lin: CheckOutcome,
    pub zero_convex: CheckOutcome,
}

/// LIN: the Jacobian columns of the proper variables are identical across
/// the sample points at every `θ` in `thetas`. Zero-convexity: at `θ = 0` the
/// whole Jacobian is identical across samples and the objective Hessian on
/// the proper variables is diagonal and non-negative.
pub fn check_lin_and_zero_convexity(
    nlp: &dyn ParametricNlp,
    points: &[Vec<f64>],
    thetas: &[f64],
) -> AffinityOutcome {
    let proper = proper_columns(nlp);
    let all: Vec<usize> = (0..nlp.num_variables()).collect();

    let mut lin = Vec::new();
    for &theta in thetas {
        let jacobians: Vec<_> = points
            .iter()
            .map(|x| constraint_jacobian(nlp, x, theta))
            .collect();
        let worst = jacobians
            .iter()
            .skip(1)
            .map(|b| max_deviation(&jacobians[0], b, &proper))
            .fold(0.0_f64, |m, d| if d.is_nan() { d } else { m.max(d) });
        let passed = worst <= AFFINE_TOLERANCE;
        let mut d = Diagnostic::new(
            "lin",
            passed,
            format!("max deviation of proper Jacobian columns across samples: {worst:e}"),
        );
        d.theta = Some(theta);
        d.value = Some(worst);
        lin.push(d);
    }

    let mut zc = Vec::new();
    let jacobians: Vec<_> = points
        .iter()
        .map(|x| constraint_jacobian(nlp, x, 0.0))
        .collect();
    let worst = jacobians
        .iter()
        .skip(1)
        .map(|b| max_deviation(&jacobians[0], b, &all))
        .fold(0.0_f64, |m, d| if d.is_nan() { d } else { m.max(d) });
    let mut d = Diagnostic::new(
        "zero_convexity",
        worst <= AFFINE_TOLERANCE,
        format!("max deviation of the theta = 0 Jacobian across samples: {worst:e}"),
    );
    d.theta = Some(0.0);
    d.value = Some(worst);
    zc.push(d);

    for (s, x) in points.iter().enumerate() {
        let h = objective_hessian(nlp, x, 0.0);
        let mut problems = Vec::new();
        for &i in &proper {
            if !(h[(i, i)] >= 0.0) {
                problems.push(format!(
                    "negative curvature {:e} on {}",
                    h[(i, i)],
                    nlp.variables()[i].name
                ));
            }
            for &j in &all {
                if j != i && h[(i, j)] != 0.0 {
                    problems.push(format!(
                        "objective couples {} and {}",
                        nlp.variables()[i].name,
                        nlp.variables()[j].name
                    ));
                }
            }
        }
        if !problems.is_empty() {
            problems.truncate(5);
            zc.push(Diagnostic::new("zero_convexity", false, problems.join("; ")).at(0.0, s));
        }
    }
    if zc.len() == 1 && zc[0].passed {
        zc.push(Diagnostic::new(
            "zero_convexity",
            true,
            "objective Hessian at theta = 0 is diagonal and non-negative on proper variables",
        ));
    }
    AffinityOutcome {
        lin: CheckOutcome::from(lin),
        zero_convex: CheckOutcome::from(zc),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankOutcome {
    pub independence: bool,
    pub span: bool,
    pub jacobian_rank: usize,
    pub constraints: usize,
    pub span_rank: usize,
    pub span_rows: usize,
    pub span_cols: usize,
}

/// Constraint gradients are linearly independent, and the rows that define
/// the redundant variables restricted to the redundant columns form a
/// nonsingular square block.
pub fn check_rank_conditions(nlp: &dyn ParametricNlp, x: &[f64], theta: f64) -> RankOutcome {
    let b = constraint_jacobian(nlp, x, theta);
    let jacobian_rank = numerical_rank(&b, RANK_TOLERANCE);
    let rows: Vec<usize> = nlp
        .constraint_roles()
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == ConstraintRole::DefinesRedundant)
        .map(|(i, _)| i)
        .collect();
    let cols: Vec<usize> = nlp
        .variables()
        .iter()
        .filter(|v| v.kind == VariableKind::Redundant)
        .map(|v| v.index)
        .collect();
    let block = DMatrix::from_fn(rows.len(), cols.len(), |i, j| b[(rows[i], cols[j])]);
    let span_rank = if block.is_empty() {
        0
    } else {
        numerical_rank(&block, RANK_TOLERANCE)
    };
    RankOutcome {
        independence: jacobian_rank == nlp.num_constraints(),
        span: rows.len() == cols.len() && span_rank == cols.len(),
        jacobian_rank,
        constraints: nlp.num_constraints(),
        span_rank,
        span_rows: rows.len(),
        span_cols: cols.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianBlockOutcome {
    pub cross_blocks_zero: bool,
    pub proper_block_diagonal_nonsingular: bool,
    /// Smallest `|H_ii|` over proper variables.
    pub min_proper_diagonal: f64,
    pub message: String,
}

impl HessianBlockOutcome {
    pub fn passed(&self) -> bool {
        self.cross_blocks_zero && self.proper_block_diagonal_nonsingular
    }
}

/// The barrier Lagrangian Hessian has exactly zero proper/redundant cross
/// blocks and a diagonal proper block without zero entries.
pub fn check_hessian_blocks(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> HessianBlockOutcome {
    let h = lagrangian_hessian(nlp, x, lambda, theta, mu);
    let vars = nlp.variables();
    let mut cross = Vec::new();
    let mut offdiag = Vec::new();
    let mut min_diag = f64::INFINITY;
    for vi in vars.iter().filter(|v| v.kind == VariableKind::Proper) {
        let i = vi.index;
        min_diag = min_diag.min(h[(i, i)].abs());
        for vj in vars {
            let j = vj.index;
            if i == j || h[(i, j)] == 0.0 {
                continue;
            }
            match vj.kind {
                VariableKind::Redundant => cross.push(format!("{}/{}", vi.name, vj.name)),
                VariableKind::Proper => offdiag.push(format!("{}/{}", vi.name, vj.name)),
            }
        }
    }
    let diag_ok = offdiag.is_empty() && min_diag > 0.0;
    let mut message = Vec::new();
    if !cross.is_empty() {
        message.push(format!(
            "nonzero proper/redundant coupling: {}",
            cross.iter().take(5).cloned().collect::<Vec<_>>().join(", ")
        ));
    }
    if !offdiag.is_empty() {
        message.push(format!(
            "proper block not diagonal: {}",
            offdiag
                .iter()
                .take(5)
                .cloned()
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    if !(min_diag > 0.0) {
        message.push("proper block has a zero diagonal entry".into());
    }
    if message.is_empty() {
        message.push(format!(
            "block structure holds, smallest proper diagonal {min_diag:e}"
        ));
    }
    HessianBlockOutcome {
        cross_blocks_zero: cross.is_empty(),
        proper_block_diagonal_nonsingular: diag_ok,
        min_proper_diagonal: min_diag,
        message: message.join("; "),
    }
}

/// Random strictly interior points: bounded proper variables uniform in the
/// middle 90% of their box, redundant variables seeded by the problem and
/// perturbed by up to ±5%.
pub fn sample_interior_points(nlp: &dyn ParametricNlp, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut x: Vec<f64> = nlp
                .variables()
                .iter()
                .map(|v| match (v.lower, v.upper) {
                    (Some(l), Some(u)) => l + (u - l) * rng.random_range(0.05..0.95),
                    (Some(l), None) => l + rng.random_range(0.5..1.5),
                    (None, Some(u)) => u - rng.random_range(0.5..1.5),
                    (None, None) => rng.random_range(-1.0..1.0),
                })
                .collect();
            nlp.seed_redundant(&mut x);
            for v in nlp.variables() {
                if v.kind == VariableKind::Redundant {
                    x[v.index] *= 1.0 + rng.random_range(-0.05..0.05);
                }
            }
            x
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralReport {
    pub bnd_ok: bool,
    pub lin_ok: bool,
    pub ind_ok: bool,
    pub zero_convex_ok: bool,
    pub gradient_independence_ok: bool,
    pub redundant_span_ok: bool,
    pub hessian_block_ok: bool,
    pub seed: u64,
    pub thetas: Vec<f64>,
    pub sample_points: Vec<Vec<f64>>,
    pub details: Vec<Diagnostic>,
}

impl StructuralReport {
    pub fn all_passed(&self) -> bool {
        self.bnd_ok
            && self.lin_ok
            && self.ind_ok
            && self.zero_convex_ok
            && self.gradient_independence_ok
            && self.redundant_span_ok
            && self.hessian_block_ok
    }

    /// Names of the failed flags.
    pub fn failed_flags(&self) -> Vec<&'static str> {
        [
            ("bnd", self.bnd_ok),
            ("lin", self.lin_ok),
            ("ind", self.ind_ok),
            ("zero_convexity", self.zero_convex_ok),
            ("gradient_independence", self.gradient_independence_ok),
            ("redundant_span", self.redundant_span_ok),
            ("hessian_block", self.hessian_block_ok),
        ]
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(name, _)| name)
        .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StructureError {
    #[error("at least one sample point is required")]
    NoSamples,
}

/// Run every check over `samples` random interior points and
/// `θ ∈ {0, 0.5, 1}` with the default seed.
pub fn full_report(
    nlp: &dyn ParametricNlp,
    samples: usize,
) -> Result<StructuralReport, StructureError> {
    full_report_seeded(nlp, samples, DEFAULT_SEED)
}

pub fn full_report_seeded(
    nlp: &dyn ParametricNlp,
    samples: usize,
    seed: u64,
) -> Result<StructuralReport, StructureError> {
    if samples == 0 {
        return Err(StructureError::NoSamples);
    }
    let points = sample_interior_points(nlp, samples, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5);
    let mut details = Vec::new();

    let bnd = check_bnd(nlp);
    details.extend(bnd.diagnostics);

    let affinity = check_lin_and_zero_convexity(nlp, &points, &REPORT_THETAS);
    details.extend(affinity.lin.diagnostics);
    details.extend(affinity.zero_convex.diagnostics);

    let mut independence_ok = true;
    let mut worst_rank = usize::MAX;
    let mut span_ok = true;
    let mut hessian_ok = true;
    for (s, x) in points.iter().enumerate() {
        for &theta in &REPORT_THETAS {
            let rank = check_rank_conditions(nlp, x, theta);
            independence_ok &= rank.independence;
            worst_rank = worst_rank.min(rank.jacobian_rank);
            span_ok &= rank.span;
            let mut d = Diagnostic::new(
                "gradient_independence",
                rank.independence,
                format!(
                    "rank(B) = {} of {} constraints",
                    rank.jacobian_rank, rank.constraints
                ),
            )
            .at(theta, s);
            d.rank = Some(rank.jacobian_rank);
            d.expected_rank = Some(rank.constraints);
            details.push(d);
            let mut d = Diagnostic::new(
                "redundant_span",
                rank.span,
                format!(
                    "defining block {}x{} has rank {}",
                    rank.span_rows, rank.span_cols, rank.span_rank
                ),
            )
            .at(theta, s);
            d.rank = Some(rank.span_rank);
            d.expected_rank = Some(rank.span_cols);
            details.push(d);

            let lambda: Vec<f64> = (0..nlp.num_constraints())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let blocks = check_hessian_blocks(nlp, x, &lambda, HESSIAN_CHECK_MU, theta);
            hessian_ok &= blocks.passed();
            let mut d = Diagnostic::new("hessian_block", blocks.passed(), blocks.message.clone())
                .at(theta, s);
            d.value = Some(blocks.min_proper_diagonal);
            details.push(d);
        }
    }

    let mut d = Diagnostic::new(
        "ind",
        independence_ok,
        format!(
            "smallest Jacobian rank {worst_rank} of {} constraints over all samples",
            nlp.num_constraints()
        ),
    );
    d.rank = Some(worst_rank);
    d.expected_rank = Some(nlp.num_constraints());
    details.push(d);

    Ok(StructuralReport {
        bnd_ok: bnd.passed,
        lin_ok: affinity.lin.passed,
        ind_ok: independence_ok,
        zero_convex_ok: affinity.zero_convex.passed,
        gradient_independence_ok: independence_ok,
        redundant_span_ok: span_ok,
        hessian_block_ok: hessian_ok,
        seed,
        thetas: REPORT_THETAS.to_vec(),
        sample_points: points,
        details,
    })
}
