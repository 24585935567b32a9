//! Parametric NLP abstraction and the log-barrier KKT machinery built on it.
//!
//! A [`ParametricNlp`] is `min f(x, θ) s.t. c(x, θ) = 0` with simple bounds on
//! the proper variables. The bounds never appear as constraints; they are
//! folded into the barrier objective `f − μ Σ ln(slack)` so the KKT residual
//! is
//!
//! ```text
//! F_μ(x, λ, θ) = ( ∇f − μ ∇φ(x) + Bᵀλ ,  c(x, θ) ),     B = ∇ₓc
//! ```
//!
//! and its Jacobian with respect to `(x, λ)` is the saddle-point matrix
//! `[∇²L_μ  Bᵀ; B  0]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::TripletMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariableKind {
    /// Bounded, enters every constraint affinely.
    Proper,
    /// Unbounded, carries the nonlinearity.
    Redundant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDescriptor {
    pub index: usize,
    pub kind: VariableKind,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub name: String,
}

impl VariableDescriptor {
    /// Whether this variable carries barrier terms. Only proper variables do;
    /// bounds declared on a redundant variable are a modelling error that the
    /// structural checks report.
    pub fn has_barrier(&self) -> bool {
        self.kind == VariableKind::Proper && (self.lower.is_some() || self.upper.is_some())
    }
}

/// Role of a constraint row in the structural analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintRole {
    /// One of the rows that pin down the redundant variables (level-volume,
    /// head difference and alias rows).
    DefinesRedundant,
    General,
}

/// Sparse coordinate entries `(row, col, value)`; duplicates are summed.
pub type Triplets = Vec<(usize, usize, f64)>;

/// `min_x f(x, θ)  s.t.  c(x, θ) = 0`, θ ∈ [0, 1].
///
/// Evaluators must be deterministic. Derivatives are supplied in sparse
/// coordinate form; the Hessian of `f + λᵀc` is given as its lower triangle
/// (`row >= col`).
pub trait ParametricNlp {
    fn variables(&self) -> &[VariableDescriptor];
    fn num_constraints(&self) -> usize;

    fn objective(&self, x: &[f64], theta: f64) -> f64;
    fn objective_gradient(&self, x: &[f64], theta: f64, grad: &mut [f64]);
    fn constraints(&self, x: &[f64], theta: f64, out: &mut [f64]);
    fn jacobian_triplets(&self, x: &[f64], theta: f64, out: &mut Triplets);
    /// Lower triangle of `∇²f(x, θ) + Σ λ_k ∇²c_k(x, θ)` (no barrier terms).
    fn hessian_triplets(&self, x: &[f64], lambda: &[f64], theta: f64, out: &mut Triplets);

    fn num_variables(&self) -> usize {
        self.variables().len()
    }

    fn constraint_roles(&self) -> Vec<ConstraintRole> {
        vec![ConstraintRole::General; self.num_constraints()]
    }

    /// Fill redundant entries of an initial guess whose proper entries are
    /// already set. The default leaves them untouched.
    fn seed_redundant(&self, _x: &mut [f64]) {}
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("variable {name} (index {index}) is not strictly inside its bounds")]
    OutsideBounds { index: usize, name: String },
    #[error("barrier parameter must be positive, got {0}")]
    NonPositiveMu(f64),
}

fn check_domain(nlp: &dyn ParametricNlp, x: &[f64], mu: f64) -> Result<(), NlpError> {
    if !(mu > 0.0) {
        return Err(NlpError::NonPositiveMu(mu));
    }
    first_bound_violation(nlp, x).map_or(Ok(()), Err)
}

/// First variable that is not strictly interior to its barrier bounds.
pub fn first_bound_violation(nlp: &dyn ParametricNlp, x: &[f64]) -> Option<NlpError> {
    nlp.variables()
        .iter()
        .filter(|v| v.has_barrier())
        .find(|v| {
            let xi = x[v.index];
            let below = v.lower.is_some_and(|l| !(xi > l));
            let above = v.upper.is_some_and(|u| !(xi < u));
            below || above
        })
        .map(|v| NlpError::OutsideBounds {
            index: v.index,
            name: v.name.clone(),
        })
}

/// Distances `x − l` and `u − x` of every barrier variable, `+∞` where a
/// bound (or the barrier) is absent.
///
/// Recomputing `u − x` from a rounded iterate close to a bound of large
/// magnitude loses most of its significant digits, which puts a floor under
/// the attainable KKT residual at small μ. A solver can instead carry the
/// slacks alongside `x` and update them with the same step.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundSlacks {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoundSlacks {
    pub fn from_point(nlp: &dyn ParametricNlp, x: &[f64]) -> Self {
        let n = x.len();
        let mut lower = vec![f64::INFINITY; n];
        let mut upper = vec![f64::INFINITY; n];
        for v in nlp.variables().iter().filter(|v| v.has_barrier()) {
            if let Some(l) = v.lower {
                lower[v.index] = x[v.index] - l;
            }
            if let Some(u) = v.upper {
                upper[v.index] = u - x[v.index];
            }
        }
        Self { lower, upper }
    }

    /// Slacks after the move `x + α·dx`.
    pub fn stepped(&self, dx: &[f64], alpha: f64) -> Self {
        let move_by = |s: &[f64], sign: f64| -> Vec<f64> {
            s.iter()
                .zip(dx)
                .map(|(&si, &di)| {
                    if si.is_finite() {
                        si + sign * alpha * di
                    } else {
                        si
                    }
                })
                .collect()
        };
        Self {
            lower: move_by(&self.lower, 1.0),
            upper: move_by(&self.upper, -1.0),
        }
    }

    /// Index of the first variable with a non-positive (or NaN) slack.
    pub fn first_nonpositive(&self) -> Option<usize> {
        self.lower
            .iter()
            .zip(&self.upper)
            .position(|(&l, &u)| !(l > 0.0 && u > 0.0))
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn log_sum(&self) -> f64 {
        self.lower
            .iter()
            .chain(&self.upper)
            .filter(|s| s.is_finite())
            .map(|s| s.ln())
            .sum()
    }

    /// Gradient of `Σ ln slack` with respect to `x`.
    pub fn gradient(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| 1.0 / l - 1.0 / u)
            .collect()
    }

    /// Diagonal of `−∇²(Σ ln slack)`.
    pub fn hessian_diagonal(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| 1.0 / (l * l) + 1.0 / (u * u))
            .collect()
    }
}

fn slacks_checked(nlp: &dyn ParametricNlp, x: &[f64], mu: f64) -> Result<BoundSlacks, NlpError> {
    check_domain(nlp, x, mu)?;
    Ok(BoundSlacks::from_point(nlp, x))
}

/// `f(x, θ) − μ Σ [ln(x−l) + ln(u−x)]`.
pub fn barrier_objective(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    mu: f64,
    theta: f64,
) -> Result<f64, NlpError> {
    let slacks = slacks_checked(nlp, x, mu)?;
    Ok(nlp.objective(x, theta) - mu * slacks.log_sum())
}

/// Gradient of the barrier log-sum; zero on variables without barrier terms.
pub fn barrier_gradient(nlp: &dyn ParametricNlp, x: &[f64]) -> Vec<f64> {
    BoundSlacks::from_point(nlp, x).gradient()
}

/// Diagonal of `−∇²(Σ ln slack)`, i.e. `1/(x−l)² + 1/(u−x)²`.
pub fn barrier_hessian_diagonal(nlp: &dyn ParametricNlp, x: &[f64]) -> Vec<f64> {
    BoundSlacks::from_point(nlp, x).hessian_diagonal()
}

pub fn constraint_values(nlp: &dyn ParametricNlp, x: &[f64], theta: f64) -> Vec<f64> {
    let mut c = vec![0.0; nlp.num_constraints()];
    nlp.constraints(x, theta, &mut c);
    c
}

pub fn objective_gradient(nlp: &dyn ParametricNlp, x: &[f64], theta: f64) -> Vec<f64> {
    let mut g = vec![0.0; nlp.num_variables()];
    nlp.objective_gradient(x, theta, &mut g);
    g
}

/// Dense constraint Jacobian `B = ∇ₓc(x, θ)` (ℓ × n).
pub fn constraint_jacobian(nlp: &dyn ParametricNlp, x: &[f64], theta: f64) -> DMatrix<f64> {
    let mut t = Vec::new();
    nlp.jacobian_triplets(x, theta, &mut t);
    let mut b = DMatrix::zeros(nlp.num_constraints(), nlp.num_variables());
    for (r, c, v) in t {
        b[(r, c)] += v;
    }
    b
}

fn symmetric_from_lower(n: usize, lower: Triplets) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n, n);
    for (r, c, v) in lower {
        h[(r, c)] += v;
        if r != c {
            h[(c, r)] += v;
        }
    }
    h
}

/// Dense `∇²ₓₓ(f + λᵀc)` without barrier terms.
pub fn lagrangian_hessian_plain(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    lambda: &[f64],
    theta: f64,
) -> DMatrix<f64> {
    let mut t = Vec::new();
    nlp.hessian_triplets(x, lambda, theta, &mut t);
    symmetric_from_lower(nlp.num_variables(), t)
}

/// Dense `∇²ₓₓ L_μ(x, λ, θ)` including the barrier diagonal. `μ = 0` is
/// allowed here (plain Lagrangian Hessian).
pub fn lagrangian_hessian(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    lambda: &[f64],
    theta: f64,
    mu: f64,
) -> DMatrix<f64> {
    let mut h = lagrangian_hessian_plain(nlp, x, lambda, theta);
    if mu != 0.0 {
        for (i, d) in barrier_hessian_diagonal(nlp, x).into_iter().enumerate() {
            h[(i, i)] += mu * d;
        }
    }
    h
}

/// Dense objective Hessian `∇²f(x, θ)`.
pub fn objective_hessian(nlp: &dyn ParametricNlp, x: &[f64], theta: f64) -> DMatrix<f64> {
    let zeros = vec![0.0; nlp.num_constraints()];
    lagrangian_hessian_plain(nlp, x, &zeros, theta)
}

/// Stationarity block `∇f − μ∇φ + Bᵀλ` without domain checks.
fn lagrangian_gradient_unchecked(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> Vec<f64> {
    stationarity(nlp, x, &BoundSlacks::from_point(nlp, x), lambda, mu, theta)
}

fn stationarity(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    slacks: &BoundSlacks,
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> Vec<f64> {
    let mut g = objective_gradient(nlp, x, theta);
    let bar = slacks.gradient();
    for (gi, bi) in g.iter_mut().zip(bar) {
        *gi -= mu * bi;
    }
    let mut t = Vec::new();
    nlp.jacobian_triplets(x, theta, &mut t);
    for (r, c, v) in t {
        g[c] += v * lambda[r];
    }
    g
}

/// `∇ₓ L_μ(x, λ, θ)`.
pub fn lagrangian_gradient(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> Result<Vec<f64>, NlpError> {
    check_domain(nlp, x, mu)?;
    Ok(lagrangian_gradient_unchecked(nlp, x, lambda, mu, theta))
}

/// Stacked KKT residual `F_μ = (∇ₓL_μ, c)` of length `n + ℓ`.
pub fn kkt_residual(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> Result<Vec<f64>, NlpError> {
    let slacks = slacks_checked(nlp, x, mu)?;
    kkt_residual_with_slacks(nlp, x, &slacks, lambda, mu, theta)
}

/// [`kkt_residual`] with the barrier terms taken from carried slacks instead
/// of being recomputed from `x`.
pub fn kkt_residual_with_slacks(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    slacks: &BoundSlacks,
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> Result<Vec<f64>, NlpError> {
    if !(mu > 0.0) {
        return Err(NlpError::NonPositiveMu(mu));
    }
    if let Some(index) = slacks.first_nonpositive() {
        return Err(NlpError::OutsideBounds {
            index,
            name: nlp.variables()[index].name.clone(),
        });
    }
    let mut f = stationarity(nlp, x, slacks, lambda, mu, theta);
    f.extend(constraint_values(nlp, x, theta));
    Ok(f)
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| {
        if x.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(x.abs())
        }
    })
}

/// Newton system for `F_μ = 0`: `[∇²L_μ  Bᵀ; B  0] d = −F_μ`.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub primal_dim: usize,
    pub dual_dim: usize,
    pub matrix: TripletMatrix,
    pub rhs: Vec<f64>,
}

impl KktSystem {
    pub fn dim(&self) -> usize {
        self.primal_dim + self.dual_dim
    }

    /// Build from a dense matrix; used for hand-made systems in tests and
    /// diagnostics.
    pub fn from_dense(primal_dim: usize, matrix: &DMatrix<f64>, rhs: Vec<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..matrix.nrows() {
            for j in 0..matrix.ncols() {
                if matrix[(i, j)] != 0.0 {
                    t.push((i, j, matrix[(i, j)]));
                }
            }
        }
        Self {
            primal_dim,
            dual_dim: matrix.nrows() - primal_dim,
            matrix: TripletMatrix::from_triplets(matrix.nrows(), t),
            rhs,
        }
    }
}

/// Exact Jacobian of [`kkt_residual`] with respect to `(x, λ)`, plus `−F_μ`.
pub fn assemble_kkt(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> Result<KktSystem, NlpError> {
    let slacks = slacks_checked(nlp, x, mu)?;
    assemble_kkt_with_slacks(nlp, x, &slacks, lambda, mu, theta)
}

/// [`assemble_kkt`] with barrier terms taken from carried slacks.
pub fn assemble_kkt_with_slacks(
    nlp: &dyn ParametricNlp,
    x: &[f64],
    slacks: &BoundSlacks,
    lambda: &[f64],
    mu: f64,
    theta: f64,
) -> Result<KktSystem, NlpError> {
    let residual = kkt_residual_with_slacks(nlp, x, slacks, lambda, mu, theta)?;
    let n = nlp.num_variables();
    let m = nlp.num_constraints();

    let mut entries = Vec::new();
    let mut hess = Vec::new();
    nlp.hessian_triplets(x, lambda, theta, &mut hess);
    for (r, c, v) in hess {
        entries.push((r, c, v));
        if r != c {
            entries.push((c, r, v));
        }
    }
    for (i, d) in slacks.hessian_diagonal().into_iter().enumerate() {
        if d != 0.0 {
            entries.push((i, i, mu * d));
        }
    }
    let mut jac = Vec::new();
    nlp.jacobian_triplets(x, theta, &mut jac);
    for (r, c, v) in jac {
        entries.push((n + r, c, v));
        entries.push((c, n + r, v));
    }
    Ok(KktSystem {
        primal_dim: n,
        dual_dim: m,
        matrix: TripletMatrix::from_triplets(n + m, entries),
        rhs: residual.into_iter().map(|v| -v).collect(),
    })
}

/// A vector-valued map with an analytic derivative, for finite-difference
/// verification.
pub trait Evaluator {
    fn value(&self, x: &[f64], theta: f64) -> Vec<f64>;
    /// Jacobian of [`Evaluator::value`], `value.len() × x.len()`.
    fn derivative(&self, x: &[f64], theta: f64) -> DMatrix<f64>;
}

/// `c(x, θ)` against `∇ₓc`.
pub struct ConstraintEvaluator<'a>(pub &'a dyn ParametricNlp);

impl Evaluator for ConstraintEvaluator<'_> {
    fn value(&self, x: &[f64], theta: f64) -> Vec<f64> {
        constraint_values(self.0, x, theta)
    }
    fn derivative(&self, x: &[f64], theta: f64) -> DMatrix<f64> {
        constraint_jacobian(self.0, x, theta)
    }
}

/// `f(x, θ)` against `∇f`.
pub struct ObjectiveEvaluator<'a>(pub &'a dyn ParametricNlp);

impl Evaluator for ObjectiveEvaluator<'_> {
    fn value(&self, x: &[f64], theta: f64) -> Vec<f64> {
        vec![self.0.objective(x, theta)]
    }
    fn derivative(&self, x: &[f64], theta: f64) -> DMatrix<f64> {
        let g = objective_gradient(self.0, x, theta);
        DMatrix::from_row_slice(1, g.len(), &g)
    }
}

/// `∇f` against `∇²f`.
pub struct ObjectiveGradientEvaluator<'a>(pub &'a dyn ParametricNlp);

impl Evaluator for ObjectiveGradientEvaluator<'_> {
    fn value(&self, x: &[f64], theta: f64) -> Vec<f64> {
        objective_gradient(self.0, x, theta)
    }
    fn derivative(&self, x: &[f64], theta: f64) -> DMatrix<f64> {
        objective_hessian(self.0, x, theta)
    }
}

/// `∇ₓL_μ` against `∇²ₓₓL_μ` for fixed multipliers and barrier parameter.
pub struct LagrangianGradientEvaluator<'a> {
    pub nlp: &'a dyn ParametricNlp,
    pub lambda: Vec<f64>,
    pub mu: f64,
}

impl Evaluator for LagrangianGradientEvaluator<'_> {
    fn value(&self, x: &[f64], theta: f64) -> Vec<f64> {
        lagrangian_gradient_unchecked(self.nlp, x, &self.lambda, self.mu, theta)
    }
    fn derivative(&self, x: &[f64], theta: f64) -> DMatrix<f64> {
        lagrangian_hessian(self.nlp, x, &self.lambda, theta, self.mu)
    }
}

/// Closure-backed evaluator.
pub struct FnEvaluator<V, D> {
    pub value: V,
    pub derivative: D,
}

impl<V, D> Evaluator for FnEvaluator<V, D>
where
    V: Fn(&[f64], f64) -> Vec<f64>,
    D: Fn(&[f64], f64) -> DMatrix<f64>,
{
    fn value(&self, x: &[f64], theta: f64) -> Vec<f64> {
        (self.value)(x, theta)
    }
    fn derivative(&self, x: &[f64], theta: f64) -> DMatrix<f64> {
        (self.derivative)(x, theta)
    }
}

/// Finite-difference step used by [`fd_check`].
pub fn fd_step(xi: f64) -> f64 {
    1e-6 * (1.0 + xi.abs())
}

/// Central-difference check of an evaluator's derivative at `point`.
/// Returns `max |analytic − fd| / (1 + |analytic|)` over all entries.
pub fn fd_check(evaluator: &dyn Evaluator, point: &[f64], theta: f64) -> f64 {
    let analytic = evaluator.derivative(point, theta);
    let mut worst = 0.0_f64;
    let mut probe = point.to_vec();
    for j in 0..point.len() {
        let h = fd_step(point[j]);
        probe[j] = point[j] + h;
        let plus = evaluator.value(&probe, theta);
        probe[j] = point[j] - h;
        let minus = evaluator.value(&probe, theta);
        probe[j] = point[j];
        // the actual step after rounding, not the nominal one
        let span = (point[j] + h) - (point[j] - h);
        for i in 0..plus.len() {
            let fd = (plus[i] - minus[i]) / span;
            let a = analytic[(i, j)];
            let err = (a - fd).abs() / (1.0 + a.abs());
            if err.is_nan() {
                return f64::NAN;
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Convenience for tests and diagnostics.
pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
