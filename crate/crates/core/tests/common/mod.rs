#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hydro_homotopy::model::{Family, HydroNlp};
use hydro_homotopy::nlp::{
    ConstraintRole, ParametricNlp, Triplets, VariableDescriptor, VariableKind,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn example_json() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples_data/two_reservoir_example.json")
}

pub fn cli(args: &[&std::ffi::OsStr]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydro-homotopy"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// `min ½ xᵀQx + cᵀx  s.t.  A x = b`; variables with a bound are proper,
/// the rest redundant.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub vars: Vec<VariableDescriptor>,
}

impl DenseQp {
    pub fn new(
        q: DMatrix<f64>,
        c: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        bounds: &[(Option<f64>, Option<f64>)],
    ) -> Self {
        let vars = bounds
            .iter()
            .enumerate()
            .map(|(i, &(lower, upper))| VariableDescriptor {
                index: i,
                kind: if lower.is_some() || upper.is_some() {
                    VariableKind::Proper
                } else {
                    VariableKind::Redundant
                },
                lower,
                upper,
                name: format!("x{i}"),
            })
            .collect();
        Self { q, c, a, b, vars }
    }
}

impl ParametricNlp for DenseQp {
    fn variables(&self) -> &[VariableDescriptor] {
        &self.vars
    }
    fn num_constraints(&self) -> usize {
        self.a.nrows()
    }
    fn objective(&self, x: &[f64], _theta: f64) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.q * &x)) + x.dot(&self.c)
    }
    fn objective_gradient(&self, x: &[f64], _theta: f64, grad: &mut [f64]) {
        let g = &self.q * DVector::from_column_slice(x) + &self.c;
        grad.copy_from_slice(g.as_slice());
    }
    fn constraints(&self, x: &[f64], _theta: f64, out: &mut [f64]) {
        let r = &self.a * DVector::from_column_slice(x) - &self.b;
        out.copy_from_slice(r.as_slice());
    }
    fn jacobian_triplets(&self, _x: &[f64], _theta: f64, out: &mut Triplets) {
        out.clear();
        for i in 0..self.a.nrows() {
            for j in 0..self.a.ncols() {
                out.push((i, j, self.a[(i, j)]));
            }
        }
    }
    fn hessian_triplets(&self, _x: &[f64], _l: &[f64], _theta: f64, out: &mut Triplets) {
        out.clear();
        for i in 0..self.q.nrows() {
            for j in 0..=i {
                out.push((i, j, self.q[(i, j)]));
            }
        }
    }
}

/// Random strictly convex box-constrained QP whose minimizer is built in:
/// `x*`, the active bounds, equality multipliers and strictly positive bound
/// multipliers are drawn first and `c`, `b` chosen so the KKT conditions
/// hold. Strict convexity makes `x*` the unique minimizer.
pub struct PlantedQp {
    pub qp: DenseQp,
    pub x_star: DVector<f64>,
    pub active: Vec<Option<bool>>,
}

pub fn planted_qp(seed: u64) -> PlantedQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=20usize);
    let m = rng.random_range(0..=10usize.min(n - 1));
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = &g * g.transpose() + DMatrix::identity(n, n) * 0.5;
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));

    // at most n - m - 1 active bounds keeps the free columns of A full rank
    let max_active = n - m - 1;
    let mut bounds = Vec::with_capacity(n);
    let mut x_star = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    let mut active = vec![None; n];
    let mut n_active = 0;
    for i in 0..n {
        let lo = rng.random_range(-3.0..-0.5);
        let hi = rng.random_range(0.5..3.0);
        bounds.push((Some(lo), Some(hi)));
        let pick = rng.random_range(0..3u8);
        if n_active < max_active && pick < 2 {
            n_active += 1;
            let mult = rng.random_range(0.5..2.0);
            if pick == 0 {
                x_star[i] = lo;
                z[i] = mult;
                active[i] = Some(false);
            } else {
                x_star[i] = hi;
                z[i] = -mult;
                active[i] = Some(true);
            }
        } else {
            let t = rng.random_range(0.2..0.8);
            x_star[i] = lo + t * (hi - lo);
        }
    }
    let lambda = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    // stationarity: Qx + c + Aᵀλ - z = 0 with z = z_l - z_u
    let c = -(&q * &x_star) - a.transpose() * &lambda + &z;
    let b = &a * &x_star;
    PlantedQp {
        qp: DenseQp::new(q, c, a, b, &bounds),
        x_star,
        active,
    }
}

/// Minimizer of a planted QP recomputed by a direct KKT solve with its active
/// bounds fixed; agrees with `x_star` when the construction is consistent.
pub fn active_set_kkt_solution(p: &PlantedQp) -> DVector<f64> {
    let qp = &p.qp;
    let n = qp.q.nrows();
    let m = qp.a.nrows();
    let fixed: Vec<(usize, f64)> = p
        .active
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            a.map(|upper| {
                let (l, u) = (qp.vars[i].lower.unwrap(), qp.vars[i].upper.unwrap());
                (i, if upper { u } else { l })
            })
        })
        .collect();
    let k = fixed.len();
    let dim = n + m + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.q);
    kkt.view_mut((0, n), (n, m)).copy_from(&qp.a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(&qp.a);
    for (r, &(i, v)) in fixed.iter().enumerate() {
        kkt[(n + m + r, i)] = 1.0;
        kkt[(i, n + m + r)] = 1.0;
        rhs[n + m + r] = v;
    }
    rhs.rows_mut(0, n).copy_from(&(-&qp.c));
    rhs.rows_mut(n, m).copy_from(&qp.b);
    let sol = kkt.lu().solve(&rhs).expect("nonsingular active-set KKT");
    sol.rows(0, n).into_owned()
}

/// `min (x - 1)²  s.t.  x² + 2θ - 1 = 0,  x > 0`. The feasible branch
/// `x = sqrt(1 - 2θ)` reaches the bound at `θ = ½`, where the constraint
/// gradient vanishes, and no feasible point exists beyond it.
pub struct FoldToy {
    vars: Vec<VariableDescriptor>,
}

impl Default for FoldToy {
    fn default() -> Self {
        Self {
            vars: vec![VariableDescriptor {
                index: 0,
                kind: VariableKind::Proper,
                lower: Some(0.0),
                upper: Some(2.0),
                name: "x".into(),
            }],
        }
    }
}

impl ParametricNlp for FoldToy {
    fn variables(&self) -> &[VariableDescriptor] {
        &self.vars
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &[f64], _theta: f64) -> f64 {
        (x[0] - 1.0).powi(2)
    }
    fn objective_gradient(&self, x: &[f64], _theta: f64, grad: &mut [f64]) {
        grad[0] = 2.0 * (x[0] - 1.0);
    }
    fn constraints(&self, x: &[f64], theta: f64, out: &mut [f64]) {
        out[0] = x[0] * x[0] + 2.0 * theta - 1.0;
    }
    fn jacobian_triplets(&self, x: &[f64], _theta: f64, out: &mut Triplets) {
        out.clear();
        out.push((0, 0, 2.0 * x[0]));
    }
    fn hessian_triplets(&self, _x: &[f64], lambda: &[f64], _theta: f64, out: &mut Triplets) {
        out.clear();
        out.push((0, 0, 2.0 + 2.0 * lambda[0]));
    }
}

/// Deliberate violations of one structural hypothesis each, layered over the
/// example cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    /// A volume variable gets a box.
    BoundedRedundant,
    /// The upstream power enters its generation row as `θ·P²`.
    NonlinearProper,
    /// Concave objective term in a power variable at `θ = 0`.
    ConcaveAtZero,
    /// One defining row relabelled as general.
    MissingDefiningRow,
    /// Objective couples a power and a volume variable for `θ > 0`.
    CrossCoupling,
    /// The last constraint appears twice.
    DuplicateRow,
    /// The first generation row keeps a `Q·ΔH` product at `θ = 0`.
    BlendAtZero,
}

pub struct Defective {
    pub base: HydroNlp,
    pub defect: Defect,
    vars: Vec<VariableDescriptor>,
}

const P_SCALE: f64 = 1e-6;

impl Defective {
    pub fn new(base: HydroNlp, defect: Defect) -> Self {
        let mut vars = base.variables().to_vec();
        if defect == Defect::BoundedRedundant {
            let v = base.volume_index(0, 0);
            vars[v].lower = Some(0.0);
            vars[v].upper = Some(3.0e6);
        }
        Self { base, defect, vars }
    }

    fn power(&self) -> usize {
        self.base.power_index(0, 0)
    }

    fn volume(&self) -> usize {
        self.base.volume_index(0, 0)
    }

    fn release_and_head(&self) -> (usize, usize) {
        (
            self.base.release_index(0, 0),
            self.base.index(Family::HeadDifference, 0, 0),
        )
    }
}

impl ParametricNlp for Defective {
    fn variables(&self) -> &[VariableDescriptor] {
        &self.vars
    }
    fn num_constraints(&self) -> usize {
        self.base.num_constraints() + usize::from(self.defect == Defect::DuplicateRow)
    }
    fn objective(&self, x: &[f64], theta: f64) -> f64 {
        let (p, v) = (x[self.power()] * P_SCALE, x[self.volume()] * P_SCALE);
        self.base.objective(x, theta)
            + match self.defect {
                Defect::ConcaveAtZero => -(1.0 - theta) * p * p,
                Defect::CrossCoupling => theta * p * v,
                _ => 0.0,
            }
    }
    fn objective_gradient(&self, x: &[f64], theta: f64, grad: &mut [f64]) {
        self.base.objective_gradient(x, theta, grad);
        let (p, v) = (x[self.power()] * P_SCALE, x[self.volume()] * P_SCALE);
        match self.defect {
            Defect::ConcaveAtZero => grad[self.power()] -= (1.0 - theta) * 2.0 * p * P_SCALE,
            Defect::CrossCoupling => {
                grad[self.power()] += theta * v * P_SCALE;
                grad[self.volume()] += theta * p * P_SCALE;
            }
            _ => {}
        }
    }
    fn constraints(&self, x: &[f64], theta: f64, out: &mut [f64]) {
        let n = self.base.num_constraints();
        self.base.constraints(x, theta, &mut out[..n]);
        match self.defect {
            Defect::NonlinearProper => out[0] += theta * (x[self.power()] * P_SCALE).powi(2),
            Defect::DuplicateRow => out[n] = out[n - 1],
            Defect::BlendAtZero => {
                let (iq, idh) = self.release_and_head();
                out[0] += (1.0 - theta) * x[iq] * x[idh] * P_SCALE;
            }
            _ => {}
        }
    }
    fn jacobian_triplets(&self, x: &[f64], theta: f64, out: &mut Triplets) {
        self.base.jacobian_triplets(x, theta, out);
        let n = self.base.num_constraints();
        match self.defect {
            Defect::NonlinearProper => out.push((
                0,
                self.power(),
                theta * 2.0 * x[self.power()] * P_SCALE * P_SCALE,
            )),
            Defect::DuplicateRow => {
                let dup: Vec<_> = out
                    .iter()
                    .filter(|e| e.0 == n - 1)
                    .map(|&(_, j, v)| (n, j, v))
                    .collect();
                out.extend(dup);
            }
            Defect::BlendAtZero => {
                let (iq, idh) = self.release_and_head();
                out.push((0, iq, (1.0 - theta) * x[idh] * P_SCALE));
                out.push((0, idh, (1.0 - theta) * x[iq] * P_SCALE));
            }
            _ => {}
        }
    }
    fn hessian_triplets(&self, x: &[f64], lambda: &[f64], theta: f64, out: &mut Triplets) {
        let n = self.base.num_constraints();
        let mut l = lambda[..n].to_vec();
        if self.defect == Defect::DuplicateRow {
            l[n - 1] += lambda[n];
        }
        self.base.hessian_triplets(x, &l, theta, out);
        let (ip, ih) = (self.power(), self.volume());
        let s2 = P_SCALE * P_SCALE;
        match self.defect {
            Defect::NonlinearProper => out.push((ip, ip, lambda[0] * theta * 2.0 * s2)),
            Defect::ConcaveAtZero => out.push((ip, ip, -(1.0 - theta) * 2.0 * s2)),
            Defect::CrossCoupling => {
                let (i, j) = if ip > ih { (ip, ih) } else { (ih, ip) };
                out.push((i, j, theta * s2));
            }
            Defect::BlendAtZero => {
                let (iq, idh) = self.release_and_head();
                let (i, j) = if iq > idh { (iq, idh) } else { (idh, iq) };
                out.push((i, j, lambda[0] * (1.0 - theta) * P_SCALE));
            }
            _ => {}
        }
    }
    fn constraint_roles(&self) -> Vec<ConstraintRole> {
        let mut roles = self.base.constraint_roles();
        match self.defect {
            Defect::MissingDefiningRow => {
                let i = roles
                    .iter()
                    .position(|r| *r == ConstraintRole::DefinesRedundant)
                    .unwrap();
                roles[i] = ConstraintRole::General;
            }
            Defect::DuplicateRow => roles.push(ConstraintRole::General),
            _ => {}
        }
        roles
    }
    fn seed_redundant(&self, x: &mut [f64]) {
        self.base.seed_redundant(x);
    }
}
