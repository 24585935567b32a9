//! Reservoir-cascade description and its translation into a parametric NLP.
//!
//! Per timestep `t_j` the assembled problem carries, for every reservoir, a
//! level `H` (proper) and a volume `V` (redundant), and for every turbine a
//! power `P` and release `Q` (proper) plus an alias release `Q̃` and head
//! difference `ΔH` (redundant). The residuals are
//!
//! ```text
//! c1  P − gρ[(1−θ) η₀ Q ΔH₀ + θ η̃(Q̃, V_u, ΔH) Q̃ ΔH]          (turbine)
//! c2  H − (1−θ)(α V + β) − θ Γ(V)                               (reservoir)
//! c3  (V_j − V_{j−1})/Δt − Q_in + Q_out                         (reservoir)
//! c4  ΔH − H_u + H_d                                            (turbine)
//! c5  Q − Q̃                                                     (turbine)
//! ```
//!
//! The generation row is divided by [`POWER_SCALE`] so that its residual is
//! in MW, and the objective is `−Σ P / POWER_SCALE`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nlp::{ConstraintRole, ParametricNlp, Triplets, VariableDescriptor, VariableKind};

/// Gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;
/// Density of water, kg/m³.
pub const WATER_DENSITY: f64 = 1000.0;
/// Watts per unit of the generation residual and objective.
pub const POWER_SCALE: f64 = 1e6;

/// Largest admissible turbine efficiency.
pub const EFFICIENCY_CEILING: f64 = 1.2;

// Forward simulation accepts levels this far (m) outside their bounds; it
// absorbs the mass-balance residual left by a converged solve.
const LEVEL_SLACK: f64 = 1e-6;
const FLOW_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub step_count: usize,
    pub step_seconds: f64,
}

impl TimeGrid {
    /// `t_j = j·Δt`, `j = 1..=N`.
    pub fn timestamps(&self) -> Vec<f64> {
        (1..=self.step_count)
            .map(|j| j as f64 * self.step_seconds)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum LevelVolumeRelation {
    /// `H = H_b + V / A`.
    Linear { area: f64, bottom_level: f64 },
    /// `H = H_b + c·V^p`, `p ∈ (0, 1]`.
    ConcavePower {
        coefficient: f64,
        exponent: f64,
        bottom_level: f64,
    },
}

impl LevelVolumeRelation {
    pub fn bottom_level(&self) -> f64 {
        match *self {
            Self::Linear { bottom_level, .. } | Self::ConcavePower { bottom_level, .. } => {
                bottom_level
            }
        }
    }

    /// Γ(V).
    pub fn level(&self, volume: f64) -> f64 {
        match *self {
            Self::Linear { area, bottom_level } => bottom_level + volume / area,
            Self::ConcavePower {
                coefficient,
                exponent,
                bottom_level,
            } => bottom_level + coefficient * volume.powf(exponent),
        }
    }

    /// dΓ/dV.
    pub fn level_slope(&self, volume: f64) -> f64 {
        match *self {
            Self::Linear { area, .. } => 1.0 / area,
            Self::ConcavePower {
                coefficient,
                exponent,
                ..
            } => coefficient * exponent * volume.powf(exponent - 1.0),
        }
    }

    /// d²Γ/dV².
    pub fn level_curvature(&self, volume: f64) -> f64 {
        match *self {
            Self::Linear { .. } => 0.0,
            Self::ConcavePower {
                coefficient,
                exponent,
                ..
            } => coefficient * exponent * (exponent - 1.0) * volume.powf(exponent - 2.0),
        }
    }

    /// Γ⁻¹(H).
    pub fn volume(&self, level: f64) -> f64 {
        match *self {
            Self::Linear { area, bottom_level } => area * (level - bottom_level),
            Self::ConcavePower {
                coefficient,
                exponent,
                bottom_level,
            } => ((level - bottom_level) / coefficient).powf(1.0 / exponent),
        }
    }

    /// Affine surrogate `(α, β)` with `H ≈ αV + β`: exact for `Linear`, the
    /// tangent at `reference_volume` otherwise.
    pub fn linearization(&self, reference_volume: f64) -> (f64, f64) {
        match *self {
            Self::Linear { area, bottom_level } => (1.0 / area, bottom_level),
            Self::ConcavePower { .. } => {
                let alpha = self.level_slope(reference_volume);
                (
                    alpha,
                    self.level(reference_volume) - alpha * reference_volume,
                )
            }
        }
    }

    fn check(&self, field: &str, out: &mut Vec<Diagnostic>) {
        match *self {
            Self::Linear { area, bottom_level } => {
                if !(area > 0.0 && area.is_finite()) {
                    out.push(Diagnostic::new(
                        format!("{field}.area"),
                        "area must be positive",
                    ));
                }
                if !bottom_level.is_finite() {
                    out.push(Diagnostic::new(
                        format!("{field}.bottom_level"),
                        "must be finite",
                    ));
                }
            }
            Self::ConcavePower {
                coefficient,
                exponent,
                bottom_level,
            } => {
                if !(coefficient > 0.0 && coefficient.is_finite()) {
                    out.push(Diagnostic::new(
                        format!("{field}.coefficient"),
                        "coefficient must be positive",
                    ));
                }
                if !(exponent > 0.0 && exponent <= 1.0) {
                    out.push(Diagnostic::new(
                        format!("{field}.exponent"),
                        "exponent must lie in (0, 1]",
                    ));
                }
                if !bottom_level.is_finite() {
                    out.push(Diagnostic::new(
                        format!("{field}.bottom_level"),
                        "must be finite",
                    ));
                }
            }
        }
    }
}

/// Quadratic efficiency surface in `(Q̃, V, ΔH)`; absent coefficients are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfficiencyPolynomial {
    pub constant: f64,
    pub flow: f64,
    pub volume: f64,
    pub head: f64,
    pub flow_flow: f64,
    pub volume_volume: f64,
    pub head_head: f64,
    pub flow_volume: f64,
    pub flow_head: f64,
    pub volume_head: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum EfficiencyModel {
    Constant(f64),
    SmoothPolynomial(EfficiencyPolynomial),
}

/// Value, gradient and Hessian of η̃ at a point, ordered `(Q̃, V, ΔH)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyJet {
    pub value: f64,
    pub gradient: [f64; 3],
    pub hessian: [[f64; 3]; 3],
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error(
    "efficiency {value} at (Q={flow}, V={volume}, dH={head}) is outside (0, {EFFICIENCY_CEILING}]"
)]
pub struct EfficiencyRangeError {
    pub value: f64,
    pub flow: f64,
    pub volume: f64,
    pub head: f64,
}

impl EfficiencyModel {
    /// Smooth evaluation with derivatives, no range check.
    pub fn jet(&self, flow: f64, volume: f64, head: f64) -> EfficiencyJet {
        match *self {
            Self::Constant(eta) => EfficiencyJet {
                value: eta,
                gradient: [0.0; 3],
                hessian: [[0.0; 3]; 3],
            },
            Self::SmoothPolynomial(p) => {
                let (q, v, h) = (flow, volume, head);
                let value = p.constant
                    + p.flow * q
                    + p.volume * v
                    + p.head * h
                    + p.flow_flow * q * q
                    + p.volume_volume * v * v
                    + p.head_head * h * h
                    + p.flow_volume * q * v
                    + p.flow_head * q * h
                    + p.volume_head * v * h;
                let gradient = [
                    p.flow + 2.0 * p.flow_flow * q + p.flow_volume * v + p.flow_head * h,
                    p.volume + 2.0 * p.volume_volume * v + p.flow_volume * q + p.volume_head * h,
                    p.head + 2.0 * p.head_head * h + p.flow_head * q + p.volume_head * v,
                ];
                let hessian = [
                    [2.0 * p.flow_flow, p.flow_volume, p.flow_head],
                    [p.flow_volume, 2.0 * p.volume_volume, p.volume_head],
                    [p.flow_head, p.volume_head, 2.0 * p.head_head],
                ];
                EfficiencyJet {
                    value,
                    gradient,
                    hessian,
                }
            }
        }
    }

    /// Range-checked efficiency.
    pub fn efficiency(
        &self,
        flow: f64,
        volume: f64,
        head: f64,
    ) -> Result<f64, EfficiencyRangeError> {
        let value = self.jet(flow, volume, head).value;
        if value > 0.0 && value <= EFFICIENCY_CEILING {
            Ok(value)
        } else {
            Err(EfficiencyRangeError {
                value,
                flow,
                volume,
                head,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum InflowSource {
    /// Exogenous inflow per timestep, m³/s.
    BoundarySeries(Vec<f64>),
    /// Name of the turbine discharging into this reservoir.
    UpstreamTurbine(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirSpec {
    pub name: String,
    pub level_volume: LevelVolumeRelation,
    pub initial_level: f64,
    pub level_bounds: [f64; 2],
    pub inflow: InflowSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Downstream {
    Reservoir(String),
    FixedTailwater { level: f64 },
}

/// Coefficients of the linear generation surrogate `P = gρ η₀ Q ΔH₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linearization {
    pub eta0: f64,
    pub delta_h0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurbineSpec {
    pub name: String,
    pub upstream_reservoir: String,
    pub downstream: Downstream,
    pub efficiency: EfficiencyModel,
    pub flow_bounds: [f64; 2],
    pub power_bounds: [f64; 2],
    /// Defaults to η̃ at mid-range flow, initial volume and initial head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linearization: Option<Linearization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    MaximizeTotalGeneration,
}

/// Extra box bound on every timestep of one variable family, named like the
/// path CSV variables (e.g. `"P_u"`, `"V_upstream"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdditionalBound {
    pub variable: String,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSpec {
    pub grid: TimeGrid,
    pub reservoirs: Vec<ReservoirSpec>,
    pub turbines: Vec<TurbineSpec>,
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub additional_bounds: Vec<AdditionalBound>,
    #[serde(default, skip_serializing_if = "SolverSettings::is_empty")]
    pub solver: SolverSettings,
}

/// Optional solver and continuation settings carried in the config file;
/// command-line flags take precedence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kkt_tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_newton_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<bool>,
}

impl SolverSettings {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Error)]
pub enum SpecIoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid cascade JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CascadeSpec {
    pub fn from_json(text: &str) -> Result<Self, SpecIoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, SpecIoError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecIoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn reservoir(&self, name: &str) -> Option<&ReservoirSpec> {
        self.reservoirs.iter().find(|r| r.name == name)
    }

    pub fn turbine(&self, name: &str) -> Option<&TurbineSpec> {
        self.turbines.iter().find(|t| t.name == name)
    }

    /// Two-reservoir cascade with constant inflow, linear level-volume
    /// relations and constant efficiency 0.85, discharging into a fixed
    /// tailwater at 800 m.
    pub fn example() -> Self {
        let n = 48;
        Self {
            grid: TimeGrid {
                step_count: n,
                step_seconds: 3600.0,
            },
            reservoirs: vec![
                ReservoirSpec {
                    name: "upstream".into(),
                    level_volume: LevelVolumeRelation::Linear {
                        area: 1e5,
                        bottom_level: 1000.0,
                    },
                    initial_level: 1005.0,
                    level_bounds: [1000.0, 1030.0],
                    inflow: InflowSource::BoundarySeries(vec![100.0; n]),
                },
                ReservoirSpec {
                    name: "downstream".into(),
                    level_volume: LevelVolumeRelation::Linear {
                        area: 1e5,
                        bottom_level: 900.0,
                    },
                    initial_level: 925.0,
                    level_bounds: [900.0, 930.0],
                    inflow: InflowSource::UpstreamTurbine("u".into()),
                },
            ],
            turbines: vec![
                TurbineSpec {
                    name: "u".into(),
                    upstream_reservoir: "upstream".into(),
                    downstream: Downstream::Reservoir("downstream".into()),
                    efficiency: EfficiencyModel::Constant(0.85),
                    flow_bounds: [0.0, 100.0],
                    power_bounds: [0.0, 1e9],
                    linearization: Some(Linearization {
                        eta0: 0.85,
                        delta_h0: 80.0,
                    }),
                },
                TurbineSpec {
                    name: "d".into(),
                    upstream_reservoir: "downstream".into(),
                    downstream: Downstream::FixedTailwater { level: 800.0 },
                    efficiency: EfficiencyModel::Constant(0.85),
                    flow_bounds: [0.0, 100.0],
                    power_bounds: [0.0, 1e9],
                    linearization: Some(Linearization {
                        eta0: 0.85,
                        delta_h0: 125.0,
                    }),
                },
            ],
            objective: Objective::MaximizeTotalGeneration,
            additional_bounds: Vec::new(),
            solver: SolverSettings::default(),
        }
    }
}

/// One violated rule, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub rule: String,
}

impl Diagnostic {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn check_range(field: String, bounds: [f64; 2], what: &str, out: &mut Vec<Diagnostic>) {
    let [lo, hi] = bounds;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
        out.push(Diagnostic::new(
            field,
            format!("{what} bounds must satisfy 0 <= min < max"),
        ));
    }
}

/// Check every structural and range invariant of a cascade. Returns an empty
/// list for a valid spec.
pub fn validate(spec: &CascadeSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = spec.grid.step_count;
    if n == 0 {
        out.push(Diagnostic::new("grid.step_count", "must be at least 1"));
    }
    if !(spec.grid.step_seconds > 0.0 && spec.grid.step_seconds.is_finite()) {
        out.push(Diagnostic::new("grid.step_seconds", "must be positive"));
    }

    let mut seen = BTreeSet::new();
    for (i, r) in spec.reservoirs.iter().enumerate() {
        if !seen.insert(r.name.as_str()) {
            out.push(Diagnostic::new(
                format!("reservoirs[{i}].name"),
                "duplicate reservoir name",
            ));
        }
    }
    let mut seen = BTreeSet::new();
    for (i, t) in spec.turbines.iter().enumerate() {
        if !seen.insert(t.name.as_str()) {
            out.push(Diagnostic::new(
                format!("turbines[{i}].name"),
                "duplicate turbine name",
            ));
        }
    }

    for (i, r) in spec.reservoirs.iter().enumerate() {
        let field = format!("reservoirs[{i}]");
        r.level_volume
            .check(&format!("{field}.level_volume"), &mut out);
        let [lo, hi] = r.level_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            out.push(Diagnostic::new(
                format!("{field}.level_bounds"),
                "level bounds must satisfy min < max",
            ));
        } else if lo < r.level_volume.bottom_level() {
            out.push(Diagnostic::new(
                format!("{field}.level_bounds"),
                "minimum level lies below the bottom level",
            ));
        }
        if !(r.initial_level >= lo && r.initial_level <= hi) {
            out.push(Diagnostic::new(
                format!("{field}.initial_level"),
                format!(
                    "initial level {} outside level bounds [{lo}, {hi}]",
                    r.initial_level
                ),
            ));
        }
        match &r.inflow {
            InflowSource::BoundarySeries(series) => {
                if series.len() != n {
                    out.push(Diagnostic::new(
                        format!("{field}.inflow"),
                        format!(
                            "boundary series has {} values, grid has {n} steps",
                            series.len()
                        ),
                    ));
                }
                if series.iter().any(|v| !v.is_finite()) {
                    out.push(Diagnostic::new(
                        format!("{field}.inflow"),
                        "non-finite inflow value",
                    ));
                }
            }
            InflowSource::UpstreamTurbine(name) => match spec.turbine(name) {
                None => out.push(Diagnostic::new(
                    format!("{field}.inflow"),
                    format!("upstream turbine '{name}' does not exist"),
                )),
                Some(t) if t.downstream != Downstream::Reservoir(r.name.clone()) => {
                    out.push(Diagnostic::new(
                        format!("{field}.inflow"),
                        format!("turbine '{name}' does not discharge into this reservoir"),
                    ))
                }
                Some(_) => {}
            },
        }
    }

    for (i, t) in spec.turbines.iter().enumerate() {
        let field = format!("turbines[{i}]");
        let upstream = spec.reservoir(&t.upstream_reservoir);
        if upstream.is_none() {
            out.push(Diagnostic::new(
                format!("{field}.upstream_reservoir"),
                format!("reservoir '{}' does not exist", t.upstream_reservoir),
            ));
        }
        match &t.downstream {
            Downstream::Reservoir(name) => match spec.reservoir(name) {
                None => out.push(Diagnostic::new(
                    format!("{field}.downstream"),
                    format!("reservoir '{name}' does not exist"),
                )),
                Some(r) if r.inflow != InflowSource::UpstreamTurbine(t.name.clone()) => {
                    out.push(Diagnostic::new(
                        format!("{field}.downstream"),
                        format!("reservoir '{name}' does not take its inflow from this turbine"),
                    ))
                }
                Some(_) => {}
            },
            Downstream::FixedTailwater { level } => {
                if !level.is_finite() {
                    out.push(Diagnostic::new(
                        format!("{field}.downstream"),
                        "tailwater level must be finite",
                    ));
                }
            }
        }
        check_range(
            format!("{field}.flow_bounds"),
            t.flow_bounds,
            "flow",
            &mut out,
        );
        check_range(
            format!("{field}.power_bounds"),
            t.power_bounds,
            "power",
            &mut out,
        );
        if let Some(lin) = t.linearization {
            if !(lin.eta0 > 0.0 && lin.eta0 <= EFFICIENCY_CEILING) {
                out.push(Diagnostic::new(
                    format!("{field}.linearization.eta0"),
                    "eta0 must lie in (0, 1.2]",
                ));
            }
            if !(lin.delta_h0 > 0.0 && lin.delta_h0.is_finite()) {
                out.push(Diagnostic::new(
                    format!("{field}.linearization.delta_h0"),
                    "delta_h0 must be positive",
                ));
            }
        }
        match t.efficiency {
            EfficiencyModel::Constant(eta) => {
                if !(eta > 0.0 && eta <= 1.0) {
                    out.push(Diagnostic::new(
                        format!("{field}.efficiency"),
                        "constant efficiency must lie in (0, 1]",
                    ));
                }
            }
            EfficiencyModel::SmoothPolynomial(_) => {
                if let Some(box_) = feasible_box(spec, t) {
                    if let Some(err) = efficiency_range_violation(&t.efficiency, box_) {
                        out.push(Diagnostic::new(
                            format!("{field}.efficiency"),
                            err.to_string(),
                        ));
                    }
                }
            }
        }
    }

    if let Some(d) = cycle_diagnostic(spec) {
        out.push(d);
    }

    let families = variable_family_names(spec);
    for (i, b) in spec.additional_bounds.iter().enumerate() {
        if !families.contains(&b.variable) {
            out.push(Diagnostic::new(
                format!("additional_bounds[{i}].variable"),
                format!("unknown variable family '{}'", b.variable),
            ));
        }
        if let (Some(l), Some(u)) = (b.lower, b.upper) {
            if !(l < u) {
                out.push(Diagnostic::new(
                    format!("additional_bounds[{i}]"),
                    "lower bound must be below upper bound",
                ));
            }
        }
    }
    out
}

/// `(flow, volume, head)` ranges reachable within the bounds.
fn feasible_box(spec: &CascadeSpec, t: &TurbineSpec) -> Option<[[f64; 2]; 3]> {
    let up = spec.reservoir(&t.upstream_reservoir)?;
    let down_range = match &t.downstream {
        Downstream::Reservoir(name) => spec.reservoir(name)?.level_bounds,
        Downstream::FixedTailwater { level } => [*level, *level],
    };
    let vol = [
        up.level_volume.volume(up.level_bounds[0]),
        up.level_volume.volume(up.level_bounds[1]),
    ];
    let head = [
        up.level_bounds[0] - down_range[1],
        up.level_bounds[1] - down_range[0],
    ];
    Some([t.flow_bounds, vol, head])
}

fn efficiency_range_violation(
    model: &EfficiencyModel,
    ranges: [[f64; 2]; 3],
) -> Option<EfficiencyRangeError> {
    const SAMPLES: usize = 5;
    let at = |r: [f64; 2], k: usize| r[0] + (r[1] - r[0]) * k as f64 / (SAMPLES - 1) as f64;
    for a in 0..SAMPLES {
        for b in 0..SAMPLES {
            for c in 0..SAMPLES {
                if let Err(e) =
                    model.efficiency(at(ranges[0], a), at(ranges[1], b), at(ranges[2], c))
                {
                    return Some(e);
                }
            }
        }
    }
    None
}

fn cycle_diagnostic(spec: &CascadeSpec) -> Option<Diagnostic> {
    // reservoir -> reservoirs fed by its turbines
    let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for t in &spec.turbines {
        if let Downstream::Reservoir(down) = &t.downstream {
            edges
                .entry(t.upstream_reservoir.as_str())
                .or_default()
                .push(down.as_str());
        }
    }
    fn visit<'a>(
        node: &'a str,
        edges: &BTreeMap<&'a str, Vec<&'a str>>,
        state: &mut BTreeMap<&'a str, u8>,
    ) -> bool {
        match state.get(node) {
            Some(1) => return true,
            Some(2) => return false,
            _ => {}
        }
        state.insert(node, 1);
        for &next in edges.get(node).into_iter().flatten() {
            if visit(next, edges, state) {
                return true;
            }
        }
        state.insert(node, 2);
        false
    }
    let mut state = BTreeMap::new();
    for r in &spec.reservoirs {
        if visit(r.name.as_str(), &edges, &mut state) {
            return Some(Diagnostic::new(
                "turbines",
                format!(
                    "cascade topology contains a cycle through reservoir '{}'",
                    r.name
                ),
            ));
        }
    }
    None
}

fn variable_family_names(spec: &CascadeSpec) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    for r in &spec.reservoirs {
        names.insert(format!("H_{}", r.name));
        names.insert(format!("V_{}", r.name));
    }
    for t in &spec.turbines {
        for prefix in ["P", "Q", "Qt", "dH"] {
            names.insert(format!("{prefix}_{}", t.name));
        }
    }
    names
}

/// Γ⁻¹ at the initial level.
pub fn initial_volume(res: &ReservoirSpec) -> f64 {
    res.level_volume.volume(res.initial_level)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid cascade configuration: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("boundary series of reservoir '{reservoir}' has {len} values, expected {expected}")]
    SeriesLength {
        reservoir: String,
        len: usize,
        expected: usize,
    },
    #[error("release schedule has wrong shape: {0}")]
    ScheduleShape(String),
    #[error("step {step}: {variable} = {value} violates bounds [{lower}, {upper}]")]
    BoundViolation {
        step: usize,
        variable: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("step {step}: {source}")]
    Efficiency {
        step: usize,
        #[source]
        source: EfficiencyRangeError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Level,
    Volume,
    Power,
    Release,
    AliasRelease,
    HeadDifference,
}

impl Family {
    fn prefix(self) -> &'static str {
        match self {
            Self::Level => "H",
            Self::Volume => "V",
            Self::Power => "P",
            Self::Release => "Q",
            Self::AliasRelease => "Qt",
            Self::HeadDifference => "dH",
        }
    }

    fn kind(self) -> VariableKind {
        match self {
            Self::Level | Self::Power | Self::Release => VariableKind::Proper,
            Self::Volume | Self::AliasRelease | Self::HeadDifference => VariableKind::Redundant,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Inflow {
    Series,
    Turbine(usize),
}

#[derive(Debug, Clone, Copy)]
enum Tail {
    Reservoir(usize),
    Fixed(f64),
}

#[derive(Debug, Clone)]
struct ReservoirData {
    relation: LevelVolumeRelation,
    initial_volume: f64,
    initial_level: f64,
    alpha: f64,
    beta: f64,
    inflow: Inflow,
    series: Vec<f64>,
    outlets: Vec<usize>,
}

#[derive(Debug, Clone)]
struct TurbineData {
    upstream: usize,
    tail: Tail,
    efficiency: EfficiencyModel,
    eta0: f64,
    delta_h0: f64,
}

/// Parametric NLP of a reservoir cascade. Variables and constraints are laid
/// out time-major: every timestep owns a contiguous block of
/// `2R + 4T` variables and `2R + 3T` constraints.
#[derive(Debug, Clone)]
pub struct HydroNlp {
    grid: TimeGrid,
    reservoirs: Vec<ReservoirData>,
    turbines: Vec<TurbineData>,
    variables: Vec<VariableDescriptor>,
    families: Vec<(Family, usize)>,
    family_names: Vec<String>,
}

impl HydroNlp {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn vars_per_step(&self) -> usize {
        2 * self.reservoirs.len() + 4 * self.turbines.len()
    }

    pub fn constraints_per_step(&self) -> usize {
        2 * self.reservoirs.len() + 3 * self.turbines.len()
    }

    /// Family names (e.g. `P_u`) of the per-step variable block, in layout
    /// order.
    pub fn family_names(&self) -> &[String] {
        &self.family_names
    }

    fn slot(&self, family: Family, owner: usize) -> usize {
        let r = self.reservoirs.len();
        match family {
            Family::Level => 2 * owner,
            Family::Volume => 2 * owner + 1,
            Family::Power => 2 * r + 4 * owner,
            Family::Release => 2 * r + 4 * owner + 1,
            Family::AliasRelease => 2 * r + 4 * owner + 2,
            Family::HeadDifference => 2 * r + 4 * owner + 3,
        }
    }

    /// Global index of a variable at 0-based step `k`.
    pub fn index(&self, family: Family, owner: usize, step: usize) -> usize {
        step * self.vars_per_step() + self.slot(family, owner)
    }

    pub fn release_index(&self, turbine: usize, step: usize) -> usize {
        self.index(Family::Release, turbine, step)
    }

    pub fn power_index(&self, turbine: usize, step: usize) -> usize {
        self.index(Family::Power, turbine, step)
    }

    pub fn volume_index(&self, reservoir: usize, step: usize) -> usize {
        self.index(Family::Volume, reservoir, step)
    }

    pub fn level_index(&self, reservoir: usize, step: usize) -> usize {
        self.index(Family::Level, reservoir, step)
    }

    pub fn initial_volume(&self, reservoir: usize) -> f64 {
        self.reservoirs[reservoir].initial_volume
    }

    /// Per-turbine release schedules extracted from a solution vector.
    pub fn releases(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..self.turbines.len())
            .map(|t| {
                (0..self.grid.step_count)
                    .map(|k| x[self.release_index(t, k)])
                    .collect()
            })
            .collect()
    }

    /// Inflow to `reservoir` at step `k` under solution `x`, m³/s.
    pub fn inflow(&self, reservoir: usize, k: usize, x: &[f64]) -> f64 {
        let r = &self.reservoirs[reservoir];
        match r.inflow {
            Inflow::Series => r.series[k],
            Inflow::Turbine(t) => x[self.release_index(t, k)],
        }
    }

    /// Outflow from `reservoir` at step `k` under solution `x`, m³/s.
    pub fn outflow(&self, reservoir: usize, k: usize, x: &[f64]) -> f64 {
        self.reservoirs[reservoir]
            .outlets
            .iter()
            .map(|&t| x[self.release_index(t, k)])
            .sum()
    }

    pub fn num_reservoirs(&self) -> usize {
        self.reservoirs.len()
    }

    pub fn num_turbines(&self) -> usize {
        self.turbines.len()
    }

    fn tail_level(&self, t: &TurbineData, k: usize, x: &[f64]) -> f64 {
        match t.tail {
            Tail::Reservoir(d) => x[self.level_index(d, k)],
            Tail::Fixed(level) => level,
        }
    }

    fn eval_step(&self, x: &[f64], theta: f64, k: usize, out: &mut [f64]) {
        let r_count = self.reservoirs.len();
        let t_count = self.turbines.len();
        let base = k * self.constraints_per_step();
        let gr = GRAVITY * WATER_DENSITY;
        let dt = self.grid.step_seconds;

        for (ti, t) in self.turbines.iter().enumerate() {
            let p = x[self.index(Family::Power, ti, k)];
            let q = x[self.index(Family::Release, ti, k)];
            let qt = x[self.index(Family::AliasRelease, ti, k)];
            let dh = x[self.index(Family::HeadDifference, ti, k)];
            let v = x[self.volume_index(t.upstream, k)];
            let eta = t.efficiency.jet(qt, v, dh).value;
            let generation = (1.0 - theta) * t.eta0 * q * t.delta_h0 + theta * eta * qt * dh;
            out[base + ti] = (p - gr * generation) / POWER_SCALE;

            let h_up = x[self.level_index(t.upstream, k)];
            out[base + t_count + 2 * r_count + ti] = dh - h_up + self.tail_level(t, k, x);
            out[base + 2 * t_count + 2 * r_count + ti] = q - qt;
        }
        for (ri, r) in self.reservoirs.iter().enumerate() {
            let h = x[self.level_index(ri, k)];
            let v = x[self.volume_index(ri, k)];
            out[base + t_count + ri] =
                h - (1.0 - theta) * (r.alpha * v + r.beta) - theta * r.relation.level(v);

            let v_prev = if k == 0 {
                r.initial_volume
            } else {
                x[self.volume_index(ri, k - 1)]
            };
            out[base + t_count + r_count + ri] =
                (v - v_prev) / dt - self.inflow(ri, k, x) + self.outflow(ri, k, x);
        }
    }
}

/// Build the parametric NLP for a valid cascade.
pub fn assemble_nlp(spec: &CascadeSpec) -> Result<HydroNlp, ModelError> {
    let n = spec.grid.step_count;
    for r in &spec.reservoirs {
        if let InflowSource::BoundarySeries(series) = &r.inflow {
            if series.len() != n {
                return Err(ModelError::SeriesLength {
                    reservoir: r.name.clone(),
                    len: series.len(),
                    expected: n,
                });
            }
        }
    }
    let diagnostics = validate(spec);
    if !diagnostics.is_empty() {
        return Err(ModelError::Invalid(diagnostics));
    }

    let reservoir_index: BTreeMap<&str, usize> = spec
        .reservoirs
        .iter()
        .enumerate()
        .map(|(i, r)| (r.name.as_str(), i))
        .collect();
    let turbine_index: BTreeMap<&str, usize> = spec
        .turbines
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.as_str(), i))
        .collect();

    let mut reservoirs: Vec<ReservoirData> = spec
        .reservoirs
        .iter()
        .map(|r| {
            let v0 = initial_volume(r);
            let (alpha, beta) = r.level_volume.linearization(v0);
            let (inflow, series) = match &r.inflow {
                InflowSource::BoundarySeries(s) => (Inflow::Series, s.clone()),
                InflowSource::UpstreamTurbine(t) => {
                    (Inflow::Turbine(turbine_index[t.as_str()]), Vec::new())
                }
            };
            ReservoirData {
                relation: r.level_volume,
                initial_volume: v0,
                initial_level: r.initial_level,
                alpha,
                beta,
                inflow,
                series,
                outlets: Vec::new(),
            }
        })
        .collect();

    let turbines: Vec<TurbineData> = spec
        .turbines
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let upstream = reservoir_index[t.upstream_reservoir.as_str()];
            reservoirs[upstream].outlets.push(ti);
            let up = &spec.reservoirs[upstream];
            let (tail, tail_level) = match &t.downstream {
                Downstream::Reservoir(name) => {
                    let d = reservoir_index[name.as_str()];
                    (Tail::Reservoir(d), spec.reservoirs[d].initial_level)
                }
                Downstream::FixedTailwater { level } => (Tail::Fixed(*level), *level),
            };
            let lin = t.linearization.unwrap_or_else(|| {
                let head = up.initial_level - tail_level;
                let flow = 0.5 * (t.flow_bounds[0] + t.flow_bounds[1]);
                Linearization {
                    eta0: t.efficiency.jet(flow, initial_volume(up), head).value,
                    delta_h0: head,
                }
            });
            TurbineData {
                upstream,
                tail,
                efficiency: t.efficiency,
                eta0: lin.eta0,
                delta_h0: lin.delta_h0,
            }
        })
        .collect();

    let mut per_step: Vec<(Family, usize)> = Vec::new();
    let mut family_names = Vec::new();
    let mut bounds_of: Vec<(Option<f64>, Option<f64>)> = Vec::new();
    for (ri, r) in spec.reservoirs.iter().enumerate() {
        per_step.push((Family::Level, ri));
        bounds_of.push((Some(r.level_bounds[0]), Some(r.level_bounds[1])));
        per_step.push((Family::Volume, ri));
        bounds_of.push((None, None));
        family_names.push(format!("H_{}", r.name));
        family_names.push(format!("V_{}", r.name));
    }
    for (ti, t) in spec.turbines.iter().enumerate() {
        per_step.push((Family::Power, ti));
        bounds_of.push((Some(t.power_bounds[0]), Some(t.power_bounds[1])));
        per_step.push((Family::Release, ti));
        bounds_of.push((Some(t.flow_bounds[0]), Some(t.flow_bounds[1])));
        per_step.push((Family::AliasRelease, ti));
        bounds_of.push((None, None));
        per_step.push((Family::HeadDifference, ti));
        bounds_of.push((None, None));
        for prefix in ["P", "Q", "Qt", "dH"] {
            family_names.push(format!("{prefix}_{}", t.name));
        }
    }
    for extra in &spec.additional_bounds {
        let slot = family_names
            .iter()
            .position(|f| *f == extra.variable)
            .expect("validated family name");
        let entry = &mut bounds_of[slot];
        if extra.lower.is_some() {
            entry.0 = extra.lower;
        }
        if extra.upper.is_some() {
            entry.1 = extra.upper;
        }
    }

    let mut variables = Vec::with_capacity(n * per_step.len());
    for k in 0..n {
        for (slot, &(family, _)) in per_step.iter().enumerate() {
            let (lower, upper) = bounds_of[slot];
            variables.push(VariableDescriptor {
                index: variables.len(),
                kind: family.kind(),
                lower,
                upper,
                name: format!("{}[t{}]", family_names[slot], k + 1),
            });
        }
    }
    debug_assert!(per_step
        .iter()
        .zip(&family_names)
        .all(|(f, name)| name.starts_with(f.0.prefix())));

    Ok(HydroNlp {
        grid: spec.grid,
        reservoirs,
        turbines,
        variables,
        families: per_step,
        family_names,
    })
}

impl ParametricNlp for HydroNlp {
    fn variables(&self) -> &[VariableDescriptor] {
        &self.variables
    }

    fn num_constraints(&self) -> usize {
        self.grid.step_count * self.constraints_per_step()
    }

    fn objective(&self, x: &[f64], _theta: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.grid.step_count {
            for t in 0..self.turbines.len() {
                total += x[self.power_index(t, k)];
            }
        }
        -total / POWER_SCALE
    }

    fn objective_gradient(&self, _x: &[f64], _theta: f64, grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for k in 0..self.grid.step_count {
            for t in 0..self.turbines.len() {
                grad[self.power_index(t, k)] = -1.0 / POWER_SCALE;
            }
        }
    }

    fn constraints(&self, x: &[f64], theta: f64, out: &mut [f64]) {
        for k in 0..self.grid.step_count {
            self.eval_step(x, theta, k, out);
        }
    }

    fn jacobian_triplets(&self, x: &[f64], theta: f64, out: &mut Triplets) {
        out.clear();
        let r_count = self.reservoirs.len();
        let t_count = self.turbines.len();
        let gr = GRAVITY * WATER_DENSITY;
        let dt = self.grid.step_seconds;
        for k in 0..self.grid.step_count {
            let base = k * self.constraints_per_step();
            for (ti, t) in self.turbines.iter().enumerate() {
                let ip = self.index(Family::Power, ti, k);
                let iq = self.index(Family::Release, ti, k);
                let iqt = self.index(Family::AliasRelease, ti, k);
                let idh = self.index(Family::HeadDifference, ti, k);
                let iv = self.volume_index(t.upstream, k);
                let (qt, dh, v) = (x[iqt], x[idh], x[iv]);
                let jet = t.efficiency.jet(qt, v, dh);
                let m = qt * dh;
                let s = -gr / POWER_SCALE;

                let row = base + ti;
                out.push((row, ip, 1.0 / POWER_SCALE));
                out.push((row, iq, s * (1.0 - theta) * t.eta0 * t.delta_h0));
                out.push((row, iqt, s * theta * (jet.gradient[0] * m + jet.value * dh)));
                out.push((row, iv, s * theta * jet.gradient[1] * m));
                out.push((row, idh, s * theta * (jet.gradient[2] * m + jet.value * qt)));

                let row4 = base + t_count + 2 * r_count + ti;
                out.push((row4, idh, 1.0));
                out.push((row4, self.level_index(t.upstream, k), -1.0));
                if let Tail::Reservoir(d) = t.tail {
                    out.push((row4, self.level_index(d, k), 1.0));
                }

                let row5 = base + 2 * t_count + 2 * r_count + ti;
                out.push((row5, iq, 1.0));
                out.push((row5, iqt, -1.0));
            }
            for (ri, r) in self.reservoirs.iter().enumerate() {
                let iv = self.volume_index(ri, k);
                let row2 = base + t_count + ri;
                out.push((row2, self.level_index(ri, k), 1.0));
                out.push((
                    row2,
                    iv,
                    -(1.0 - theta) * r.alpha - theta * r.relation.level_slope(x[iv]),
                ));

                let row3 = base + t_count + r_count + ri;
                out.push((row3, iv, 1.0 / dt));
                if k > 0 {
                    out.push((row3, self.volume_index(ri, k - 1), -1.0 / dt));
                }
                if let Inflow::Turbine(up) = r.inflow {
                    out.push((row3, self.release_index(up, k), -1.0));
                }
                for &t in &r.outlets {
                    out.push((row3, self.release_index(t, k), 1.0));
                }
            }
        }
    }

    fn hessian_triplets(&self, x: &[f64], lambda: &[f64], theta: f64, out: &mut Triplets) {
        out.clear();
        if theta == 0.0 {
            return;
        }
        let t_count = self.turbines.len();
        let gr = GRAVITY * WATER_DENSITY;
        for k in 0..self.grid.step_count {
            let base = k * self.constraints_per_step();
            for (ti, t) in self.turbines.iter().enumerate() {
                let weight = lambda[base + ti] * (-gr / POWER_SCALE) * theta;
                if weight == 0.0 {
                    continue;
                }
                let iqt = self.index(Family::AliasRelease, ti, k);
                let iv = self.volume_index(t.upstream, k);
                let idh = self.index(Family::HeadDifference, ti, k);
                let (qt, v, dh) = (x[iqt], x[iv], x[idh]);
                let jet = t.efficiency.jet(qt, v, dh);
                let (e, g, h) = (jet.value, jet.gradient, jet.hessian);
                let m = qt * dh;
                // second derivatives of η̃·Q̃·ΔH, ordered (Q̃, V, ΔH)
                let d = [
                    [
                        h[0][0] * m + 2.0 * g[0] * dh,
                        h[0][1] * m + g[1] * dh,
                        h[0][2] * m + g[0] * qt + g[2] * dh + e,
                    ],
                    [0.0, h[1][1] * m, h[1][2] * m + g[1] * qt],
                    [0.0, 0.0, h[2][2] * m + 2.0 * g[2] * qt],
                ];
                let idx = [iqt, iv, idh];
                for a in 0..3 {
                    for b in a..3 {
                        let val = weight * d[a][b];
                        if val != 0.0 {
                            let (i, j) = (idx[a], idx[b]);
                            out.push((i.max(j), i.min(j), val));
                        }
                    }
                }
            }
            for (ri, r) in self.reservoirs.iter().enumerate() {
                let iv = self.volume_index(ri, k);
                let curvature = r.relation.level_curvature(x[iv]);
                let val = -lambda[base + t_count + ri] * theta * curvature;
                if val != 0.0 {
                    out.push((iv, iv, val));
                }
            }
        }
    }

    fn constraint_roles(&self) -> Vec<ConstraintRole> {
        let r_count = self.reservoirs.len();
        let t_count = self.turbines.len();
        let mut roles = Vec::with_capacity(self.num_constraints());
        for _ in 0..self.grid.step_count {
            roles.extend(std::iter::repeat_n(ConstraintRole::General, t_count));
            roles.extend(std::iter::repeat_n(
                ConstraintRole::DefinesRedundant,
                r_count,
            ));
            roles.extend(std::iter::repeat_n(ConstraintRole::General, r_count));
            roles.extend(std::iter::repeat_n(
                ConstraintRole::DefinesRedundant,
                2 * t_count,
            ));
        }
        roles
    }

    /// Volumes from the initial levels, head differences from initial levels,
    /// alias releases copied from the releases.
    fn seed_redundant(&self, x: &mut [f64]) {
        for k in 0..self.grid.step_count {
            for (ri, r) in self.reservoirs.iter().enumerate() {
                x[self.volume_index(ri, k)] = r.initial_volume;
            }
            for (ti, t) in self.turbines.iter().enumerate() {
                let tail = match t.tail {
                    Tail::Reservoir(d) => self.reservoirs[d].initial_level,
                    Tail::Fixed(level) => level,
                };
                x[self.index(Family::HeadDifference, ti, k)] =
                    self.reservoirs[t.upstream].initial_level - tail;
                x[self.index(Family::AliasRelease, ti, k)] = x[self.release_index(ti, k)];
            }
        }
    }
}

impl HydroNlp {
    /// Family and owner index of each per-step slot.
    pub fn slot_families(&self) -> &[(Family, usize)] {
        &self.families
    }
}

/// Result of forward-simulating a release schedule under the full nonlinear
/// physics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    /// `power[turbine][step]`, W.
    pub power: Vec<Vec<f64>>,
    /// `levels[reservoir][step]`, m, after each step.
    pub levels: Vec<Vec<f64>>,
    /// Total generated energy, J.
    pub total_energy_j: f64,
}

/// Simulate `releases[turbine][step]` (m³/s) through the mass balance with the
/// nonlinear level-volume relations and generation equation. Independent of
/// any optimizer state.
pub fn evaluate_schedule(
    spec: &CascadeSpec,
    releases: &[Vec<f64>],
) -> Result<EnergyReport, ModelError> {
    let diagnostics = validate(spec);
    if !diagnostics.is_empty() {
        return Err(ModelError::Invalid(diagnostics));
    }
    let n = spec.grid.step_count;
    if releases.len() != spec.turbines.len() || releases.iter().any(|r| r.len() != n) {
        return Err(ModelError::ScheduleShape(format!(
            "expected {} turbines x {n} steps",
            spec.turbines.len()
        )));
    }
    let dt = spec.grid.step_seconds;
    let mut volumes: Vec<f64> = spec.reservoirs.iter().map(initial_volume).collect();
    let mut power = vec![vec![0.0; n]; spec.turbines.len()];
    let mut levels = vec![vec![0.0; n]; spec.reservoirs.len()];
    let mut energy_j = 0.0;

    for k in 0..n {
        for (ti, t) in spec.turbines.iter().enumerate() {
            let q = releases[ti][k];
            let [lo, hi] = t.flow_bounds;
            if !(q >= lo - FLOW_SLACK && q <= hi + FLOW_SLACK) {
                return Err(ModelError::BoundViolation {
                    step: k + 1,
                    variable: format!("Q_{}", t.name),
                    value: q,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        for (ri, r) in spec.reservoirs.iter().enumerate() {
            let inflow = match &r.inflow {
                InflowSource::BoundarySeries(s) => s[k],
                InflowSource::UpstreamTurbine(name) => {
                    let ti = spec.turbines.iter().position(|t| &t.name == name).unwrap();
                    releases[ti][k]
                }
            };
            let outflow: f64 = spec
                .turbines
                .iter()
                .enumerate()
                .filter(|(_, t)| t.upstream_reservoir == r.name)
                .map(|(ti, _)| releases[ti][k])
                .sum();
            volumes[ri] += dt * (inflow - outflow);
            let h = r.level_volume.level(volumes[ri]);
            let [lo, hi] = r.level_bounds;
            if !(h >= lo - LEVEL_SLACK && h <= hi + LEVEL_SLACK) {
                return Err(ModelError::BoundViolation {
                    step: k + 1,
                    variable: format!("H_{}", r.name),
                    value: h,
                    lower: lo,
                    upper: hi,
                });
            }
            levels[ri][k] = h;
        }
        for (ti, t) in spec.turbines.iter().enumerate() {
            let ri = spec
                .reservoirs
                .iter()
                .position(|r| r.name == t.upstream_reservoir)
                .unwrap();
            let h_up = levels[ri][k];
            let h_down = match &t.downstream {
                Downstream::Reservoir(name) => {
                    let d = spec
                        .reservoirs
                        .iter()
                        .position(|r| &r.name == name)
                        .unwrap();
                    levels[d][k]
                }
                Downstream::FixedTailwater { level } => *level,
            };
            let q = releases[ti][k];
            let head = h_up - h_down;
            let eta = t
                .efficiency
                .efficiency(q, volumes[ri], head)
                .map_err(|source| ModelError::Efficiency {
                    step: k + 1,
                    source,
                })?;
            let p = GRAVITY * WATER_DENSITY * eta * q * head;
            let [lo, hi] = t.power_bounds;
            if !(p >= lo - FLOW_SLACK * hi && p <= hi * (1.0 + FLOW_SLACK)) {
                return Err(ModelError::BoundViolation {
                    step: k + 1,
                    variable: format!("P_{}", t.name),
                    value: p,
                    lower: lo,
                    upper: hi,
                });
            }
            power[ti][k] = p;
            energy_j += p * dt;
        }
    }
    Ok(EnergyReport {
        power,
        levels,
        total_energy_j: energy_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{
        constraint_values, fd_check, ConstraintEvaluator, FnEvaluator, LagrangianGradientEvaluator,
    };
    use nalgebra::DMatrix;

    #[test]
    fn example_spec_is_valid() {
        assert_eq!(validate(&CascadeSpec::example()), vec![]);
    }

    #[test]
    fn initial_level_below_bottom_gives_one_diagnostic() {
        let mut spec = CascadeSpec::example();
        spec.reservoirs[0].initial_level = 999.0;
        let d = validate(&spec);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].field, "reservoirs[0].initial_level");
    }

    #[test]
    fn dangling_reservoir_reference_gives_one_diagnostic() {
        let mut spec = CascadeSpec::example();
        spec.turbines[0].upstream_reservoir = "nowhere".into();
        let d = validate(&spec);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].field, "turbines[0].upstream_reservoir");
    }

    #[test]
    fn cycle_is_reported() {
        let mut spec = CascadeSpec::example();
        spec.turbines[1].downstream = Downstream::Reservoir("upstream".into());
        spec.reservoirs[0].inflow = InflowSource::UpstreamTurbine("d".into());
        let d = validate(&spec);
        assert!(d.iter().any(|d| d.rule.contains("cycle")), "{d:?}");
    }

    #[test]
    fn series_length_mismatch_is_rejected() {
        let mut spec = CascadeSpec::example();
        spec.reservoirs[0].inflow = InflowSource::BoundarySeries(vec![100.0; 47]);
        assert!(matches!(
            assemble_nlp(&spec),
            Err(ModelError::SeriesLength {
                len: 47,
                expected: 48,
                ..
            })
        ));
    }

    #[test]
    fn initial_volumes() {
        let spec = CascadeSpec::example();
        assert_eq!(initial_volume(&spec.reservoirs[0]), 5e5);
        assert_eq!(initial_volume(&spec.reservoirs[1]), 2.5e6);
        let mut empty = spec.reservoirs[0].clone();
        empty.initial_level = 1000.0;
        assert_eq!(initial_volume(&empty), 0.0);
    }

    #[test]
    fn example_dimensions() {
        let nlp = assemble_nlp(&CascadeSpec::example()).unwrap();
        assert_eq!(nlp.vars_per_step(), 12);
        assert_eq!(nlp.constraints_per_step(), 10);
        assert_eq!(nlp.num_variables(), 576);
        assert_eq!(nlp.num_constraints(), 480);
        assert_eq!(nlp.variables()[nlp.power_index(0, 16)].name, "P_u[t17]");
    }

    fn steady_point(nlp: &HydroNlp, q: f64) -> Vec<f64> {
        let mut x = vec![0.0; nlp.num_variables()];
        for k in 0..48 {
            x[nlp.level_index(0, k)] = 1005.0;
            x[nlp.level_index(1, k)] = 925.0;
            x[nlp.release_index(0, k)] = q;
            x[nlp.release_index(1, k)] = q;
        }
        nlp.seed_redundant(&mut x);
        x
    }

    #[test]
    fn linear_generation_row_fixes_power() {
        let nlp = assemble_nlp(&CascadeSpec::example()).unwrap();
        let mut x = steady_point(&nlp, 100.0);
        // P that zeroes c1 at θ = 0: 9.81·1000·0.85·100·80
        x[nlp.power_index(0, 0)] = 66_708_000.0;
        let c = constraint_values(&nlp, &x, 0.0);
        assert!(c[0].abs() < 1e-12, "{}", c[0]);
        x[nlp.power_index(0, 0)] = 66_708_001.0;
        let c = constraint_values(&nlp, &x, 0.0);
        assert!((c[0] - 1.0 / POWER_SCALE).abs() < 1e-12);
    }

    #[test]
    fn alias_row_vanishes_on_equal_releases() {
        let nlp = assemble_nlp(&CascadeSpec::example()).unwrap();
        let x = steady_point(&nlp, 42.0);
        let c = constraint_values(&nlp, &x, 0.7);
        // c5 rows are the last T rows of each step block
        for k in 0..48 {
            let base = k * 10;
            assert_eq!(c[base + 8], 0.0);
            assert_eq!(c[base + 9], 0.0);
        }
    }

    #[test]
    fn steady_schedule_energy() {
        let spec = CascadeSpec::example();
        let report = evaluate_schedule(&spec, &[vec![100.0; 48], vec![100.0; 48]]).unwrap();
        // 48 h · (66.708 + 104.23125) MW
        let expected_j = 48.0 * 3600.0 * (66.708e6 + 104.23125e6);
        assert!((report.total_energy_j - expected_j).abs() < 1e-9 * expected_j);
        assert!(report.levels[0].iter().all(|&h| (h - 1005.0).abs() < 1e-9));
        assert!(report.levels[1].iter().all(|&h| (h - 925.0).abs() < 1e-9));

        let zero = evaluate_schedule(&spec, &[vec![0.0; 48], vec![0.0; 48]]);
        // upstream fills 3.6 m/h and overtops 1030 m after 7 steps
        assert!(matches!(
            zero,
            Err(ModelError::BoundViolation { step: 7, .. })
        ));
    }

    #[test]
    fn zero_releases_give_zero_energy() {
        let mut spec = CascadeSpec::example();
        spec.reservoirs[0].inflow = InflowSource::BoundarySeries(vec![0.0; 48]);
        let report = evaluate_schedule(&spec, &[vec![0.0; 48], vec![0.0; 48]]).unwrap();
        assert_eq!(report.total_energy_j, 0.0);
    }

    #[test]
    fn overflow_names_step_and_variable() {
        let spec = CascadeSpec::example();
        let mut releases = vec![vec![100.0; 48], vec![100.0; 48]];
        releases[1][0] = 0.0;
        releases[1][1] = 0.0;
        // downstream gains 3.6 m per held step: 928.6 then 932.2 > 930
        match evaluate_schedule(&spec, &releases) {
            Err(ModelError::BoundViolation { step, variable, .. }) => {
                assert_eq!(step, 2);
                assert_eq!(variable, "H_downstream");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn concave_power_relation_derivatives() {
        let rel = LevelVolumeRelation::ConcavePower {
            coefficient: 0.01,
            exponent: 0.5,
            bottom_level: 100.0,
        };
        let eval = FnEvaluator {
            value: |v: &[f64], _: f64| vec![rel.level(v[0]), rel.level_slope(v[0])],
            derivative: |v: &[f64], _: f64| {
                DMatrix::from_row_slice(2, 1, &[rel.level_slope(v[0]), rel.level_curvature(v[0])])
            },
        };
        assert!(fd_check(&eval, &[1e6], 0.0) <= 1e-6);
        let h = rel.level(2.5e5);
        assert!((rel.volume(h) - 2.5e5).abs() < 1e-6);
    }

    #[test]
    fn generation_row_derivatives_at_half_homotopy() {
        let mut spec = CascadeSpec::example();
        spec.turbines[0].efficiency = EfficiencyModel::SmoothPolynomial(EfficiencyPolynomial {
            constant: 0.6,
            flow: 2e-3,
            head: 1e-3,
            flow_flow: -1e-5,
            flow_head: 1e-6,
            volume: 1e-8,
            ..Default::default()
        });
        spec.turbines[0].linearization = None;
        spec.reservoirs[0].level_volume = LevelVolumeRelation::ConcavePower {
            coefficient: 0.04,
            exponent: 0.5,
            bottom_level: 1000.0,
        };
        assert_eq!(validate(&spec), vec![]);
        let nlp = assemble_nlp(&spec).unwrap();
        let mut x = steady_point(&nlp, 63.0);
        for k in 0..48 {
            x[nlp.power_index(0, k)] = 3e7 + 1e5 * k as f64;
            x[nlp.power_index(1, k)] = 6e7;
            x[nlp.volume_index(0, k)] = 4e5 + 1e3 * k as f64;
        }
        let err = fd_check(&ConstraintEvaluator(&nlp), &x, 0.5);
        assert!(err <= 1e-6, "{err}");

        let lambda: Vec<f64> = (0..nlp.num_constraints())
            .map(|i| 1.0 + 0.1 * (i % 7) as f64)
            .collect();
        let lagrangian = LagrangianGradientEvaluator {
            nlp: &nlp,
            lambda,
            mu: 0.0,
        };
        let err = fd_check(&lagrangian, &x, 0.5);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn blend_endpoints_match_pure_models() {
        let spec = CascadeSpec::example();
        let nlp = assemble_nlp(&spec).unwrap();
        let mut x = steady_point(&nlp, 70.0);
        x[nlp.index(Family::HeadDifference, 0, 3)] = 91.0;
        x[nlp.index(Family::AliasRelease, 0, 3)] = 71.0;
        x[nlp.power_index(0, 3)] = 5e7;
        let row = 3 * 10;
        let g = GRAVITY * WATER_DENSITY;
        let c0 = constraint_values(&nlp, &x, 0.0)[row];
        let c1 = constraint_values(&nlp, &x, 1.0)[row];
        assert_eq!(c0, (5e7 - g * 0.85 * 70.0 * 80.0) / POWER_SCALE);
        assert_eq!(c1, (5e7 - g * (0.85 * 71.0 * 91.0)) / POWER_SCALE);
    }

    #[test]
    fn spec_json_round_trip_rejects_unknown_keys() {
        let spec = CascadeSpec::example();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(CascadeSpec::from_json(&text).unwrap(), spec);
        let bad = text.replacen("\"grid\":{", "\"grid\":{\"bogus\":1,", 1);
        assert!(CascadeSpec::from_json(&bad).is_err());
    }
}
