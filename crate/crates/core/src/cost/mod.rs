//! Weighted sum-of-norms cost `l = Σ wᵢ nᵢ(rᵢ)` over the residual library,
//! with analytic norm derivatives and Gauss-Newton Hessians.

mod builtin;
mod residuals;
pub mod task;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::derivs::{Linearization, ResidualJacobians, ResidualStage};
use crate::dynamics::{Capabilities, Dynamics, DynamicsError, Features};

pub use builtin::{builtin_task, builtin_tasks, BUILTIN_TASK_NAMES};
pub use residuals::{capture_point, stance_midpoint, swing_height, ResidualKind, STANCE_FORCE};
pub use task::{parse_task, task_to_toml, TaskSpec};

/// Default smoothing constant of [`NormKind::SmoothL2`].
pub const SMOOTH_L2_C: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `½‖r‖²`
    #[default]
    Quadratic,
    /// `√(‖r‖² + c²) − c`
    SmoothL2 { c: f64 },
}

impl NormKind {
    pub fn smooth_l2() -> Self {
        Self::SmoothL2 { c: SMOOTH_L2_C }
    }

    pub fn value(&self, r: &[f64]) -> f64 {
        let sq: f64 = r.iter().map(|v| v * v).sum();
        match *self {
            Self::Quadratic => 0.5 * sq,
            Self::SmoothL2 { c } => (sq + c * c).sqrt() - c,
        }
    }

    /// `(∂n/∂r, ∂²n/∂r²)`
    pub fn derivatives(&self, r: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let r = DVector::from_column_slice(r);
        match *self {
            Self::Quadratic => {
                let n = r.len();
                (r, DMatrix::identity(n, n))
            }
            Self::SmoothL2 { c } => {
                let s = (r.norm_squared() + c * c).sqrt();
                let h = DMatrix::identity(r.len(), r.len()) / s - &r * r.transpose() / (s * s * s);
                (r / s, h)
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            Self::Quadratic => Ok(()),
            Self::SmoothL2 { c } if c.is_finite() && c > 0.0 => Ok(()),
            Self::SmoothL2 { c } => Err(format!("smooth_l2 constant must be > 0 (got {c})")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualTerm {
    pub name: String,
    pub weight: f64,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(flatten)]
    pub kind: ResidualKind,
}

impl ResidualTerm {
    pub fn new(name: impl Into<String>, weight: f64, norm: NormKind, kind: ResidualKind) -> Self {
        Self {
            name: name.into(),
            weight,
            norm,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("cost has no terms")]
    Empty,
    #[error("term '{term}': {reason}")]
    InvalidTerm { term: String, reason: String },
    #[error("duplicate term name '{0}'")]
    DuplicateName(String),
    #[error("terminal term '{0}' reads the control")]
    TerminalUsesControl(String),
    #[error("unknown residual term '{0}'")]
    UnknownTerm(String),
    #[error("cost is bound to model '{expected}', not '{got}'")]
    ModelMismatch { expected: String, got: String },
}

/// Running and terminal terms bound to one model. `version` increases with
/// every edit so solutions can be traced to the cost that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub model: String,
    #[serde(default)]
    pub version: u64,
    #[serde(default)]
    pub running: Vec<ResidualTerm>,
    #[serde(default)]
    pub terminal: Vec<ResidualTerm>,
}

/// One term's share of a trajectory's cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCost {
    pub name: String,
    pub terminal: bool,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub terms: Vec<TermCost>,
}

impl CostBreakdown {
    pub fn term(&self, name: &str) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.name == name)
            .map(|t| t.value)
            .sum()
    }
}

impl CostSpec {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            version: 0,
            running: Vec::new(),
            terminal: Vec::new(),
        }
    }

    pub fn with_running(mut self, term: ResidualTerm) -> Self {
        self.running.push(term);
        self
    }

    pub fn with_terminal(mut self, term: ResidualTerm) -> Self {
        self.terminal.push(term);
        self
    }

    pub fn validate(&self, caps: &Capabilities) -> Result<(), CostError> {
        if self.running.is_empty() && self.terminal.is_empty() {
            return Err(CostError::Empty);
        }
        for (terms, terminal) in [(&self.running, false), (&self.terminal, true)] {
            for (i, term) in terms.iter().enumerate() {
                if terms[..i].iter().any(|t| t.name == term.name) {
                    return Err(CostError::DuplicateName(term.name.clone()));
                }
                let invalid = |reason: String| CostError::InvalidTerm {
                    term: term.name.clone(),
                    reason,
                };
                if !(term.weight.is_finite() && term.weight >= 0.0) {
                    return Err(invalid(format!(
                        "weight must be >= 0 (got {})",
                        term.weight
                    )));
                }
                term.norm.validate().map_err(invalid)?;
                term.kind.validate(caps).map_err(invalid)?;
                if terminal && term.kind.uses_control() {
                    return Err(CostError::TerminalUsesControl(term.name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Validates against a model by name and capabilities.
    pub fn validate_for(&self, model: &str, caps: &Capabilities) -> Result<(), CostError> {
        if self.model != model {
            return Err(CostError::ModelMismatch {
                expected: self.model.clone(),
                got: model.to_string(),
            });
        }
        self.validate(caps)
    }

    pub fn terms(&self, stage: ResidualStage) -> &[ResidualTerm] {
        match stage {
            ResidualStage::Running => &self.running,
            ResidualStage::Terminal => &self.terminal,
        }
    }

    /// Stacked residuals of every term of `stage`, in declaration order.
    pub fn residuals(&self, f: &Features, time: f64, stage: ResidualStage) -> DVector<f64> {
        let mut out = Vec::new();
        for term in self.terms(stage) {
            term.kind.evaluate(f, time, &mut out);
        }
        DVector::from_vec(out)
    }

    fn slices(&self, stage: ResidualStage, caps: &Capabilities) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.terms(stage)
            .iter()
            .map(|t| {
                let d = t.kind.dim(caps);
                start += d;
                start - d..start
            })
            .collect()
    }

    /// Per-term weighted norms at one knot.
    pub fn knot_costs(&self, f: &Features, time: f64, stage: ResidualStage) -> Vec<f64> {
        let mut buf = Vec::new();
        self.terms(stage)
            .iter()
            .map(|t| {
                buf.clear();
                t.kind.evaluate(f, time, &mut buf);
                t.weight * t.norm.value(&buf)
            })
            .collect()
    }

    /// Sets the weight of every term called `name`. Bumps the version.
    pub fn set_weight(&mut self, name: &str, weight: f64) -> Result<(), CostError> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(CostError::InvalidTerm {
                term: name.to_string(),
                reason: format!("weight must be >= 0 (got {weight})"),
            });
        }
        let mut found = false;
        for t in self.running.iter_mut().chain(self.terminal.iter_mut()) {
            if t.name == name {
                t.weight = weight;
                found = true;
            }
        }
        if !found {
            return Err(CostError::UnknownTerm(name.to_string()));
        }
        self.version += 1;
        Ok(())
    }

    /// Moves every position goal to `goal`. Returns whether any term changed.
    pub fn set_goal(&mut self, goal: [f64; 2]) -> bool {
        let mut found = false;
        for t in self.running.iter_mut().chain(self.terminal.iter_mut()) {
            if let ResidualKind::Position { goal: g } = &mut t.kind {
                *g = goal;
                found = true;
            }
        }
        if found {
            self.version += 1;
        }
        found
    }

    /// Sets the period of every gait term. Returns whether any term changed.
    pub fn set_gait_period(&mut self, value: f64) -> bool {
        let mut found = false;
        for t in self.running.iter_mut().chain(self.terminal.iter_mut()) {
            if let ResidualKind::Gait { period, .. } = &mut t.kind {
                *period = value;
                found = true;
            }
        }
        if found {
            self.version += 1;
        }
        found
    }
}

/// Total cost of a state/control trajectory starting at absolute time `t0`,
/// with a per-term breakdown. The states are taken as given, not re-rolled.
pub fn eval_cost(
    spec: &CostSpec,
    dynamics: &dyn Dynamics,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    t0: f64,
    dt: f64,
) -> Result<CostBreakdown, DynamicsError> {
    assert_eq!(
        states.len(),
        controls.len() + 1,
        "need T+1 states for T controls"
    );
    let mut running = vec![0.0; spec.running.len()];
    for (t, (x, u)) in states.iter().zip(controls).enumerate() {
        let f = dynamics.features(x, Some(u))?;
        let costs = spec.knot_costs(&f, t0 + t as f64 * dt, ResidualStage::Running);
        running.iter_mut().zip(costs).for_each(|(acc, c)| *acc += c);
    }
    let f = dynamics.features(&states[controls.len()], None)?;
    let terminal = spec.knot_costs(&f, t0 + controls.len() as f64 * dt, ResidualStage::Terminal);
    let mut terms = Vec::with_capacity(running.len() + terminal.len());
    for (t, value) in spec.running.iter().zip(running) {
        terms.push(TermCost {
            name: t.name.clone(),
            terminal: false,
            value,
        });
    }
    for (t, value) in spec.terminal.iter().zip(terminal) {
        terms.push(TermCost {
            name: t.name.clone(),
            terminal: true,
            value,
        });
    }
    Ok(CostBreakdown {
        total: terms.iter().map(|t| t.value).sum(),
        terms,
    })
}

/// Gradients and Gauss-Newton Hessians of the cost at every knot. Index `T`
/// of `lx`/`lxx` holds the terminal cost; the control entries have `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostDerivatives {
    pub lx: Vec<DVector<f64>>,
    pub lu: Vec<DVector<f64>>,
    pub lxx: Vec<DMatrix<f64>>,
    pub luu: Vec<DMatrix<f64>>,
    pub lux: Vec<DMatrix<f64>>,
}

struct KnotDerivatives {
    lx: DVector<f64>,
    lu: DVector<f64>,
    lxx: DMatrix<f64>,
    luu: DMatrix<f64>,
    lux: DMatrix<f64>,
}

fn knot_derivatives(
    terms: &[ResidualTerm],
    slices: &[std::ops::Range<usize>],
    jac: &ResidualJacobians,
) -> KnotDerivatives {
    let (nx, nu) = (jac.rx.ncols(), jac.ru.ncols());
    let mut d = KnotDerivatives {
        lx: DVector::zeros(nx),
        lu: DVector::zeros(nu),
        lxx: DMatrix::zeros(nx, nx),
        luu: DMatrix::zeros(nu, nu),
        lux: DMatrix::zeros(nu, nx),
    };
    for (term, range) in terms.iter().zip(slices) {
        if term.weight == 0.0 || range.is_empty() {
            continue;
        }
        let r = jac.r.rows(range.start, range.len());
        let (g, h) = term.norm.derivatives(r.as_slice());
        let jx = jac.rx.rows(range.start, range.len());
        let ju = jac.ru.rows(range.start, range.len());
        let w = term.weight;
        let hjx = &h * jx;
        d.lx += jx.transpose() * &g * w;
        d.lxx += jx.transpose() * &hjx * w;
        if nu > 0 {
            let hju = &h * ju;
            d.lu += ju.transpose() * &g * w;
            d.luu += ju.transpose() * hju * w;
            d.lux += ju.transpose() * hjx * w;
        }
    }
    d.lxx = (&d.lxx + d.lxx.transpose()) * 0.5;
    d.luu = (&d.luu + d.luu.transpose()) * 0.5;
    d
}

/// Assembles cost derivatives from residual Jacobians produced by
/// [`crate::derivs::linearize_with_residuals`] with `spec.residuals`.
pub fn cost_derivatives(
    spec: &CostSpec,
    caps: &Capabilities,
    lin: &Linearization,
) -> CostDerivatives {
    let horizon = lin.running.len();
    let running = spec.slices(ResidualStage::Running, caps);
    let terminal = spec.slices(ResidualStage::Terminal, caps);
    let mut out = CostDerivatives {
        lx: Vec::with_capacity(horizon + 1),
        lu: Vec::with_capacity(horizon),
        lxx: Vec::with_capacity(horizon + 1),
        luu: Vec::with_capacity(horizon),
        lux: Vec::with_capacity(horizon),
    };
    for jac in &lin.running {
        let d = knot_derivatives(&spec.running, &running, jac);
        out.lx.push(d.lx);
        out.lu.push(d.lu);
        out.lxx.push(d.lxx);
        out.luu.push(d.luu);
        out.lux.push(d.lux);
    }
    let d = knot_derivatives(&spec.terminal, &terminal, &lin.terminal);
    out.lx.push(d.lx);
    out.lxx.push(d.lxx);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_norm_arithmetic() {
        assert_eq!(NormKind::Quadratic.value(&[3.0]), 4.5);
        let (g, h) = NormKind::Quadratic.derivatives(&[3.0, -1.0]);
        assert_eq!(g.as_slice(), &[3.0, -1.0]);
        assert_eq!(h, DMatrix::identity(2, 2));
    }

    #[test]
    fn smooth_l2_at_origin() {
        let n = NormKind::smooth_l2();
        assert_eq!(n.value(&[0.0, 0.0]), 0.0);
        let (g, h) = n.derivatives(&[0.0, 0.0]);
        assert_eq!(g.amax(), 0.0);
        assert!((h - DMatrix::identity(2, 2) / SMOOTH_L2_C).amax() < 1e-9);
    }

    #[test]
    fn smooth_l2_grows_linearly_far_out() {
        let n = NormKind::smooth_l2();
        let big = n.value(&[100.0]);
        assert!((big - (100.0 - SMOOTH_L2_C)).abs() < 1e-3);
    }

    #[test]
    fn bad_smoothing_constant_is_rejected() {
        assert!(NormKind::SmoothL2 { c: 0.0 }.validate().is_err());
        assert!(NormKind::SmoothL2 { c: f64::NAN }.validate().is_err());
    }
}
