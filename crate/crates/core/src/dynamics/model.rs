//! Model description for planar articulated systems and its validated,
//! simulation-ready form.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::contact::ContactParams;
use super::kinematics::Kinematics;
use super::DynamicsError;

/// How the root of the kinematic tree is attached to the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    /// Root joints hang from the world origin.
    Fixed,
    /// Link 0 is a free planar body with coordinates (x, z, θ).
    Planar,
}

impl BaseKind {
    pub fn dofs(self) -> usize {
        match self {
            BaseKind::Fixed => 0,
            BaseKind::Planar => 3,
        }
    }
}

/// A rigid link. Jointed links extend from their joint along local −z with the
/// centre of mass at mid-length; the planar base body has its centre of mass at
/// its frame origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    /// kg
    pub mass: f64,
    /// Rotational inertia about the centre of mass, kg·m².
    pub inertia: f64,
    /// m
    pub length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// Gains of the embedded joint-space PD controller. A joint with gains is
/// actuated and receives one entry of the control vector (its position target).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
    pub torque_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    /// Parent link index. `None` attaches to the world (fixed base) or to the
    /// base body (planar base).
    pub parent: Option<usize>,
    /// Joint location in the parent frame, m.
    pub anchor: [f64; 2],
    /// Slide direction in the parent frame (prismatic joints only).
    pub axis: [f64; 2],
    /// Position limits used to clamp targets, rad or m.
    pub limits: [f64; 2],
    /// Viscous joint damping, N·m·s/rad (or N·s/m).
    pub damping: f64,
    pub pd: Option<PdGains>,
}

/// A point rigidly attached to a link, in that link's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSpec {
    pub name: String,
    pub link: usize,
    pub offset: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub base: BaseKind,
    pub links: Vec<LinkSpec>,
    /// Joint `j` drives link `j + base.dofs().min(1)`; parents precede children.
    pub joints: Vec<JointSpec>,
    pub contact_points: Vec<PointSpec>,
    /// Reference point tracked by position tasks (torso top for legged models).
    pub head: Option<PointSpec>,
    pub contact: ContactParams,
    /// Magnitude of gravitational acceleration along −z, m/s².
    pub gravity: f64,
    /// Default configuration (length nq).
    pub home: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {reason}")]
pub struct ModelError {
    pub field: String,
    pub reason: String,
}

impl ModelError {
    pub(crate) fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl ModelSpec {
    /// Number of links that have no joint (the planar base body).
    pub fn root_links(&self) -> usize {
        match self.base {
            BaseKind::Fixed => 0,
            BaseKind::Planar => 1,
        }
    }

    pub fn nq(&self) -> usize {
        self.base.dofs() + self.joints.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |field: String, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(ModelError::new(field, format!("must be > 0 (got {value})")))
            }
        };
        let non_negative = |field: String, value: f64| {
            if value.is_finite() && value >= 0.0 {
                Ok(())
            } else {
                Err(ModelError::new(
                    field,
                    format!("must be >= 0 (got {value})"),
                ))
            }
        };

        if self.name.trim().is_empty() {
            return Err(ModelError::new("name", "must not be empty"));
        }
        if self.links.is_empty() {
            return Err(ModelError::new("links", "at least one link is required"));
        }
        for (i, link) in self.links.iter().enumerate() {
            positive(format!("links[{i}].mass"), link.mass)?;
            positive(format!("links[{i}].inertia"), link.inertia)?;
            non_negative(format!("links[{i}].length"), link.length)?;
        }
        let roots = self.root_links();
        if self.links.len() != self.joints.len() + roots {
            return Err(ModelError::new(
                "joints",
                format!(
                    "expected {} joints for {} links with a {:?} base, found {}",
                    self.links.len() - roots.min(self.links.len()),
                    self.links.len(),
                    self.base,
                    self.joints.len()
                ),
            ));
        }
        for (j, joint) in self.joints.iter().enumerate() {
            let child = j + roots;
            if let Some(parent) = joint.parent {
                if parent >= child {
                    return Err(ModelError::new(
                        format!("joints[{j}].parent"),
                        format!("parent link {parent} must precede child link {child}"),
                    ));
                }
            }
            if joint.kind == JointKind::Prismatic {
                let norm = joint.axis[0].hypot(joint.axis[1]);
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(ModelError::new(
                        format!("joints[{j}].axis"),
                        format!("prismatic axis must be unit length (got norm {norm})"),
                    ));
                }
            }
            if !(joint.limits[0] < joint.limits[1]) {
                return Err(ModelError::new(
                    format!("joints[{j}].limits"),
                    "lower limit must be below upper limit",
                ));
            }
            non_negative(format!("joints[{j}].damping"), joint.damping)?;
            if let Some(pd) = &joint.pd {
                non_negative(format!("joints[{j}].pd.kp"), pd.kp)?;
                non_negative(format!("joints[{j}].pd.kd"), pd.kd)?;
                positive(format!("joints[{j}].pd.torque_limit"), pd.torque_limit)?;
            }
        }
        for (c, point) in self
            .contact_points
            .iter()
            .chain(self.head.iter())
            .enumerate()
        {
            if point.link >= self.links.len() {
                return Err(ModelError::new(
                    format!("contact_points[{c}].link"),
                    format!("link {} does not exist", point.link),
                ));
            }
        }
        if self.base == BaseKind::Planar && self.contact_points.is_empty() {
            return Err(ModelError::new(
                "contact_points",
                "legged (planar-base) models need at least one contact point",
            ));
        }
        self.contact.validate()?;
        positive("gravity".into(), self.gravity)?;
        if self.home.len() != self.nq() {
            return Err(ModelError::new(
                "home",
                format!("expected {} entries, found {}", self.nq(), self.home.len()),
            ));
        }
        if self.home.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::new("home", "entries must be finite"));
        }
        Ok(())
    }
}

/// Configuration and velocity of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl State {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        Self { q, v }
    }

    /// Stacked `[q; v]` vector used by the planner.
    pub fn to_vector(&self) -> DVector<f64> {
        let nq = self.q.len();
        DVector::from_fn(nq + self.v.len(), |i, _| {
            if i < nq {
                self.q[i]
            } else {
                self.v[i - nq]
            }
        })
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        Self {
            q: x.rows(0, n).into_owned(),
            v: x.rows(n, n).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// A validated [`ModelSpec`] with cached simulation constants. Immutable and
/// shareable across threads.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    actuated: Vec<usize>,
    max_substep: f64,
}

/// Margin on the explicit oscillator bound `ω·h < 2`.
const SPRING_SUBSTEP_FACTOR: f64 = 0.5;
/// Margin on the explicit damper bound `c·h/m < 2`.
const DAMPER_SUBSTEP_FACTOR: f64 = 1.0;

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let actuated = spec
            .joints
            .iter()
            .enumerate()
            .filter_map(|(j, joint)| joint.pd.map(|_| j))
            .collect();
        let mut model = Self {
            spec,
            actuated,
            max_substep: f64::INFINITY,
        };
        model.max_substep = model.stable_substep().map_err(|e| {
            ModelError::new("home", format!("cannot evaluate home configuration: {e}"))
        })?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn nq(&self) -> usize {
        self.spec.nq()
    }

    pub fn nv(&self) -> usize {
        self.spec.nq()
    }

    pub fn nx(&self) -> usize {
        2 * self.nq()
    }

    pub fn nu(&self) -> usize {
        self.actuated.len()
    }

    pub fn base_dofs(&self) -> usize {
        self.spec.base.dofs()
    }

    /// Indices (into `joints`) of the actuated joints, in control-vector order.
    pub fn actuated_joints(&self) -> &[usize] {
        &self.actuated
    }

    /// Largest integration substep the explicit integrator accepts for this
    /// model. `step` splits longer intervals into equal substeps no longer than
    /// this, so any `dt` is admissible.
    pub fn max_substep(&self) -> f64 {
        self.max_substep
    }

    /// Number of substeps `step` uses for an interval of `dt` seconds.
    pub fn substeps(&self, dt: f64) -> usize {
        if self.max_substep.is_finite() {
            ((dt / self.max_substep) - 1e-9).ceil().max(1.0) as usize
        } else {
            1
        }
    }

    pub fn home_state(&self) -> State {
        State::new(
            DVector::from_vec(self.spec.home.clone()),
            DVector::zeros(self.nv()),
        )
    }

    /// Home joint positions of the actuated joints: the control that holds
    /// the home posture.
    pub fn home_control(&self) -> DVector<f64> {
        let base = self.base_dofs();
        DVector::from_iterator(
            self.nu(),
            self.actuated.iter().map(|&j| self.spec.home[base + j]),
        )
    }

    /// Returns a copy of this model with different contact parameters.
    pub fn with_contact(&self, contact: ContactParams) -> Result<Self, ModelError> {
        let mut spec = self.spec.clone();
        spec.contact = contact;
        Self::new(spec)
    }

    /// Bounds the substep from the stiffest springs and dampers, using
    /// effective masses at the home configuration.
    fn stable_substep(&self) -> Result<f64, DynamicsError> {
        let home = self.home_state();
        let kin = Kinematics::compute(self, &home.q, &home.v);
        let mass = kin.mass_matrix(self);
        let inv = mass
            .cholesky()
            .ok_or(DynamicsError::SingularMassMatrix)?
            .inverse();
        let mut h = f64::INFINITY;
        let base = self.base_dofs();
        for (j, joint) in self.spec.joints.iter().enumerate() {
            let idx = base + j;
            let inertia = 1.0 / inv[(idx, idx)];
            let (kp, kd) = joint.pd.map_or((0.0, 0.0), |pd| (pd.kp, pd.kd));
            if kp > 0.0 {
                h = h.min(SPRING_SUBSTEP_FACTOR * (inertia / kp).sqrt());
            }
            let c = kd + joint.damping;
            if c > 0.0 {
                h = h.min(DAMPER_SUBSTEP_FACTOR * inertia / c);
            }
        }
        let contact = &self.spec.contact;
        for point in &self.spec.contact_points {
            let jac = kin.point_jacobian(self, point.link, point.offset);
            for (row, is_normal) in [(0usize, false), (1usize, true)] {
                let r = jac.row(row);
                let inv_mass = (r * &inv * r.transpose())[(0, 0)];
                if inv_mass <= 0.0 {
                    continue;
                }
                let m = 1.0 / inv_mass;
                if is_normal {
                    h = h.min(SPRING_SUBSTEP_FACTOR * (m / contact.normal_stiffness).sqrt());
                    h = h.min(DAMPER_SUBSTEP_FACTOR * m / contact.normal_damping);
                } else {
                    h = h.min(DAMPER_SUBSTEP_FACTOR * m / contact.tangential_gain());
                }
            }
        }
        Ok(h)
    }
}
