//! Smooth soft-contact forward dynamics for planar articulated systems.
//!
//! Actions are joint position targets: an embedded PD controller turns them
//! into joint torques inside every integration substep, so the planner never
//! sees raw torques.

mod builtin;
mod contact;
pub mod file;
mod kinematics;
mod linear;
mod model;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use builtin::{builtin_model, builtin_models, BUILTIN_MODEL_NAMES};
pub use contact::{smooth_positive, smooth_ramp, smooth_step, ContactForce, ContactParams};
pub use linear::LinearSystem;
pub use model::{
    BaseKind, JointKind, JointSpec, LinkSpec, Model, ModelError, ModelSpec, PdGains, PointSpec,
    State,
};

use kinematics::Kinematics;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,
    #[error("integration produced a non-finite state")]
    NonFinite,
    #[error("time step must be positive and finite (got {0})")]
    InvalidTimestep(f64),
    #[error("link index {0} out of range")]
    UnknownLink(usize),
}

/// Which residual features a dynamics backend can supply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub nx: usize,
    pub nu: usize,
    pub floating_base: bool,
    pub n_joints: usize,
    pub n_actuated: usize,
    pub n_feet: usize,
    pub has_head: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseFeatures {
    /// x, z, θ
    pub pose: [f64; 3],
    pub velocity: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootFeatures {
    pub position: [f64; 2],
    pub normal_force: f64,
}

/// Quantities residuals are computed from, evaluated at one `(x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub state: DVector<f64>,
    pub control: Option<DVector<f64>>,
    pub base: Option<BaseFeatures>,
    pub com: [f64; 2],
    pub com_velocity: [f64; 2],
    pub head: Option<[f64; 2]>,
    pub feet: Vec<FootFeatures>,
    pub joint_positions: DVector<f64>,
    pub joint_velocities: DVector<f64>,
    /// Embedded PD torques of the actuated joints (requires a control).
    pub actuator_torques: Option<DVector<f64>>,
    pub gravity: f64,
}

/// Discrete-time dynamics `x' = f(x, u)` as seen by the planner.
pub trait Dynamics: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn nx(&self) -> usize {
        self.capabilities().nx
    }

    fn nu(&self) -> usize {
        self.capabilities().nu
    }

    fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> Result<DVector<f64>, DynamicsError>;

    fn features(
        &self,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> Result<Features, DynamicsError>;

    /// Box bounds on the control, if any. Rollouts clamp into them.
    fn control_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }

    /// Control used to seed a planner with no previous solution.
    fn default_control(&self) -> DVector<f64> {
        DVector::zeros(self.nu())
    }

    /// One evaluation producing both the successor state and the residual
    /// features at `(x, u)`.
    fn evaluate(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> Result<(DVector<f64>, Features), DynamicsError> {
        let features = self.features(x, Some(u))?;
        Ok((self.step(x, u, dt)?, features))
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Embedded PD torques of the actuated joints:
/// `τ = clamp(kp·(u − q) − kd·v, ±limit)` with `u` clamped to the joint limits.
pub fn pd_torque(
    model: &Model,
    state: &State,
    control: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    check_dim("configuration", model.nq(), state.q.len())?;
    check_dim("velocity", model.nv(), state.v.len())?;
    check_dim("control", model.nu(), control.len())?;
    Ok(pd_torque_unchecked(model, &state.q, &state.v, control))
}

fn pd_torque_unchecked(
    model: &Model,
    q: &DVector<f64>,
    v: &DVector<f64>,
    control: &DVector<f64>,
) -> DVector<f64> {
    let base = model.base_dofs();
    let joints = &model.spec().joints;
    DVector::from_iterator(
        model.nu(),
        model.actuated_joints().iter().enumerate().map(|(i, &j)| {
            let joint = &joints[j];
            let pd = joint.pd.expect("actuated joint has gains");
            let target = control[i].clamp(joint.limits[0], joint.limits[1]);
            let coord = base + j;
            let tau = pd.kp * (target - q[coord]) - pd.kd * v[coord];
            tau.clamp(-pd.torque_limit, pd.torque_limit)
        }),
    )
}

fn contact_forces_from(model: &Model, kin: &Kinematics) -> Vec<ContactForce> {
    let params = &model.spec().contact;
    model
        .spec()
        .contact_points
        .iter()
        .map(|point| {
            let position = kin.point_position(point.link, point.offset);
            let vel = kin.point_velocity(point.link, point.offset);
            let normal = params.normal_force(position[1], vel[1]);
            let tangential = params.tangential_force(normal, vel[0]);
            ContactForce {
                position,
                distance: position[1],
                normal,
                tangential,
            }
        })
        .collect()
}

/// Per-contact-point world-frame forces against the ground plane.
pub fn contact_force(model: &Model, state: &State) -> Result<Vec<ContactForce>, DynamicsError> {
    check_dim("configuration", model.nq(), state.q.len())?;
    check_dim("velocity", model.nv(), state.v.len())?;
    let kin = Kinematics::compute(model, &state.q, &state.v);
    Ok(contact_forces_from(model, &kin))
}

fn acceleration(
    model: &Model,
    kin: &Kinematics,
    q: &DVector<f64>,
    v: &DVector<f64>,
    control: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    let base = model.base_dofs();
    let mut tau = -kin.bias_forces(model);
    for (j, joint) in model.spec().joints.iter().enumerate() {
        tau[base + j] -= joint.damping * v[base + j];
    }
    let pd = pd_torque_unchecked(model, q, v, control);
    for (i, &j) in model.actuated_joints().iter().enumerate() {
        tau[base + j] += pd[i];
    }
    for (point, force) in model
        .spec()
        .contact_points
        .iter()
        .zip(contact_forces_from(model, kin))
    {
        if force.normal != 0.0 || force.tangential != 0.0 {
            kin.add_point_force(
                point.link,
                point.offset,
                [force.tangential, force.normal],
                &mut tau,
            );
        }
    }
    let chol = kin
        .mass_matrix(model)
        .cholesky()
        .ok_or(DynamicsError::SingularMassMatrix)?;
    Ok(chol.solve(&tau))
}

/// Advances the state by `dt` with semi-implicit Euler
/// (`v += h·M⁻¹(τ_pd + τ_contact + τ_gravity + τ_damping)`, `q += h·v`),
/// split into [`Model::substeps`] equal substeps of length `h`.
pub fn step(
    model: &Model,
    state: &State,
    control: &DVector<f64>,
    dt: f64,
) -> Result<State, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidTimestep(dt));
    }
    check_dim("configuration", model.nq(), state.q.len())?;
    check_dim("velocity", model.nv(), state.v.len())?;
    check_dim("control", model.nu(), control.len())?;
    if !state.is_finite() || control.iter().any(|u| !u.is_finite()) {
        return Err(DynamicsError::NonFinite);
    }
    let n = model.substeps(dt);
    let h = dt / n as f64;
    let mut q = state.q.clone();
    let mut v = state.v.clone();
    for _ in 0..n {
        let kin = Kinematics::compute(model, &q, &v);
        let acc = acceleration(model, &kin, &q, &v, control)?;
        v.axpy(h, &acc, 1.0);
        q.axpy(h, &v, 1.0);
    }
    let next = State::new(q, v);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(DynamicsError::NonFinite)
    }
}

/// Applies a world-frame impulse (N·s) at the centre of mass of `link`:
/// `Δv = M⁻¹ Jᵀ p`.
pub fn apply_impulse(
    model: &Model,
    state: &State,
    link: usize,
    impulse: [f64; 2],
) -> Result<State, DynamicsError> {
    if link >= model.spec().links.len() {
        return Err(DynamicsError::UnknownLink(link));
    }
    let kin = Kinematics::compute(model, &state.q, &state.v);
    let mut gen = DVector::zeros(model.nv());
    kin.add_point_force(link, Kinematics::com_offset(model, link), impulse, &mut gen);
    let chol = kin
        .mass_matrix(model)
        .cholesky()
        .ok_or(DynamicsError::SingularMassMatrix)?;
    let dv = chol.solve(&gen);
    Ok(State::new(state.q.clone(), &state.v + dv))
}

/// Total mechanical (kinetic + gravitational) energy.
pub fn mechanical_energy(model: &Model, state: &State) -> f64 {
    Kinematics::compute(model, &state.q, &state.v).energy(model)
}

/// Joint-space mass matrix at a configuration.
pub fn mass_matrix(model: &Model, q: &DVector<f64>) -> DMatrix<f64> {
    let v = DVector::zeros(model.nv());
    Kinematics::compute(model, q, &v).mass_matrix(model)
}

/// World positions of every link origin and the distal end of every link,
/// used by renderers.
pub fn link_segments(model: &Model, state: &State) -> Vec<([f64; 2], [f64; 2])> {
    let kin = Kinematics::compute(model, &state.q, &state.v);
    let roots = model.spec().root_links();
    model
        .spec()
        .links
        .iter()
        .enumerate()
        .map(|(i, link)| {
            if i < roots {
                let half = 0.5 * link.length;
                (
                    kin.point_position(i, [0.0, -half]),
                    kin.point_position(i, [0.0, half]),
                )
            } else {
                (
                    kin.point_position(i, [0.0, 0.0]),
                    kin.point_position(i, [0.0, -link.length]),
                )
            }
        })
        .collect()
}

impl Model {
    fn features_of(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        kin: &Kinematics,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> Features {
        let base_dofs = self.base_dofs();
        let base = (base_dofs == 3).then(|| BaseFeatures {
            pose: [q[0], q[1], q[2]],
            velocity: [v[0], v[1], v[2]],
        });
        let (com, com_velocity) = kin.center_of_mass(self);
        let head = self
            .spec()
            .head
            .as_ref()
            .map(|p| kin.point_position(p.link, p.offset));
        let feet = contact_forces_from(self, kin)
            .into_iter()
            .map(|f| FootFeatures {
                position: f.position,
                normal_force: f.normal,
            })
            .collect();
        let nj = self.spec().joints.len();
        Features {
            state: x.clone(),
            control: u.cloned(),
            base,
            com,
            com_velocity,
            head,
            feet,
            joint_positions: q.rows(base_dofs, nj).into_owned(),
            joint_velocities: v.rows(base_dofs, nj).into_owned(),
            actuator_torques: u.map(|u| pd_torque_unchecked(self, q, v, u)),
            gravity: self.spec().gravity,
        }
    }
}

impl Dynamics for Model {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            nx: self.nx(),
            nu: self.nu(),
            floating_base: self.base_dofs() == 3,
            n_joints: self.spec().joints.len(),
            n_actuated: self.nu(),
            n_feet: self.spec().contact_points.len(),
            has_head: self.spec().head.is_some(),
        }
    }

    fn control_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let joints = &self.spec().joints;
        let limits = |k: usize| {
            DVector::from_iterator(
                self.nu(),
                self.actuated_joints().iter().map(|&j| joints[j].limits[k]),
            )
        };
        Some((limits(0), limits(1)))
    }

    fn default_control(&self) -> DVector<f64> {
        self.home_control()
    }

    fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> Result<DVector<f64>, DynamicsError> {
        check_dim("state", self.nx(), x.len())?;
        let next = step(self, &State::from_vector(x), u, dt)?;
        Ok(next.to_vector())
    }

    fn features(
        &self,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> Result<Features, DynamicsError> {
        check_dim("state", self.nx(), x.len())?;
        if let Some(u) = u {
            check_dim("control", self.nu(), u.len())?;
        }
        let s = State::from_vector(x);
        let kin = Kinematics::compute(self, &s.q, &s.v);
        Ok(self.features_of(&s.q, &s.v, &kin, x, u))
    }
}
