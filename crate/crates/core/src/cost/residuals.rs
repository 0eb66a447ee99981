//! Residual library. Each kind maps [`Features`] at one knot to a residual
//! vector; planar analogs of the usual locomotion task terms plus a generic
//! linear term.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Capabilities, Features};

/// A foot counts as stance above this normal force, N.
pub const STANCE_FORCE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualKind {
    /// Base pitch θ.
    Upright,
    /// Base height above the mean foot height, minus `target` (m).
    Height { target: f64 },
    /// Head position minus `goal` (m).
    Position { goal: [f64; 2] },
    /// Foot heights minus a cosine swing bump. `offsets` holds each foot's
    /// phase offset as a fraction of `period`; stance occupies the first
    /// `duty` fraction of every cycle.
    Gait {
        period: f64,
        duty: f64,
        lift: f64,
        offsets: Vec<f64>,
    },
    /// Capture point minus the midpoint of the stance feet.
    Balance,
    /// Embedded PD torques.
    Effort,
    /// Joint positions minus `target`.
    Posture { target: Vec<f64> },
    /// Base pitch rate.
    Angular,
    /// Joint velocities.
    JointVelocity,
    /// `C x + D u − offset`, with `C` and `D` given row by row. `d` may be
    /// empty for a state-only term.
    Linear {
        c: Vec<Vec<f64>>,
        #[serde(default)]
        d: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
}

impl ResidualKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Upright => "upright",
            Self::Height { .. } => "height",
            Self::Position { .. } => "position",
            Self::Gait { .. } => "gait",
            Self::Balance => "balance",
            Self::Effort => "effort",
            Self::Posture { .. } => "posture",
            Self::Angular => "angular",
            Self::JointVelocity => "joint_velocity",
            Self::Linear { .. } => "linear",
        }
    }

    /// Whether the residual reads the control.
    pub fn uses_control(&self) -> bool {
        match self {
            Self::Effort => true,
            Self::Linear { d, .. } => d.iter().flatten().any(|&v| v != 0.0),
            _ => false,
        }
    }

    pub fn dim(&self, caps: &Capabilities) -> usize {
        match self {
            Self::Upright | Self::Height { .. } | Self::Balance | Self::Angular => 1,
            Self::Position { .. } => 2,
            Self::Gait { .. } => caps.n_feet,
            Self::Effort => caps.n_actuated,
            Self::Posture { .. } | Self::JointVelocity => caps.n_joints,
            Self::Linear { offset, .. } => offset.len(),
        }
    }

    /// Checks parameters and that the model supplies the features read.
    pub fn validate(&self, caps: &Capabilities) -> Result<(), String> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(format!("model has no {what}"))
            }
        };
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{what} must be finite"))
            }
        };
        match self {
            Self::Upright | Self::Angular => need(caps.floating_base, "floating base"),
            Self::Height { target } => {
                need(caps.floating_base, "floating base")?;
                need(caps.n_feet > 0, "feet")?;
                finite(*target, "target")
            }
            Self::Position { goal } => {
                need(caps.has_head, "head point")?;
                finite(goal[0], "goal")?;
                finite(goal[1], "goal")
            }
            Self::Gait {
                period,
                duty,
                lift,
                offsets,
            } => {
                need(caps.n_feet > 0, "feet")?;
                if !(period.is_finite() && *period > 0.0) {
                    return Err(format!("period must be > 0 (got {period})"));
                }
                if !(*duty > 0.0 && *duty < 1.0) {
                    return Err(format!("duty must lie in (0, 1) (got {duty})"));
                }
                if !(lift.is_finite() && *lift >= 0.0) {
                    return Err(format!("lift must be >= 0 (got {lift})"));
                }
                if offsets.len() != caps.n_feet {
                    return Err(format!(
                        "offsets has {} entries, model has {} feet",
                        offsets.len(),
                        caps.n_feet
                    ));
                }
                offsets.iter().try_for_each(|&o| finite(o, "offset"))
            }
            Self::Balance => {
                need(caps.floating_base, "floating base")?;
                need(caps.n_feet > 0, "feet")
            }
            Self::Effort => need(caps.n_actuated > 0, "actuated joints"),
            Self::Posture { target } => {
                need(caps.n_joints > 0, "joints")?;
                if target.len() != caps.n_joints {
                    return Err(format!(
                        "target has {} entries, model has {} joints",
                        target.len(),
                        caps.n_joints
                    ));
                }
                target.iter().try_for_each(|&t| finite(t, "target"))
            }
            Self::JointVelocity => need(caps.n_joints > 0, "joints"),
            Self::Linear { c, d, offset } => {
                let rows = offset.len();
                if rows == 0 {
                    return Err("offset must be nonempty".into());
                }
                if c.len() != rows || c.iter().any(|r| r.len() != caps.nx) {
                    return Err(format!("c must be {rows}x{}", caps.nx));
                }
                if !d.is_empty() && (d.len() != rows || d.iter().any(|r| r.len() != caps.nu)) {
                    return Err(format!("d must be {rows}x{} or empty", caps.nu));
                }
                c.iter()
                    .chain(d.iter())
                    .flatten()
                    .chain(offset.iter())
                    .try_for_each(|&v| finite(v, "coefficients"))
            }
        }
    }

    /// Appends this residual at absolute `time` to `out`. Callers validate
    /// against the model's capabilities first.
    pub fn evaluate(&self, f: &Features, time: f64, out: &mut Vec<f64>) {
        match self {
            Self::Upright => out.push(base(f).pose[2]),
            Self::Height { target } => {
                let mean = f.feet.iter().map(|p| p.position[1]).sum::<f64>() / f.feet.len() as f64;
                out.push(base(f).pose[1] - mean - target);
            }
            Self::Position { goal } => {
                let head = f.head.expect("validated: head");
                out.extend([head[0] - goal[0], head[1] - goal[1]]);
            }
            Self::Gait {
                period,
                duty,
                lift,
                offsets,
            } => {
                for (foot, &offset) in f.feet.iter().zip(offsets) {
                    let phase = (time / period + offset).rem_euclid(1.0);
                    out.push(foot.position[1] - swing_height(phase, *duty, *lift));
                }
            }
            Self::Balance => out.push(capture_point(f) - stance_midpoint(f)),
            Self::Effort => out.extend(
                f.actuator_torques
                    .as_ref()
                    .expect("validated: effort is a running term")
                    .iter(),
            ),
            Self::Posture { target } => {
                out.extend(f.joint_positions.iter().zip(target).map(|(q, t)| q - t))
            }
            Self::Angular => out.push(base(f).velocity[2]),
            Self::JointVelocity => out.extend(f.joint_velocities.iter()),
            Self::Linear { c, d, offset } => {
                for (i, row) in c.iter().enumerate() {
                    let mut r = row
                        .iter()
                        .zip(f.state.iter())
                        .map(|(a, x)| a * x)
                        .sum::<f64>();
                    if let (Some(u), Some(drow)) = (&f.control, d.get(i)) {
                        r += drow.iter().zip(u.iter()).map(|(a, u)| a * u).sum::<f64>();
                    }
                    out.push(r - offset[i]);
                }
            }
        }
    }

    pub fn evaluate_vector(&self, f: &Features, time: f64) -> DVector<f64> {
        let mut out = Vec::new();
        self.evaluate(f, time, &mut out);
        DVector::from_vec(out)
    }
}

fn base(f: &Features) -> &crate::dynamics::BaseFeatures {
    f.base.as_ref().expect("validated: floating base")
}

/// Reference foot height at `phase` ∈ [0, 1): zero during stance, a cosine
/// bump of height `lift` across the swing window.
pub fn swing_height(phase: f64, duty: f64, lift: f64) -> f64 {
    if phase < duty {
        0.0
    } else {
        let s = (phase - duty) / (1.0 - duty);
        0.5 * lift * (1.0 - (2.0 * PI * s).cos())
    }
}

/// Planar capture point `x_com + ẋ_com √(z_com / g)`.
pub fn capture_point(f: &Features) -> f64 {
    let height = f.com[1].max(0.0);
    f.com[0] + f.com_velocity[0] * (height / f.gravity).sqrt()
}

/// Midpoint of the x-interval spanned by stance feet, or by all feet when
/// none is loaded.
pub fn stance_midpoint(f: &Features) -> f64 {
    let loaded: Vec<f64> = f
        .feet
        .iter()
        .filter(|p| p.normal_force > STANCE_FORCE)
        .map(|p| p.position[0])
        .collect();
    let xs = if loaded.is_empty() {
        f.feet.iter().map(|p| p.position[0]).collect()
    } else {
        loaded
    };
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (lo + hi)
}
