//! Smooth penalty contact against the flat ground plane `z = 0`.
//!
//! The normal force is a spring on a C¹ ramp of the penetration depth plus a
//! damper gated by a C¹ activation, passed through a C¹ non-negative clamp.
//! Friction is a smoothly saturating viscous law whose pre-saturation gain is
//! `slip_stiffness · normal_stiffness · smoothing_width`; raising
//! `slip_stiffness` trades foot sliding for stiffer (costlier) integration.

use serde::{Deserialize, Serialize};

use super::model::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    /// N/m
    pub normal_stiffness: f64,
    /// N·s/m
    pub normal_damping: f64,
    /// Coulomb coefficient μ.
    pub friction_coeff: f64,
    /// Dimensionless multiplier (≥ 1) on the tangential regularization gain.
    pub slip_stiffness: f64,
    /// Width of the smooth activation band around the surface, m.
    pub smoothing_width: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            normal_stiffness: 1.0e4,
            normal_damping: 100.0,
            friction_coeff: 1.0,
            slip_stiffness: 10.0,
            smoothing_width: 2.0e-3,
        }
    }
}

/// Width of the non-negativity clamp, as a fraction of `normal_stiffness ·
/// smoothing_width`.
const CLAMP_FRACTION: f64 = 0.1;
/// Keeps the friction law differentiable at zero load and zero slip, N.
const FRICTION_EPS: f64 = 1.0e-6;

impl ContactParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("contact.normal_stiffness", self.normal_stiffness),
            ("contact.normal_damping", self.normal_damping),
            ("contact.friction_coeff", self.friction_coeff),
            ("contact.slip_stiffness", self.slip_stiffness),
            ("contact.smoothing_width", self.smoothing_width),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::new(name, format!("must be > 0 (got {value})")));
            }
        }
        if self.friction_coeff > 2.0 {
            return Err(ModelError::new(
                "contact.friction_coeff",
                format!("must lie in (0, 2] (got {})", self.friction_coeff),
            ));
        }
        if self.slip_stiffness < 1.0 {
            return Err(ModelError::new(
                "contact.slip_stiffness",
                format!("must be >= 1 (got {})", self.slip_stiffness),
            ));
        }
        Ok(())
    }

    /// Pre-saturation viscous friction gain, N·s/m.
    pub fn tangential_gain(&self) -> f64 {
        self.slip_stiffness * self.normal_stiffness * self.smoothing_width
    }

    /// Normal force for signed distance `phi` (negative = penetrating) and its
    /// rate `phi_dot`. Identically zero once `phi >= smoothing_width`.
    pub fn normal_force(&self, phi: f64, phi_dot: f64) -> f64 {
        let s = self.smoothing_width;
        let depth = -phi;
        let raw = self.normal_stiffness * smooth_ramp(depth, s)
            - self.normal_damping * phi_dot * smooth_step(depth, s);
        smooth_positive(raw, CLAMP_FRACTION * self.normal_stiffness * s)
    }

    /// Tangential force for slip velocity `v_t` under normal load `normal`.
    /// Its magnitude never exceeds `friction_coeff · normal`.
    pub fn tangential_force(&self, normal: f64, v_t: f64) -> f64 {
        let cap = self.friction_coeff * normal;
        let beta = self.tangential_gain();
        let bv = beta * v_t;
        -cap * bv / (cap * cap + bv * bv + FRICTION_EPS * FRICTION_EPS).sqrt()
    }
}

/// C¹ ramp: 0 below `-s`, quadratic blend on `[-s, s]`, identity above `s`.
pub fn smooth_ramp(x: f64, s: f64) -> f64 {
    if x <= -s {
        0.0
    } else if x >= s {
        x
    } else {
        (x + s) * (x + s) / (4.0 * s)
    }
}

/// C¹ step from 0 (at `-s`) to 1 (at `s`).
pub fn smooth_step(x: f64, s: f64) -> f64 {
    let t = ((x + s) / (2.0 * s)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// C¹ clamp to the non-negative half-line with blend width `w`.
pub fn smooth_positive(y: f64, w: f64) -> f64 {
    if y <= 0.0 {
        0.0
    } else if y >= w {
        y - 0.5 * w
    } else {
        y * y / (2.0 * w)
    }
}

/// World-frame force at one contact point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactForce {
    pub position: [f64; 2],
    /// Signed height above the ground, m.
    pub distance: f64,
    pub normal: f64,
    pub tangential: f64,
}
