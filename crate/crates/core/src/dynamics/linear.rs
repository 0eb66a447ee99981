use nalgebra::{DMatrix, DVector};

use super::{check_dim, Capabilities, Dynamics, DynamicsError, Features};

/// Discrete linear system `x' = A x + B u`. The step ignores `dt`: the
/// matrices already describe one knot interval.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert!(a.is_square(), "A must be square");
        assert_eq!(a.nrows(), b.nrows(), "A and B row counts differ");
        Self { a, b }
    }
}

impl Dynamics for LinearSystem {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            nx: self.a.nrows(),
            nu: self.b.ncols(),
            floating_base: false,
            n_joints: 0,
            n_actuated: 0,
            n_feet: 0,
            has_head: false,
        }
    }

    fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _dt: f64,
    ) -> Result<DVector<f64>, DynamicsError> {
        check_dim("state", self.a.nrows(), x.len())?;
        check_dim("control", self.b.ncols(), u.len())?;
        Ok(&self.a * x + &self.b * u)
    }

    fn features(
        &self,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> Result<Features, DynamicsError> {
        check_dim("state", self.a.nrows(), x.len())?;
        Ok(Features {
            state: x.clone(),
            control: u.cloned(),
            base: None,
            com: [0.0; 2],
            com_velocity: [0.0; 2],
            head: None,
            feet: Vec::new(),
            joint_positions: DVector::zeros(0),
            joint_velocities: DVector::zeros(0),
            actuator_torques: None,
            gravity: 0.0,
        })
    }
}
