use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::RuntimeError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Std of additive noise on base x and z, m.
    pub position_noise_std: f64,
    /// Std of additive noise on base pitch, rad.
    pub angle_noise_std: f64,
    /// Hz
    pub measurement_rate: f64,
    /// First-order velocity filter cutoff, Hz. Zero disables filtering.
    pub lowpass_cutoff: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            position_noise_std: 0.0,
            angle_noise_std: 0.0,
            measurement_rate: 1000.0,
            lowpass_cutoff: 50.0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, sim_rate: f64) -> Result<(), RuntimeError> {
        let fields = [
            ("estimator.position_noise_std", self.position_noise_std),
            ("estimator.angle_noise_std", self.angle_noise_std),
            ("estimator.lowpass_cutoff", self.lowpass_cutoff),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RuntimeError::config(
                    name,
                    format!("must be >= 0 (got {v})"),
                ));
            }
        }
        if !(self.measurement_rate.is_finite() && self.measurement_rate > 0.0) {
            return Err(RuntimeError::config(
                "estimator.measurement_rate",
                format!("must be > 0 (got {})", self.measurement_rate),
            ));
        }
        if self.measurement_rate > sim_rate {
            return Err(RuntimeError::config(
                "estimator.measurement_rate",
                format!("{} exceeds the sim rate {sim_rate}", self.measurement_rate),
            ));
        }
        Ok(())
    }

    /// Filter blend factor for a sample interval `dt`.
    fn blend(&self, dt: f64) -> f64 {
        if self.lowpass_cutoff == 0.0 {
            1.0
        } else {
            let tau = 1.0 / (2.0 * std::f64::consts::PI * self.lowpass_cutoff);
            dt / (dt + tau)
        }
    }
}

/// Streaming state estimator: positions pass through, velocities are a
/// first-order low-pass of consecutive finite differences.
#[derive(Clone, Debug)]
pub struct Estimator {
    cfg: EstimatorConfig,
    last: Option<(f64, DVector<f64>)>,
    velocity: DVector<f64>,
    samples: usize,
}

impl Estimator {
    pub fn new(nq: usize, cfg: EstimatorConfig) -> Self {
        Self {
            cfg,
            last: None,
            velocity: DVector::zeros(nq),
            samples: 0,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn update(&mut self, time: f64, q: &DVector<f64>) {
        if let Some((t_prev, q_prev)) = &self.last {
            let dt = time - t_prev;
            if dt > 0.0 {
                let a = self.cfg.blend(dt);
                let fd = (q - q_prev) / dt;
                self.velocity += (fd - &self.velocity) * a;
            }
        }
        self.last = Some((time, q.clone()));
        self.samples += 1;
    }

    /// True until two measurements have arrived; velocities are zero then.
    pub fn starting(&self) -> bool {
        self.samples < 2
    }

    /// Stacked `[q; v]`, or `None` before the first measurement.
    pub fn state(&self) -> Option<DVector<f64>> {
        let (_, q) = self.last.as_ref()?;
        let mut x = DVector::zeros(2 * q.len());
        x.rows_mut(0, q.len()).copy_from(q);
        x.rows_mut(q.len(), q.len()).copy_from(&self.velocity);
        Some(x)
    }

    pub fn reset(&mut self) {
        self.last = None;
        self.velocity.fill(0.0);
        self.samples = 0;
    }
}

/// Batch form over a measurement history of `(time, q)` pairs. Returns the
/// estimate and the startup flag.
pub fn estimate(
    history: &[(f64, DVector<f64>)],
    cfg: &EstimatorConfig,
) -> Option<(DVector<f64>, bool)> {
    let nq = history.first()?.1.len();
    let mut est = Estimator::new(nq, *cfg);
    for (t, q) in history {
        est.update(*t, q);
    }
    Some((est.state()?, est.starting()))
}
