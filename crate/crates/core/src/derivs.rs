//! Finite-difference linearization of dynamics and residuals along a
//! trajectory, with optional derivative skipping between knots.

use std::cell::Cell;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dynamics, DynamicsError, Features};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    Forward,
    Centered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Absolute perturbation applied to each coordinate.
    pub epsilon: f64,
    pub scheme: FdScheme,
    /// Knots skipped between dynamics-Jacobian evaluations.
    pub skip_deriv: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            scheme: FdScheme::Forward,
            skip_deriv: 0,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(format!("fd epsilon must be > 0 (got {})", self.epsilon));
        }
        Ok(())
    }
}

/// A dynamics failure at a perturbed point. `coordinate` indexes the stacked
/// `[x; u]` vector (`None` for the unperturbed point).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("dynamics failed at knot {knot:?}, perturbed coordinate {coordinate:?}: {source}")]
pub struct FdError {
    pub knot: Option<usize>,
    pub coordinate: Option<usize>,
    #[source]
    pub source: DynamicsError,
}

impl FdError {
    fn at(coordinate: Option<usize>) -> impl Fn(DynamicsError) -> FdError {
        move |source| FdError {
            knot: None,
            coordinate,
            source,
        }
    }

    fn with_knot(mut self, knot: usize) -> Self {
        self.knot = Some(knot);
        self
    }
}

/// Evaluation counters. `dynamics` counts calls to `step`; `residual` counts
/// feature-only evaluations made where dynamics Jacobians were skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub dynamics: usize,
    pub residual: usize,
}

impl std::ops::AddAssign for EvalCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.dynamics += rhs.dynamics;
        self.residual += rhs.residual;
    }
}

fn perturbed(base: &DVector<f64>, index: usize, delta: f64) -> DVector<f64> {
    let mut p = base.clone();
    p[index] += delta;
    p
}

/// Jacobians `A = ∂f/∂x`, `B = ∂f/∂u` of one step.
///
/// The forward scheme costs `nx + nu + 1` calls to `step`; the centered scheme
/// costs `2(nx + nu)`.
pub fn fd_jacobians(
    dynamics: &dyn Dynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    cfg: &FdConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>), FdError> {
    let (nx, nu) = (x.len(), u.len());
    let eps = cfg.epsilon;
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    match cfg.scheme {
        FdScheme::Forward => {
            let f0 = dynamics.step(x, u, dt).map_err(FdError::at(None))?;
            for i in 0..nx + nu {
                let fi = if i < nx {
                    dynamics.step(&perturbed(x, i, eps), u, dt)
                } else {
                    dynamics.step(x, &perturbed(u, i - nx, eps), dt)
                }
                .map_err(FdError::at(Some(i)))?;
                let col = (fi - &f0) / eps;
                if i < nx {
                    a.set_column(i, &col);
                } else {
                    b.set_column(i - nx, &col);
                }
            }
        }
        FdScheme::Centered => {
            for i in 0..nx + nu {
                let (fp, fm) = if i < nx {
                    (
                        dynamics.step(&perturbed(x, i, eps), u, dt),
                        dynamics.step(&perturbed(x, i, -eps), u, dt),
                    )
                } else {
                    (
                        dynamics.step(x, &perturbed(u, i - nx, eps), dt),
                        dynamics.step(x, &perturbed(u, i - nx, -eps), dt),
                    )
                };
                let fp = fp.map_err(FdError::at(Some(i)))?;
                let fm = fm.map_err(FdError::at(Some(i)))?;
                let col = (fp - fm) / (2.0 * eps);
                if i < nx {
                    a.set_column(i, &col);
                } else {
                    b.set_column(i - nx, &col);
                }
            }
        }
    }
    Ok((a, b))
}

/// Per-knot dynamics Jacobians. `evaluated[t]` tells whether knot `t` was
/// finite-differenced or interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedDynamics {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub evaluated: Vec<bool>,
}

impl LinearizedDynamics {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }
}

/// Knots whose dynamics Jacobians are computed for a skip count `skip`:
/// every `(skip + 1)`-th knot from 0, plus the last knot.
pub fn evaluated_knots(horizon: usize, skip: usize) -> Vec<bool> {
    (0..horizon)
        .map(|t| t % (skip + 1) == 0 || t + 1 == horizon)
        .collect()
}

/// Fills non-evaluated knots by per-entry linear interpolation in knot index
/// between the nearest evaluated neighbours.
fn interpolate_skipped(mats: &mut [DMatrix<f64>], evaluated: &[bool]) {
    let knots: Vec<usize> = (0..evaluated.len()).filter(|&t| evaluated[t]).collect();
    for pair in knots.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        for t in lo + 1..hi {
            let w = (t - lo) as f64 / (hi - lo) as f64;
            mats[t] = &mats[lo] * (1.0 - w) + &mats[hi] * w;
        }
    }
}

/// Linearizes the dynamics along `states` (length T+1) and `controls`
/// (length T), honouring `cfg.skip_deriv`. Returns the Jacobians and the
/// number of `step` calls made.
pub fn linearize_trajectory(
    dynamics: &dyn Dynamics,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    dt: f64,
    cfg: &FdConfig,
) -> Result<(LinearizedDynamics, EvalCounts), FdError> {
    assert_eq!(
        states.len(),
        controls.len() + 1,
        "need T+1 states for T controls"
    );
    let horizon = controls.len();
    let (nx, nu) = (dynamics.nx(), dynamics.nu());
    let evaluated = evaluated_knots(horizon, cfg.skip_deriv);
    let mut a = vec![DMatrix::zeros(nx, nx); horizon];
    let mut b = vec![DMatrix::zeros(nx, nu); horizon];
    let mut counts = EvalCounts::default();
    for t in (0..horizon).filter(|&t| evaluated[t]) {
        let (at, bt) = fd_jacobians(dynamics, &states[t], &controls[t], dt, cfg)
            .map_err(|e| e.with_knot(t))?;
        a[t] = at;
        b[t] = bt;
        counts.dynamics += dynamics_cost(cfg.scheme, nx, nu);
    }
    interpolate_skipped(&mut a, &evaluated);
    interpolate_skipped(&mut b, &evaluated);
    Ok((LinearizedDynamics { a, b, evaluated }, counts))
}

fn dynamics_cost(scheme: FdScheme, nx: usize, nu: usize) -> usize {
    match scheme {
        FdScheme::Forward => nx + nu + 1,
        FdScheme::Centered => 2 * (nx + nu),
    }
}

/// Residual value and its Jacobians at one knot.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualJacobians {
    pub r: DVector<f64>,
    pub rx: DMatrix<f64>,
    pub ru: DMatrix<f64>,
}

/// Dynamics plus running and terminal residual Jacobians along a trajectory.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub dynamics: LinearizedDynamics,
    pub running: Vec<ResidualJacobians>,
    pub terminal: ResidualJacobians,
    pub counts: EvalCounts,
    /// Wall time spent on residual evaluation and feature-only calls, s.
    pub residual_seconds: f64,
    /// Total wall time of the linearization, s.
    pub seconds: f64,
}

/// Which residual set a closure should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualStage {
    Running,
    Terminal,
}

/// Linearizes dynamics and residuals together. At knots where dynamics
/// Jacobians are evaluated, every perturbed `evaluate` call yields both the
/// perturbed successor and the perturbed residual, so residual Jacobians come
/// for free. Skipped knots still get residual Jacobians from feature-only
/// evaluations, which never call `step`.
///
/// `residual(features, time, stage)` maps features at absolute `time` to the
/// stacked residual vector.
pub fn linearize_with_residuals<R>(
    dynamics: &dyn Dynamics,
    residual: R,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    t0: f64,
    dt: f64,
    cfg: &FdConfig,
) -> Result<Linearization, FdError>
where
    R: Fn(&Features, f64, ResidualStage) -> DVector<f64>,
{
    assert_eq!(
        states.len(),
        controls.len() + 1,
        "need T+1 states for T controls"
    );
    let horizon = controls.len();
    let (nx, nu) = (dynamics.nx(), dynamics.nu());
    let evaluated = evaluated_knots(horizon, cfg.skip_deriv);
    let eps = cfg.epsilon;
    let started = Instant::now();
    let residual_time = Cell::new(0.0);
    let timed = |f: &dyn Fn() -> Result<DVector<f64>, DynamicsError>| {
        let t = Instant::now();
        let r = f();
        residual_time.set(residual_time.get() + t.elapsed().as_secs_f64());
        r
    };
    let mut a = vec![DMatrix::zeros(nx, nx); horizon];
    let mut b = vec![DMatrix::zeros(nx, nu); horizon];
    let mut running = Vec::with_capacity(horizon);
    let mut counts = EvalCounts::default();

    for t in 0..horizon {
        let (x, u) = (&states[t], &controls[t]);
        let time = t0 + t as f64 * dt;
        let point = |xp: &DVector<f64>, up: &DVector<f64>, i: Option<usize>, with_step: bool| {
            if with_step {
                dynamics.evaluate(xp, up, dt).map(|(next, f)| {
                    let r = timed(&|| Ok(residual(&f, time, ResidualStage::Running)));
                    (Some(next), r.expect("infallible"))
                })
            } else {
                timed(&|| {
                    dynamics
                        .features(xp, Some(up))
                        .map(|f| residual(&f, time, ResidualStage::Running))
                })
                .map(|r| (None, r))
            }
            .map_err(|e| FdError::at(i)(e).with_knot(t))
        };
        let with_step = evaluated[t];
        let perturb = |i: usize, delta: f64| {
            if i < nx {
                (perturbed(x, i, delta), u.clone())
            } else {
                (x.clone(), perturbed(u, i - nx, delta))
            }
        };

        let (_, r0) = point(x, u, None, false)?;
        counts.residual += 1;
        let nr = r0.len();
        let mut rx = DMatrix::zeros(nr, nx);
        let mut ru = DMatrix::zeros(nr, nu);
        match cfg.scheme {
            FdScheme::Forward => {
                let f0 = if with_step {
                    counts.dynamics += 1;
                    dynamics
                        .step(x, u, dt)
                        .map_err(|e| FdError::at(None)(e).with_knot(t))?
                } else {
                    DVector::zeros(0)
                };
                for i in 0..nx + nu {
                    let (xp, up) = perturb(i, eps);
                    let (next, r) = point(&xp, &up, Some(i), with_step)?;
                    let rcol = (r - &r0) / eps;
                    if i < nx {
                        rx.set_column(i, &rcol);
                    } else {
                        ru.set_column(i - nx, &rcol);
                    }
                    if let Some(next) = next {
                        counts.dynamics += 1;
                        let col = (next - &f0) / eps;
                        if i < nx {
                            a[t].set_column(i, &col);
                        } else {
                            b[t].set_column(i - nx, &col);
                        }
                    } else {
                        counts.residual += 1;
                    }
                }
            }
            FdScheme::Centered => {
                for i in 0..nx + nu {
                    let (xp, up) = perturb(i, eps);
                    let (xm, um) = perturb(i, -eps);
                    let (np, rp) = point(&xp, &up, Some(i), with_step)?;
                    let (nm, rm) = point(&xm, &um, Some(i), with_step)?;
                    let rcol = (rp - rm) / (2.0 * eps);
                    if i < nx {
                        rx.set_column(i, &rcol);
                    } else {
                        ru.set_column(i - nx, &rcol);
                    }
                    if let (Some(np), Some(nm)) = (np, nm) {
                        counts.dynamics += 2;
                        let col = (np - nm) / (2.0 * eps);
                        if i < nx {
                            a[t].set_column(i, &col);
                        } else {
                            b[t].set_column(i - nx, &col);
                        }
                    } else {
                        counts.residual += 2;
                    }
                }
            }
        }
        running.push(ResidualJacobians { r: r0, rx, ru });
    }
    interpolate_skipped(&mut a, &evaluated);
    interpolate_skipped(&mut b, &evaluated);

    let x_t = &states[horizon];
    let t_end = t0 + horizon as f64 * dt;
    let term = |xp: &DVector<f64>, i: Option<usize>| {
        timed(&|| {
            dynamics
                .features(xp, None)
                .map(|f| residual(&f, t_end, ResidualStage::Terminal))
        })
        .map_err(|e| FdError::at(i)(e).with_knot(horizon))
    };
    let r0 = term(x_t, None)?;
    counts.residual += 1;
    let mut rx = DMatrix::zeros(r0.len(), nx);
    for i in 0..nx {
        let col = match cfg.scheme {
            FdScheme::Forward => {
                counts.residual += 1;
                (term(&perturbed(x_t, i, eps), Some(i))? - &r0) / eps
            }
            FdScheme::Centered => {
                counts.residual += 2;
                (term(&perturbed(x_t, i, eps), Some(i))? - term(&perturbed(x_t, i, -eps), Some(i))?)
                    / (2.0 * eps)
            }
        };
        rx.set_column(i, &col);
    }
    let terminal = ResidualJacobians {
        ru: DMatrix::zeros(r0.len(), 0),
        r: r0,
        rx,
    };

    Ok(Linearization {
        dynamics: LinearizedDynamics { a, b, evaluated },
        running,
        terminal,
        counts,
        residual_seconds: residual_time.get(),
        seconds: started.elapsed().as_secs_f64(),
    })
}
