use nalgebra::{DMatrix, DVector};

use crate::cost::CostDerivatives;
use crate::derivs::LinearizedDynamics;

/// Output of one Riccati sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardPass {
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    /// `Σ kᵀ Q_u`
    pub linear_term: f64,
    /// `½ Σ kᵀ Q_uu k`
    pub quadratic_term: f64,
}

impl BackwardPass {
    /// Predicted cost decrease for step size `alpha`:
    /// `−α Σ kᵀQ_u − ½α² Σ kᵀQ_uu k`.
    pub fn expected_decrease(&self, alpha: f64) -> f64 {
        -alpha * self.linear_term - alpha * alpha * self.quadratic_term
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("Q_uu is not positive definite at knot {knot}; increase regularization")]
pub struct NotPositiveDefinite {
    pub knot: usize,
}

/// Riccati recursion over Gauss-Newton cost derivatives with `reg·I` added to
/// `Q_uu`.
pub fn backward_pass(
    lin: &LinearizedDynamics,
    cd: &CostDerivatives,
    reg: f64,
) -> Result<BackwardPass, NotPositiveDefinite> {
    let horizon = lin.horizon();
    assert_eq!(cd.lu.len(), horizon, "cost derivatives cover every knot");
    let mut vx = cd.lx[horizon].clone();
    let mut vxx = cd.lxx[horizon].clone();
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    let mut feedforward = vec![DVector::zeros(0); horizon];
    let (mut linear_term, mut quadratic_term) = (0.0, 0.0);

    for t in (0..horizon).rev() {
        let (a, b) = (&lin.a[t], &lin.b[t]);
        let at = a.transpose();
        let bt = b.transpose();
        let vxx_a = &vxx * a;
        let qx = &cd.lx[t] + &at * &vx;
        let qu = &cd.lu[t] + &bt * &vx;
        let qxx = &cd.lxx[t] + &at * &vxx_a;
        let qux = &cd.lux[t] + &bt * &vxx_a;
        let mut quu = &cd.luu[t] + &bt * &vxx * b;
        quu = (&quu + quu.transpose()) * 0.5;
        for i in 0..quu.nrows() {
            quu[(i, i)] += reg;
        }
        let chol = quu
            .clone()
            .cholesky()
            .ok_or(NotPositiveDefinite { knot: t })?;
        let k = -chol.solve(&qu);
        let gain = -chol.solve(&qux);
        if !(k.iter().all(|v| v.is_finite()) && gain.iter().all(|v| v.is_finite())) {
            return Err(NotPositiveDefinite { knot: t });
        }

        linear_term += k.dot(&qu);
        quadratic_term += 0.5 * k.dot(&(&quu * &k));

        let gt = gain.transpose();
        let quxt = qux.transpose();
        vx = qx + &gt * &quu * &k + &gt * &qu + &quxt * &k;
        vxx = qxx + &gt * &quu * &gain + &gt * &qux + &quxt * &gain;
        vxx = (&vxx + vxx.transpose()) * 0.5;

        gains[t] = gain;
        feedforward[t] = k;
    }
    Ok(BackwardPass {
        gains,
        feedforward,
        linear_term,
        quadratic_term,
    })
}
