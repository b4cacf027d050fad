use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Newton–Raphson control shared by the Cox and probit fitters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitControl {
    /// Convergence when the Euclidean gradient norm drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Any |coef| above this is reported as separation.
    pub coef_limit: f64,
}

impl Default for FitControl {
    fn default() -> Self {
        FitControl {
            tol: 1e-8,
            max_iter: 100,
            coef_limit: 50.0,
        }
    }
}

pub(crate) struct Derivs {
    pub loglik: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Newton–Raphson with step halving for a concave objective. Returns the
/// maximizer, the derivatives there, and the number of Newton steps taken.
pub(crate) fn newton_maximize<F>(
    init: &[f64],
    objective: F,
    ctrl: &FitControl,
    what: &'static str,
) -> Result<(Vec<f64>, Derivs, usize)>
where
    F: Fn(&[f64]) -> Result<Derivs>,
{
    let mut coef = init.to_vec();
    let mut d = objective(&coef)?;
    for iter in 0..=ctrl.max_iter {
        let gnorm = d.grad.norm();
        if gnorm < ctrl.tol {
            return Ok((coef, d, iter));
        }
        if iter == ctrl.max_iter {
            return Err(Error::NonConvergence {
                what,
                iterations: iter,
                grad_norm: gnorm,
            });
        }
        let step = linalg::solve_spd(&(-&d.hess), &d.grad, what)?;
        // rounding slack so a step that cannot improve at machine precision is still taken
        let slack = 1e-12 * d.loglik.abs().max(1.0);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = coef
                .iter()
                .zip(step.iter())
                .map(|(c, s)| c + scale * s)
                .collect();
            if let Ok(td) = objective(&trial) {
                if td.loglik.is_finite() && td.loglik >= d.loglik - slack {
                    accepted = Some((trial, td));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, td)) = accepted else {
            return Err(Error::NonConvergence {
                what,
                iterations: iter,
                grad_norm: gnorm,
            });
        };
        if trial.iter().any(|c| c.abs() > ctrl.coef_limit) {
            return Err(Error::Separation {
                what,
                limit: ctrl.coef_limit,
            });
        }
        coef = trial;
        d = td;
    }
    unreachable!("loop returns on the last iteration")
}

/// Flags coefficients whose standardized variance `var(coef_k) · var(x_k)`
/// exceeds 1e4: the likelihood is flat along that axis, which in practice
/// means it keeps increasing toward infinity (monotone likelihood).
pub(crate) fn check_flat_directions(
    cov: &DMatrix<f64>,
    design: &DMatrix<f64>,
    ctrl: &FitControl,
    what: &'static str,
) -> Result<()> {
    let n = design.nrows() as f64;
    for k in 0..design.ncols() {
        let col = design.column(k);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // intercept-like columns are measured on their own scale
        let scale = if var > 0.0 { var } else { mean * mean };
        if cov[(k, k)] * scale > 1e4 {
            return Err(Error::Separation {
                what,
                limit: ctrl.coef_limit,
            });
        }
    }
    Ok(())
}
