//! Probit treatment-assignment model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::normal;
use crate::optim::{check_flat_directions, newton_maximize, Derivs, FitControl};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbitFit {
    pub coef: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
}

impl ProbitFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|k| self.cov[(k, k)].max(0.0).sqrt()).collect()
    }
}

/// Σᵢ [p_i ℓ(zᵢ, ηᵢ + shift) + (1 − p_i) ℓ(zᵢ, ηᵢ)], ηᵢ = xᵢ'coef + offsetᵢ.
/// `probs = None` means p ≡ 0.
fn mixture_derivs(
    z: &[bool],
    design: &DMatrix<f64>,
    coef: &[f64],
    offset: &[f64],
    shift: f64,
    probs: Option<&[f64]>,
) -> Result<Derivs> {
    let n = z.len();
    let q = design.ncols();
    if design.nrows() != n || offset.len() != n || coef.len() != q {
        return Err(Error::InvalidArgument("probit dimensions disagree".into()));
    }
    let eta = design * DVector::from_column_slice(coef);
    let mut loglik = 0.0;
    let mut grad = DVector::zeros(q);
    let mut hess = DMatrix::zeros(q, q);
    for i in 0..n {
        let base = eta[i] + offset[i];
        if !base.is_finite() {
            return Err(Error::NonFinite(i));
        }
        let p = probs.map_or(0.0, |p| p[i]);
        let mut g = 0.0;
        let mut h = 0.0;
        for (w, e) in [(1.0 - p, base), (p, base + shift)] {
            if w == 0.0 {
                continue;
            }
            let (d1, d2) = normal::probit_derivs(z[i], e);
            loglik += w * normal::probit_ll(z[i], e);
            g += w * d1;
            h += w * d2;
        }
        let x = design.row(i);
        for a in 0..q {
            grad[a] += g * x[a];
            for b in 0..=a {
                hess[(a, b)] += h * x[a] * x[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            hess[(b, a)] = hess[(a, b)];
        }
    }
    Ok(Derivs { loglik, grad, hess })
}

/// Σᵢ zᵢ log Φ(ηᵢ) + (1 − zᵢ) log(1 − Φ(ηᵢ)), ηᵢ = xᵢ'coef + offsetᵢ.
pub fn probit_loglik(z: &[bool], design: &DMatrix<f64>, coef: &[f64], offset: &[f64]) -> Result<f64> {
    Ok(mixture_derivs(z, design, coef, offset, 0.0, None)?.loglik)
}

/// The expected probit log likelihood under `U ~ Bernoulli(posterior)`,
/// with `zeta_z` the fixed coefficient on `U`.
pub fn q2_objective(
    z: &[bool],
    design: &DMatrix<f64>,
    zeta_z: f64,
    posterior: &[f64],
    coef: &[f64],
) -> Result<f64> {
    Ok(mixture_derivs(z, design, coef, &vec![0.0; z.len()], zeta_z, Some(posterior))?.loglik)
}

/// Gradient of [`q2_objective`] in `coef`.
pub fn q2_gradient(
    z: &[bool],
    design: &DMatrix<f64>,
    zeta_z: f64,
    posterior: &[f64],
    coef: &[f64],
) -> Result<Vec<f64>> {
    let d = mixture_derivs(z, design, coef, &vec![0.0; z.len()], zeta_z, Some(posterior))?;
    Ok(d.grad.iter().copied().collect())
}

fn finish(
    coef: Vec<f64>,
    d: Derivs,
    iterations: usize,
    design: &DMatrix<f64>,
    ctrl: &FitControl,
) -> Result<ProbitFit> {
    let cov = linalg::inverse_spd(&(-&d.hess), "probit information")?;
    check_flat_directions(&cov, design, ctrl, "probit likelihood")?;
    Ok(ProbitFit {
        coef,
        cov,
        loglik: d.loglik,
        iterations,
    })
}

/// Maximum-likelihood probit fit with a fixed offset.
pub fn fit_probit(
    z: &[bool],
    design: &DMatrix<f64>,
    offset: &[f64],
    init: &[f64],
    ctrl: &FitControl,
) -> Result<ProbitFit> {
    let (coef, d, it) = newton_maximize(
        init,
        |c| mixture_derivs(z, design, c, offset, 0.0, None),
        ctrl,
        "probit likelihood",
    )?;
    finish(coef, d, it, design, ctrl)
}

/// Maximizes the mixture objective [`q2_objective`] over the probit coefficients.
pub fn fit_q2_probit(
    z: &[bool],
    design: &DMatrix<f64>,
    zeta_z: f64,
    posterior: &[f64],
    init: &[f64],
    ctrl: &FitControl,
) -> Result<ProbitFit> {
    if !zeta_z.is_finite() {
        return Err(Error::InvalidArgument("zeta_z must be finite".into()));
    }
    if posterior.len() != z.len() || posterior.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument("posterior must have n entries in [0, 1]".into()));
    }
    let zero = vec![0.0; z.len()];
    let (coef, d, it) = newton_maximize(
        init,
        |c| mixture_derivs(z, design, c, &zero, zeta_z, Some(posterior)),
        ctrl,
        "probit Q2",
    )?;
    finish(coef, d, it, design, ctrl)
}
