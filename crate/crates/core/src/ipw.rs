//! Inverse-probability-weighted marginal Cox models, alone and combined with
//! the stochastic EM draws of `U`.

use serde::{Deserialize, Serialize};

use crate::coxph::{fit_cox, sandwich_variance, CoxData, CoxFit};
use crate::dataset::Dataset;
use crate::em_engine::Prepared;
use crate::error::{Error, Result};
use crate::latent_confounder::SensitivityParams;
use crate::normal;
use crate::optim::FitControl;
use crate::probit::fit_probit;
use crate::stochastic_em::{run_chain, u_offsets, CombinedEstimate, StoEmControl};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightSpec {
    /// Multiply by the marginal treatment probability (or its complement).
    pub stabilize: bool,
    pub trim_low: f64,
    pub trim_high: f64,
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec {
            stabilize: true,
            trim_low: 0.1,
            trim_high: 10.0,
        }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.trim_low > 0.0 && self.trim_low < self.trim_high && self.trim_high.is_finite()) {
            return Err(Error::InvalidArgument("weights need 0 < trim_low < trim_high".into()));
        }
        Ok(())
    }
}

/// `zᵢ p̄/psᵢ + (1 − zᵢ)(1 − p̄)/(1 − psᵢ)` clamped into `[trim_low, trim_high]`,
/// where `p̄` is the treated fraction (1 when not stabilizing).
pub fn stabilized_weights(z: &[bool], ps: &[f64], spec: &WeightSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if z.len() != ps.len() || z.is_empty() {
        return Err(Error::InvalidArgument("z and ps must have equal, non-zero lengths".into()));
    }
    if let Some(i) = ps.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "propensity score {} of record {} is not strictly inside (0, 1)",
            ps[i],
            i + 1
        )));
    }
    let (num1, num0) = if spec.stabilize {
        let p = z.iter().filter(|&&b| b).count() as f64 / z.len() as f64;
        (p, 1.0 - p)
    } else {
        (1.0, 1.0)
    };
    Ok(z.iter()
        .zip(ps)
        .map(|(&zi, &p)| {
            let w = if zi { num1 / p } else { num0 / (1.0 - p) };
            w.clamp(spec.trim_low, spec.trim_high)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpwEstimate {
    pub tau: f64,
    /// Sandwich standard error.
    pub se: f64,
}

/// Weighted Cox model of each cause on treatment alone.
pub fn ipw_cox(data: &Dataset, weights: &[f64]) -> Result<Vec<IpwEstimate>> {
    ipw_cox_fits(data, weights, &FitControl::default()).map(|v| v.into_iter().map(|(e, _)| e).collect())
}

pub fn ipw_cox_fits(data: &Dataset, weights: &[f64], ctrl: &FitControl) -> Result<Vec<(IpwEstimate, CoxFit)>> {
    if weights.len() != data.n() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be n positive finite values".into()));
    }
    let zeros = vec![0.0; data.n()];
    (1..=data.n_causes())
        .map(|j| {
            let cd = CoxData::treatment_only(data, j);
            let fit = fit_cox(&cd, &zeros, weights, &[0.0], ctrl)?;
            let v = sandwich_variance(&cd, &fit, &zeros, weights)?;
            Ok((
                IpwEstimate {
                    tau: fit.coef[0],
                    se: v[(0, 0)].max(0.0).sqrt(),
                },
                fit,
            ))
        })
        .collect()
}

/// Propensity scores `Φ(xᵢᵀβ̂ᶻ + ζᶻuᵢ)`, with `β̂ᶻ` refit from zero with the
/// `U` coefficient held at `ζᶻ`.
pub fn propensity_scores(prep: &Prepared, u: &[bool], zeta_z: f64, fit: &FitControl) -> Result<Vec<f64>> {
    let off = u_offsets(u, zeta_z);
    let init = vec![0.0; prep.probit_design.ncols()];
    let pf = fit_probit(&prep.treat, &prep.probit_design, &off, &init, fit)?;
    let eta = &prep.probit_design * nalgebra::DVector::from_column_slice(&pf.coef);
    Ok(eta.iter().zip(&off).map(|(e, o)| normal::cdf(e + o)).collect())
}

/// IPW estimate with the propensity model ignoring `U`.
pub fn ipw_no_u(data: &Dataset, spec: &WeightSpec, intercept: bool, fit: &FitControl) -> Result<Vec<IpwEstimate>> {
    let prep = Prepared::new(data, intercept);
    let ps = propensity_scores(&prep, &vec![false; data.n()], 0.0, fit)?;
    let w = stabilized_weights(&prep.treat, &ps, spec)?;
    ipw_cox_fits(data, &w, fit).map(|v| v.into_iter().map(|(e, _)| e).collect())
}

/// Stochastic EM chain in which every retained draw of `U` feeds a propensity
/// refit, trimmed stabilized weights and a marginal Cox fit; the K results are
/// combined with sandwich variances as the within-draw term.
pub fn stochastic_em_ipw(
    data: &Dataset,
    sens: &SensitivityParams,
    ctrl: &StoEmControl,
    spec: &WeightSpec,
) -> Result<CombinedEstimate> {
    spec.validate()?;
    let mut per_draw = vec![Vec::with_capacity(ctrl.k); data.n_causes()];
    let coef = run_chain(data, sens, ctrl, |_, prep, _, u| {
        let ps = propensity_scores(prep, u, sens.zeta_z, &ctrl.fit)?;
        let w = stabilized_weights(&prep.treat, &ps, spec)?;
        for (j, (e, _)) in ipw_cox_fits(data, &w, &ctrl.fit)?.into_iter().enumerate() {
            per_draw[j].push((e.tau, e.se));
        }
        Ok(())
    })?;
    let mut est = CombinedEstimate::from_draws(per_draw)?;
    coef.attach(&mut est);
    Ok(est)
}
