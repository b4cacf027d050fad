//! Stochastic EM: one imputed `U` per iteration, K retained iterations and
//! the combined variance `mean σ̂²ₖ + var_k(τ̂ₖ)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coxph::fit_cox;
use crate::dataset::Dataset;
use crate::em_engine::{initial_estimate, CauseEstimate, ModelEstimate, Prepared};
use crate::error::{Error, Result};
use crate::latent_confounder::{posterior_u, sample_u, SensitivityParams};
use crate::optim::FitControl;
use crate::probit::fit_probit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoEmControl {
    pub burn_in: usize,
    /// Number of retained iterations averaged in the final estimate.
    pub k: usize,
    pub seed: u64,
    /// Include an intercept column in the probit design.
    pub intercept: bool,
    pub fit: FitControl,
}

impl Default for StoEmControl {
    fn default() -> Self {
        StoEmControl {
            burn_in: 20,
            k: 40,
            seed: 0,
            intercept: true,
            fit: FitControl::default(),
        }
    }
}

impl StoEmControl {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in < 1 || self.k < 2 {
            return Err(Error::InvalidArgument(
                "stochastic EM needs burn_in >= 1 and k >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Per-cause combination of K draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedEstimate {
    pub tau_hat: Vec<f64>,
    pub se: Vec<f64>,
    /// `(τ̂ₖ, σ̂ₖ)` for each cause, in draw order.
    pub per_draw: Vec<Vec<(f64, f64)>>,
    /// Probit coefficients averaged over the retained iterates.
    pub beta_z: Vec<f64>,
    /// Per-cause covariate coefficients averaged over the retained iterates.
    pub beta: Vec<Vec<f64>>,
}

impl CombinedEstimate {
    /// Combines per-cause draw lists; the coefficient averages are left empty.
    pub fn from_draws(per_draw: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let mut tau_hat = Vec::with_capacity(per_draw.len());
        let mut se = Vec::with_capacity(per_draw.len());
        for draws in &per_draw {
            let (t, s) = combine(draws)?;
            tau_hat.push(t);
            se.push(s);
        }
        Ok(CombinedEstimate {
            tau_hat,
            se,
            per_draw,
            beta_z: Vec::new(),
            beta: Vec::new(),
        })
    }
}

/// `τ̂ = mean τ̂ₖ`, `SE = sqrt(mean σ̂ₖ² + Σ(τ̂ₖ − τ̂)² / (K − 1))`.
pub fn combine(draws: &[(f64, f64)]) -> Result<(f64, f64)> {
    if draws.len() < 2 {
        return Err(Error::InvalidArgument("combining needs at least two draws".into()));
    }
    let k = draws.len() as f64;
    let tau = draws.iter().map(|d| d.0).sum::<f64>() / k;
    let within = draws.iter().map(|d| d.1 * d.1).sum::<f64>() / k;
    let between = draws.iter().map(|d| (d.0 - tau).powi(2)).sum::<f64>() / (k - 1.0);
    Ok((tau, (within + between).sqrt()))
}

/// One iteration: draw `u ~ Bernoulli(π̃)` at `theta`, then refit every
/// model with `u` treated as observed (Cox offsets `ζⱼuᵢ`, probit offset
/// `ζᶻuᵢ`). Returns the new iterate and the draw.
pub fn sto_em_iterate<R: rand::Rng + ?Sized>(
    prep: &Prepared,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    fit: &FitControl,
    rng: &mut R,
) -> Result<(ModelEstimate, Vec<bool>)> {
    let post = posterior_u(prep.data, theta, sens)?;
    let u = sample_u(&post, rng);
    Ok((refit_with_u(prep, theta, sens, &u, fit)?, u))
}

/// Every model refit with `u` observed and its coefficients fixed at the
/// sensitivity values, starting from `prev`.
pub fn refit_with_u(
    prep: &Prepared,
    prev: &ModelEstimate,
    sens: &SensitivityParams,
    u: &[bool],
    fit: &FitControl,
) -> Result<ModelEstimate> {
    let n = prep.n();
    let ones = vec![1.0; n];
    let mut causes = Vec::with_capacity(prep.cox.len());
    for (j, data) in prep.cox.iter().enumerate() {
        let off = u_offsets(u, sens.zeta[j]);
        let f = fit_cox(data, &off, &ones, &prev.causes[j].coef(), fit)?;
        let p = f.coef.len() - 1;
        causes.push(CauseEstimate {
            tau: f.coef[p],
            beta: f.coef[..p].to_vec(),
            baseline: f.baseline,
            coef_cov: Some(f.cov),
        });
    }
    let pf = fit_probit(&prep.treat, &prep.probit_design, &u_offsets(u, sens.zeta_z), &prev.beta_z, fit)?;
    let mut est = ModelEstimate::new(pf.coef, prep.intercept, causes);
    est.beta_z_cov = Some(pf.cov);
    Ok(est)
}

pub(crate) fn u_offsets(u: &[bool], zeta: f64) -> Vec<f64> {
    u.iter().map(|&b| if b { zeta } else { 0.0 }).collect()
}

/// Running mean of the coefficient vectors of the retained iterates.
#[derive(Debug, Default)]
pub(crate) struct CoefMean {
    count: f64,
    beta_z: Vec<f64>,
    beta: Vec<Vec<f64>>,
}

impl CoefMean {
    fn add(&mut self, theta: &ModelEstimate) {
        if self.count == 0.0 {
            self.beta_z = vec![0.0; theta.beta_z.len()];
            self.beta = theta.causes.iter().map(|c| vec![0.0; c.beta.len()]).collect();
        }
        self.count += 1.0;
        for (a, b) in self.beta_z.iter_mut().zip(&theta.beta_z) {
            *a += b;
        }
        for (acc, c) in self.beta.iter_mut().zip(&theta.causes) {
            for (a, b) in acc.iter_mut().zip(&c.beta) {
                *a += b;
            }
        }
    }

    pub(crate) fn attach(self, est: &mut CombinedEstimate) {
        let k = self.count;
        est.beta_z = self.beta_z.into_iter().map(|v| v / k).collect();
        est.beta = self.beta.into_iter().map(|b| b.into_iter().map(|v| v / k).collect()).collect();
    }
}

/// Runs `burn_in + k` iterations of the chain from the EM starting value and
/// calls `visit(k, iterate, draw)` for each retained iteration. Returns the
/// mean coefficients of the retained iterates.
pub(crate) fn run_chain<F>(
    data: &Dataset,
    sens: &SensitivityParams,
    ctrl: &StoEmControl,
    mut visit: F,
) -> Result<CoefMean>
where
    F: FnMut(usize, &Prepared, &ModelEstimate, &[bool]) -> Result<()>,
{
    ctrl.validate()?;
    sens.check_causes(data.n_causes())?;
    let prep = Prepared::new(data, ctrl.intercept);
    let mut theta = initial_estimate(&prep, sens, &ctrl.fit)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctrl.seed);
    let mut coef = CoefMean::default();
    for it in 0..ctrl.burn_in + ctrl.k {
        let wrap = |e| Error::Draw {
            draw: it,
            source: Box::new(e),
        };
        let (next, u) = sto_em_iterate(&prep, &theta, sens, &ctrl.fit, &mut rng).map_err(wrap)?;
        theta = next;
        if it >= ctrl.burn_in {
            coef.add(&theta);
            visit(it - ctrl.burn_in, &prep, &theta, &u).map_err(wrap)?;
        }
    }
    Ok(coef)
}

/// Stochastic EM estimate of every τⱼ with the combined standard error; each
/// draw's SE is the model-based Cox SE with the draw treated as observed.
pub fn run_stochastic_em(
    data: &Dataset,
    sens: &SensitivityParams,
    ctrl: &StoEmControl,
) -> Result<CombinedEstimate> {
    let mut per_draw = vec![Vec::with_capacity(ctrl.k); data.n_causes()];
    let coef = run_chain(data, sens, ctrl, |_, _, theta, _| {
        for (j, c) in theta.causes.iter().enumerate() {
            let se = c.model_se_tau().ok_or_else(|| Error::InvalidArgument("missing covariance".into()))?;
            per_draw[j].push((c.tau, se));
        }
        Ok(())
    })?;
    let mut est = CombinedEstimate::from_draws(per_draw)?;
    coef.attach(&mut est);
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em_engine::{m_step_prepared, no_u_fit};
    use crate::latent_confounder::PosteriorU;
    use crate::testutil;

    #[test]
    fn combination_by_hand() {
        let (t, s) = combine(&[(0.7, 0.1); 5]).unwrap();
        assert!((t - 0.7).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        let (t, s) = combine(&[(1.0, 0.0), (3.0, 0.0)]).unwrap();
        assert_eq!(t, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert!(combine(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn combined_se_at_least_within() {
        let draws: Vec<(f64, f64)> = (0..10).map(|k| (k as f64 * 0.1, 0.2 + 0.01 * k as f64)).collect();
        let (_, s) = combine(&draws).unwrap();
        let within = (draws.iter().map(|d| d.1 * d.1).sum::<f64>() / 10.0).sqrt();
        assert!(s >= within);
    }

    #[test]
    fn zero_sensitivity_reproduces_no_u_fit() {
        let data = testutil::dataset(150, 2, 3);
        let ctrl = StoEmControl {
            burn_in: 2,
            k: 5,
            ..StoEmControl::default()
        };
        let est = run_stochastic_em(&data, &SensitivityParams::zero(2), &ctrl).unwrap();
        let no_u = no_u_fit(&Prepared::new(&data, true), &ctrl.fit).unwrap();
        for j in 0..2 {
            assert!((est.tau_hat[j] - no_u.causes[j].tau).abs() < 1e-12);
            let se = no_u.causes[j].model_se_tau().unwrap();
            assert!((est.se[j] - se).abs() < 1e-12);
        }
    }

    #[test]
    fn certain_draw_matches_degenerate_m_step() {
        let data = testutil::dataset(80, 1, 4);
        let prep = Prepared::new(&data, true);
        let sens = SensitivityParams::new(0.8, vec![-0.6], 0.5).unwrap();
        let fit = FitControl::default();
        let start = no_u_fit(&prep, &fit).unwrap();
        let a = refit_with_u(&prep, &start, &sens, &vec![true; 80], &fit).unwrap();
        let b = m_step_prepared(&prep, &PosteriorU::constant(80, 1.0), &sens, &start, &fit).unwrap();
        assert!(a.max_relative_change(&b) < 1e-8);
    }

    #[test]
    fn deterministic_given_seed() {
        let data = testutil::dataset(100, 1, 5);
        let sens = SensitivityParams::new(1.0, vec![1.0], 0.5).unwrap();
        let ctrl = StoEmControl {
            burn_in: 3,
            k: 4,
            seed: 17,
            ..StoEmControl::default()
        };
        let a = run_stochastic_em(&data, &sens, &ctrl).unwrap();
        let b = run_stochastic_em(&data, &sens, &ctrl).unwrap();
        assert_eq!(a, b);
        let c = run_stochastic_em(&data, &sens, &StoEmControl { seed: 18, ..ctrl }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_single_repetition() {
        let data = testutil::dataset(30, 1, 6);
        let ctrl = StoEmControl {
            k: 1,
            ..StoEmControl::default()
        };
        assert!(run_stochastic_em(&data, &SensitivityParams::zero(1), &ctrl).is_err());
    }
}
