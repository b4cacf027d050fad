//! Joint density of the observed data and the latent confounder, and the
//! Bernoulli posterior of the confounder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SurvivalRecord};
use crate::em_engine::ModelEstimate;
use crate::error::{Error, Result};
use crate::normal;

/// Fixed sensitivity coefficients and confounder prevalence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    /// Coefficient of `U` in the probit treatment model.
    pub zeta_z: f64,
    /// Coefficient of `U` in each cause-specific hazard.
    pub zeta: Vec<f64>,
    /// `P(U = 1)`.
    pub pi: f64,
}

impl SensitivityParams {
    pub fn new(zeta_z: f64, zeta: Vec<f64>, pi: f64) -> Result<Self> {
        let s = SensitivityParams { zeta_z, zeta, pi };
        s.validate()?;
        Ok(s)
    }

    /// All coefficients zero and `π = 0.5`.
    pub fn zero(n_causes: usize) -> Self {
        SensitivityParams {
            zeta_z: 0.0,
            zeta: vec![0.0; n_causes],
            pi: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.zeta_z.is_finite() || self.zeta.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument("sensitivity coefficients must be finite".into()));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::InvalidArgument(format!("pi = {} is outside (0, 1)", self.pi)));
        }
        Ok(())
    }

    pub(crate) fn check_causes(&self, m: usize) -> Result<()> {
        self.validate()?;
        if self.zeta.len() != m {
            return Err(Error::InvalidArgument(format!(
                "{} outcome sensitivity coefficients for {} causes",
                self.zeta.len(),
                m
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.zeta_z == 0.0 && self.zeta.iter().all(|&z| z == 0.0)
    }
}

/// Per-subject `P(U = 1 | observed data)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorU {
    pub probs: Vec<f64>,
}

impl PosteriorU {
    pub fn constant(n: usize, p: f64) -> Self {
        PosteriorU { probs: vec![p; n] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().sum::<f64>() / self.probs.len() as f64
    }
}

fn check_theta(theta: &ModelEstimate, sens: &SensitivityParams, p: usize) -> Result<()> {
    sens.check_causes(theta.causes.len())?;
    if theta.beta_z.len() != p + usize::from(theta.intercept) {
        return Err(Error::InvalidArgument("beta_z length does not match covariates".into()));
    }
    if theta.causes.iter().any(|c| c.beta.len() != p) {
        return Err(Error::InvalidArgument("beta length does not match covariates".into()));
    }
    Ok(())
}

/// Treatment-model linear predictor without the `U` term.
pub(crate) fn probit_lp(theta: &ModelEstimate, x: &[f64]) -> f64 {
    if theta.intercept {
        theta.beta_z[0] + x.iter().zip(&theta.beta_z[1..]).map(|(a, b)| a * b).sum::<f64>()
    } else {
        x.iter().zip(&theta.beta_z).map(|(a, b)| a * b).sum()
    }
}

/// Cause-`j` linear predictor `τⱼz + βⱼ'x` without the `U` term (`j` 0-based).
pub(crate) fn hazard_lp(theta: &ModelEstimate, j: usize, record: &SurvivalRecord) -> f64 {
    let c = &theta.causes[j];
    c.tau * f64::from(record.treat)
        + record.covariates.iter().zip(&c.beta).map(|(a, b)| a * b).sum::<f64>()
}

/// Log joint density of `(T, δ, J, Z, U = u)` given `X` for one record, with
/// the nonparametric baseline evaluated as a step function.
pub fn joint_logdensity(
    record: &SurvivalRecord,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    u: bool,
) -> Result<f64> {
    check_theta(theta, sens, record.covariates.len())?;
    logdensity_unchecked(0, record, theta, sens, u)
}

fn logdensity_unchecked(
    index: usize,
    record: &SurvivalRecord,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    u: bool,
) -> Result<f64> {
    let uf = f64::from(u8::from(u));
    let mut ld = if u { sens.pi.ln() } else { (-sens.pi).ln_1p() };
    ld += normal::probit_ll(record.treated(), probit_lp(theta, &record.covariates) + sens.zeta_z * uf);
    for (j, cause) in theta.causes.iter().enumerate() {
        let eta = hazard_lp(theta, j, record) + sens.zeta[j] * uf;
        if record.is_event_of(j + 1) {
            let jump = cause
                .baseline
                .increment_at(record.time)
                .filter(|&v| v > 0.0)
                .ok_or(Error::MissingBaselineMass {
                    record: index,
                    cause: j + 1,
                    time: record.time,
                })?;
            ld += jump.ln() + eta;
        }
        ld -= cause.baseline.cumulative(record.time) * eta.exp();
    }
    Ok(ld)
}

/// `(log density at u = 1, log density at u = 0)` for every record.
pub fn branch_logdensities(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
) -> Result<Vec<(f64, f64)>> {
    check_theta(theta, sens, data.p())?;
    data.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok((
                logdensity_unchecked(i, r, theta, sens, true)?,
                logdensity_unchecked(i, r, theta, sens, false)?,
            ))
        })
        .collect()
}

/// `exp(a) / (exp(a) + exp(b))` without overflow.
pub(crate) fn branch_probability(a: f64, b: f64) -> f64 {
    if a >= b {
        1.0 / (1.0 + (b - a).exp())
    } else {
        let e = (a - b).exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Posterior `P(U = 1 | T, δ, J, Z, X)` for every record.
pub fn posterior_u(data: &Dataset, theta: &ModelEstimate, sens: &SensitivityParams) -> Result<PosteriorU> {
    let probs = branch_logdensities(data, theta, sens)?
        .into_iter()
        .map(|(a, b)| branch_probability(a, b))
        .collect();
    Ok(PosteriorU { probs })
}

/// Independent draws `uᵢ ~ Bernoulli(π̃ᵢ)`.
pub fn sample_u<R: Rng + ?Sized>(posterior: &PosteriorU, rng: &mut R) -> Vec<bool> {
    posterior.probs.iter().map(|&p| rng.random::<f64>() < p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coxph::BaselineHazard;
    use crate::em_engine::CauseEstimate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(time: f64, status: u8, treat: u8, x: f64) -> SurvivalRecord {
        SurvivalRecord {
            time,
            status,
            cause: status as usize,
            treat,
            covariates: vec![x],
        }
    }

    /// τ = 1, β = 0.5, Λ₀(1) = 1 with λ₀(1) = 0.4, βᶻ = 0.3 (no intercept).
    fn hand_theta() -> ModelEstimate {
        ModelEstimate::new(
            vec![0.3],
            false,
            vec![CauseEstimate::new(
                1.0,
                vec![0.5],
                BaselineHazard {
                    event_times: vec![0.5, 1.0],
                    increments: vec![0.6, 0.4],
                },
            )],
        )
    }

    /// Term-by-term evaluation of the joint density formula.
    fn oracle(t_event: bool, u: f64, zeta_z: f64, zeta: f64) -> f64 {
        let (z, x, pi) = (1.0, 0.2, 0.5f64);
        let prior = pi.powf(u) * (1.0 - pi).powf(1.0 - u);
        let pz = normal::cdf(x * 0.3 + zeta_z * u);
        let treat = pz.powf(z) * (1.0 - pz).powf(1.0 - z);
        let lin = (1.0 * z + 0.5 * x + zeta * u).exp();
        let event = if t_event { 0.4 * lin } else { 1.0 };
        (prior * treat * event * (-1.0 * lin).exp()).ln()
    }

    #[test]
    fn scalar_fixture_matches_oracle() {
        let theta = hand_theta();
        let sens = SensitivityParams::new(1.0, vec![1.0], 0.5).unwrap();
        let ev = record(1.0, 1, 1, 0.2);
        let cens = record(1.0, 0, 1, 0.2);
        for u in [true, false] {
            let uf = f64::from(u8::from(u));
            let a = joint_logdensity(&ev, &theta, &sens, u).unwrap();
            assert!((a - oracle(true, uf, 1.0, 1.0)).abs() < 1e-12);
            let b = joint_logdensity(&cens, &theta, &sens, u).unwrap();
            assert!((b - oracle(false, uf, 1.0, 1.0)).abs() < 1e-12);
        }
        let data = Dataset::new(vec![ev.clone(), cens], vec!["x".into()]).unwrap();
        let post = posterior_u(&data, &theta, &sens).unwrap();
        let (o1, o0) = (oracle(true, 1.0, 1.0, 1.0).exp(), oracle(true, 0.0, 1.0, 1.0).exp());
        assert!((post.probs[0] - o1 / (o1 + o0)).abs() < 1e-14);
    }

    #[test]
    fn zero_sensitivity_drops_u() {
        let theta = hand_theta();
        let sens = SensitivityParams::zero(1);
        for r in [record(1.0, 1, 1, 0.2), record(0.7, 0, 0, -1.0), record(3.0, 0, 1, 2.0)] {
            let a = joint_logdensity(&r, &theta, &sens, true).unwrap();
            let b = joint_logdensity(&r, &theta, &sens, false).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn event_without_baseline_mass_is_an_error() {
        let theta = hand_theta();
        let sens = SensitivityParams::zero(1);
        assert!(joint_logdensity(&record(0.7, 1, 1, 0.2), &theta, &sens, true).is_err());
    }

    #[test]
    fn relabeling_maps_posterior_to_complement() {
        let mut theta = hand_theta();
        theta.intercept = true;
        theta.beta_z = vec![-0.2, 0.3];
        let (zz, zeta, pi) = (0.8, -1.1, 0.3);
        let data = Dataset::new(
            vec![record(1.0, 1, 1, 0.2), record(0.5, 1, 0, -0.4), record(2.0, 0, 1, 1.0), record(0.2, 0, 0, 0.0)],
            vec!["x".into()],
        )
        .unwrap();
        let sens = SensitivityParams::new(zz, vec![zeta], pi).unwrap();
        let post = posterior_u(&data, &theta, &sens).unwrap();

        let mut mirrored = theta.clone();
        mirrored.beta_z[0] += zz;
        mirrored.causes[0].baseline = theta.causes[0].baseline.scaled(zeta.exp());
        let msens = SensitivityParams::new(-zz, vec![-zeta], 1.0 - pi).unwrap();
        let mpost = posterior_u(&data, &mirrored, &msens).unwrap();
        for (a, b) in post.probs.iter().zip(&mpost.probs) {
            assert!((a - (1.0 - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn increasing_zeta_z_moves_treated_up_and_untreated_down() {
        let theta = hand_theta();
        let data = Dataset::new(
            vec![record(1.0, 1, 1, 0.2), record(0.5, 1, 0, -0.4)],
            vec!["x".into()],
        )
        .unwrap();
        let lo = posterior_u(&data, &theta, &SensitivityParams::new(0.2, vec![0.5], 0.5).unwrap()).unwrap();
        let hi = posterior_u(&data, &theta, &SensitivityParams::new(0.9, vec![0.5], 0.5).unwrap()).unwrap();
        assert!(hi.probs[0] > lo.probs[0]);
        assert!(hi.probs[1] < lo.probs[1]);
    }

    #[test]
    fn sampling_extremes_and_concentration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_u(&PosteriorU::constant(50, 0.0), &mut rng).iter().all(|&u| !u));
        assert!(sample_u(&PosteriorU::constant(50, 1.0), &mut rng).iter().all(|&u| u));
        let draws = sample_u(&PosteriorU::constant(10_000, 0.3), &mut rng);
        let mean = draws.iter().filter(|&&u| u).count() as f64 / 1e4;
        assert!((mean - 0.3).abs() < 0.015);
        let a = sample_u(&PosteriorU::constant(100, 0.5), &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_u(&PosteriorU::constant(100, 0.5), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_is_shift_invariant() {
        for (a, b) in [(-3.0, 1.0), (700.0, 699.0), (-800.0, -801.5)] {
            let p = branch_probability(a, b);
            assert!((p - branch_probability(a + 50.0, b + 50.0)).abs() < 1e-15);
            assert!((p - 1.0 / (1.0 + f64::exp(b - a))).abs() < 1e-15);
        }
    }
}
