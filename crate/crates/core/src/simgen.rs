//! Synthetic survival and competing-risks data with a binary confounder.
//!
//! Every variable has its own ChaCha8 stream and consumes exactly one
//! uniform per record, so record `i` is identical for any `n > i`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SurvivalRecord};
use crate::error::{Error, Result};
use crate::normal;

/// Parameters of one cause-specific hazard `λⱼ exp(τⱼZ + βⱼᵀX + ζⱼU)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CauseSimParams {
    pub beta: Vec<f64>,
    pub tau: f64,
    pub zeta: f64,
    pub baseline_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvSimConfig {
    pub n: usize,
    pub beta_z: Vec<f64>,
    pub zeta_z: f64,
    pub beta: Vec<f64>,
    pub tau: f64,
    pub zeta: f64,
    pub pi: f64,
    pub baseline_rate: f64,
    pub censor_low: f64,
    pub censor_high: f64,
    pub covariate_means: Vec<f64>,
    pub covariate_sds: Vec<f64>,
    pub seed: u64,
}

impl SurvSimConfig {
    /// The single-outcome simulation design: n = 1000, X₁ ~ N(0,1),
    /// X₂ ~ N(1,1), βᶻ = (0.25, −0.25), β = (0.5, −1), τ = 1, λ₀ = 1,
    /// C ~ U(1, 2), π = 0.5.
    pub fn standard(zeta_z: f64, zeta: f64, seed: u64) -> Self {
        SurvSimConfig {
            n: 1000,
            beta_z: vec![0.25, -0.25],
            zeta_z,
            beta: vec![0.5, -1.0],
            tau: 1.0,
            zeta,
            pi: 0.5,
            baseline_rate: 1.0,
            censor_low: 1.0,
            censor_high: 2.0,
            covariate_means: vec![0.0, 1.0],
            covariate_sds: vec![1.0, 1.0],
            seed,
        }
    }

    fn as_competing(&self) -> CompRiskSimConfig {
        CompRiskSimConfig {
            n: self.n,
            beta_z: self.beta_z.clone(),
            zeta_z: self.zeta_z,
            causes: vec![CauseSimParams {
                beta: self.beta.clone(),
                tau: self.tau,
                zeta: self.zeta,
                baseline_rate: self.baseline_rate,
            }],
            pi: self.pi,
            censor_low: self.censor_low,
            censor_high: self.censor_high,
            covariate_means: self.covariate_means.clone(),
            covariate_sds: self.covariate_sds.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.as_competing().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompRiskSimConfig {
    pub n: usize,
    pub beta_z: Vec<f64>,
    pub zeta_z: f64,
    pub causes: Vec<CauseSimParams>,
    pub pi: f64,
    pub censor_low: f64,
    pub censor_high: f64,
    pub covariate_means: Vec<f64>,
    pub covariate_sds: Vec<f64>,
    pub seed: u64,
}

impl CompRiskSimConfig {
    /// The two-cause design: β₁ = (0.5, −1), τ₁ = 1, β₂ = (−0.5, 0.2),
    /// τ₂ = −1, unit baselines, C ~ U(0.3, 0.7), covariates as in
    /// [`SurvSimConfig::standard`].
    pub fn standard(zeta_z: f64, zeta1: f64, zeta2: f64, seed: u64) -> Self {
        CompRiskSimConfig {
            n: 1000,
            beta_z: vec![0.25, -0.25],
            zeta_z,
            causes: vec![
                CauseSimParams {
                    beta: vec![0.5, -1.0],
                    tau: 1.0,
                    zeta: zeta1,
                    baseline_rate: 1.0,
                },
                CauseSimParams {
                    beta: vec![-0.5, 0.2],
                    tau: -1.0,
                    zeta: zeta2,
                    baseline_rate: 1.0,
                },
            ],
            pi: 0.5,
            censor_low: 0.3,
            censor_high: 0.7,
            covariate_means: vec![0.0, 1.0],
            covariate_sds: vec![1.0, 1.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        let p = self.covariate_means.len();
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.causes.is_empty() {
            return bad("at least one cause is required");
        }
        if self.covariate_sds.len() != p || self.beta_z.len() != p {
            return bad("covariate_means, covariate_sds and beta_z must have equal lengths");
        }
        if self.causes.iter().any(|c| c.beta.len() != p) {
            return bad("every cause's beta must have one entry per covariate");
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return bad("pi must lie in (0, 1)");
        }
        if !(self.censor_low < self.censor_high) || self.censor_low < 0.0 {
            return bad("censoring support needs 0 <= censor_low < censor_high");
        }
        if self.causes.iter().any(|c| !(c.baseline_rate > 0.0)) {
            return bad("baseline rates must be positive");
        }
        if self.covariate_sds.iter().any(|s| !(*s >= 0.0)) {
            return bad("covariate standard deviations must be non-negative");
        }
        let finite = self
            .beta_z
            .iter()
            .chain(&self.covariate_means)
            .chain(self.causes.iter().flat_map(|c| c.beta.iter().chain([&c.tau, &c.zeta])))
            .all(|v| v.is_finite());
        if !finite || !self.zeta_z.is_finite() || !self.censor_high.is_finite() {
            return bad("parameters must be finite");
        }
        Ok(())
    }
}

const STREAM_U: u64 = 0;
const STREAM_Z: u64 = 1;
const STREAM_V: u64 = 2;
const STREAM_C: u64 = 3;
const STREAM_J: u64 = 4;
const STREAM_X: u64 = 16;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uniform on the open interval (0, 1).
fn open_uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Event time by inverse transform for a constant hazard `rate`:
/// `T = −log V / rate`.
pub fn exponential_time(v: f64, rate: f64) -> f64 {
    -v.ln() / rate
}

/// Draws from the single-outcome design.
pub fn gen_survival(cfg: &SurvSimConfig) -> Result<(Dataset, Vec<bool>)> {
    cfg.validate()?;
    gen_competing(&cfg.as_competing())
}

/// Draws competing-risks data: the all-cause time is exponential with rate
/// `Σⱼ λⱼ e^{ηⱼ}` and the cause is chosen with probability proportional to
/// each cause's rate.
pub fn gen_competing(cfg: &CompRiskSimConfig) -> Result<(Dataset, Vec<bool>)> {
    cfg.validate()?;
    let p = cfg.covariate_means.len();
    let mut xs: Vec<ChaCha8Rng> = (0..p).map(|k| stream(cfg.seed, STREAM_X + k as u64)).collect();
    let mut su = stream(cfg.seed, STREAM_U);
    let mut sz = stream(cfg.seed, STREAM_Z);
    let mut sv = stream(cfg.seed, STREAM_V);
    let mut sc = stream(cfg.seed, STREAM_C);
    let mut sj = stream(cfg.seed, STREAM_J);

    let mut records = Vec::with_capacity(cfg.n);
    let mut true_u = Vec::with_capacity(cfg.n);
    let mut rates = vec![0.0; cfg.causes.len()];
    for _ in 0..cfg.n {
        let x: Vec<f64> = (0..p)
            .map(|k| cfg.covariate_means[k] + cfg.covariate_sds[k] * normal::quantile(open_uniform(&mut xs[k])))
            .collect();
        let u = open_uniform(&mut su) < cfg.pi;
        let uf = f64::from(u8::from(u));
        let eta_z: f64 = x.iter().zip(&cfg.beta_z).map(|(a, b)| a * b).sum::<f64>() + cfg.zeta_z * uf;
        let z = open_uniform(&mut sz) < normal::cdf(eta_z);
        let zf = f64::from(u8::from(z));
        for (r, c) in rates.iter_mut().zip(&cfg.causes) {
            let lp = c.tau * zf + x.iter().zip(&c.beta).map(|(a, b)| a * b).sum::<f64>() + c.zeta * uf;
            *r = c.baseline_rate * lp.exp();
        }
        let total: f64 = rates.iter().sum();
        let t0 = exponential_time(open_uniform(&mut sv), total);
        let c = cfg.censor_low + (cfg.censor_high - cfg.censor_low) * open_uniform(&mut sc);
        let w = open_uniform(&mut sj) * total;
        let mut acc = 0.0;
        let mut cause = rates.len();
        for (j, r) in rates.iter().enumerate() {
            acc += r;
            if w < acc {
                cause = j + 1;
                break;
            }
        }
        let event = t0 <= c;
        records.push(SurvivalRecord {
            time: if event { t0 } else { c },
            status: u8::from(event),
            cause: if event { cause } else { 0 },
            treat: u8::from(z),
            covariates: x,
        });
        true_u.push(u);
    }
    let names = (1..=p).map(|k| format!("x{k}")).collect();
    Ok((Dataset::new(records, names)?, true_u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_transform_arithmetic() {
        assert!((exponential_time((-1.0f64).exp(), 1.0) - 1.0).abs() < 1e-15);
        assert!((exponential_time(0.5, 2.0) - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn standard_design_censoring_band() {
        let (d, u) = gen_survival(&SurvSimConfig::standard(1.0, 1.0, 7)).unwrap();
        assert_eq!(d.n(), 1000);
        assert_eq!(u.len(), 1000);
        let c = d.censored_fraction();
        assert!((0.25..=0.60).contains(&c), "censoring {c}");
        let (d2, _) = gen_competing(&CompRiskSimConfig::standard(1.0, 1.0, 1.0, 7)).unwrap();
        let c2 = d2.censored_fraction();
        assert!((0.20..=0.60).contains(&c2), "censoring {c2}");
        assert_eq!(d2.n_causes(), 2);
    }

    #[test]
    fn null_treatment_probability() {
        let mut cfg = SurvSimConfig::standard(0.0, 0.0, 3);
        cfg.n = 100_000;
        cfg.beta_z = vec![0.0, 0.0];
        let (d, _) = gen_survival(&cfg).unwrap();
        let pz = d.treatment().iter().filter(|&&z| z).count() as f64 / d.n() as f64;
        // 3σ of a binomial proportion at n = 1e5 is 0.0047
        assert!((pz - 0.5).abs() < 0.005, "{pz}");
    }

    fn null_competing(rates: (f64, f64), seed: u64) -> CompRiskSimConfig {
        let mut cfg = CompRiskSimConfig::standard(0.0, 0.0, 0.0, seed);
        cfg.n = 100_000;
        cfg.beta_z = vec![0.0];
        cfg.covariate_means = vec![0.0];
        cfg.covariate_sds = vec![0.0];
        for (c, r) in cfg.causes.iter_mut().zip([rates.0, rates.1]) {
            c.beta = vec![0.0];
            c.tau = 0.0;
            c.baseline_rate = r;
        }
        cfg
    }

    fn cause1_fraction(d: &Dataset) -> f64 {
        let e = d.event_counts();
        e[0] as f64 / (e[0] + e[1]) as f64
    }

    #[test]
    fn cause_split_follows_rate_ratio() {
        let (d, _) = gen_competing(&null_competing((1.0, 1.0), 11)).unwrap();
        assert!((cause1_fraction(&d) - 0.5).abs() < 0.01);
        let (d, _) = gen_competing(&null_competing((1.0, 3.0), 12)).unwrap();
        assert!((cause1_fraction(&d) - 0.25).abs() < 0.01);
    }

    #[test]
    fn null_times_are_exponential() {
        let mut cfg = null_competing((1.0, 3.0), 5);
        cfg.censor_low = 1e6;
        cfg.censor_high = 2e6;
        let (d, _) = gen_competing(&cfg).unwrap();
        let mut t = d.times();
        t.sort_by(f64::total_cmp);
        let n = t.len() as f64;
        let ks = t
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-4.0 * x).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS distance {ks}");
    }

    #[test]
    fn prefix_stability_and_determinism() {
        let mut cfg = SurvSimConfig::standard(1.0, -1.0, 9);
        cfg.n = 50;
        let (a, ua) = gen_survival(&cfg).unwrap();
        let (b, ub) = gen_survival(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ua, ub);
        cfg.n = 80;
        let (c, uc) = gen_survival(&cfg).unwrap();
        assert_eq!(&c.records()[..50], a.records());
        assert_eq!(&uc[..50], &ua[..]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = SurvSimConfig::standard(0.0, 0.0, 1);
        cfg.censor_high = 0.5;
        assert!(gen_survival(&cfg).is_err());
        let mut cfg = SurvSimConfig::standard(0.0, 0.0, 1);
        cfg.baseline_rate = 0.0;
        assert!(gen_survival(&cfg).is_err());
    }
}
