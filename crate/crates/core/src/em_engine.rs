//! EM estimation for the latent-confounder model and Louis' observed
//! information.
//!
//! Parameter layout used by [`complete_score`], [`complete_hessian`] and
//! [`louis_information`]: for each cause `j` a block
//! `[β_j (p) | τ_j | λ_j0(t_1) .. λ_j0(t_dj)]`, followed by the probit
//! coefficients `βᶻ` (intercept first when present).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coxph::{fit_cox, BaselineHazard, CoxData};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::latent_confounder::{
    branch_logdensities, hazard_lp, log_sum_exp, posterior_u, probit_lp, sample_u, PosteriorU,
    SensitivityParams,
};
use crate::linalg;
use crate::normal;
use crate::optim::FitControl;
use crate::probit::{fit_probit, fit_q2_probit};

/// Parameters of one cause-specific hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseEstimate {
    pub tau: f64,
    pub beta: Vec<f64>,
    pub baseline: BaselineHazard,
    /// Model-based covariance of `[β | τ]` from the last Cox fit, treating
    /// the offsets as known.
    #[serde(skip)]
    pub coef_cov: Option<DMatrix<f64>>,
}

impl CauseEstimate {
    pub fn new(tau: f64, beta: Vec<f64>, baseline: BaselineHazard) -> Self {
        CauseEstimate {
            tau,
            beta,
            baseline,
            coef_cov: None,
        }
    }

    /// `[β | τ]`, the coefficient order of the Cox design.
    pub fn coef(&self) -> Vec<f64> {
        let mut c = self.beta.clone();
        c.push(self.tau);
        c
    }

    /// Model-based standard error of τ from the last Cox fit.
    pub fn model_se_tau(&self) -> Option<f64> {
        self.coef_cov.as_ref().map(|c| {
            let k = c.nrows() - 1;
            c[(k, k)].max(0.0).sqrt()
        })
    }
}

/// Full parameter state θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEstimate {
    pub beta_z: Vec<f64>,
    /// Whether `beta_z[0]` is an intercept.
    pub intercept: bool,
    pub causes: Vec<CauseEstimate>,
    #[serde(skip)]
    pub beta_z_cov: Option<DMatrix<f64>>,
    /// Louis standard errors of each τ_j, when computed.
    pub se_tau: Option<Vec<f64>>,
    #[serde(skip)]
    pub tau_cov: Option<DMatrix<f64>>,
}

impl ModelEstimate {
    pub fn new(beta_z: Vec<f64>, intercept: bool, causes: Vec<CauseEstimate>) -> Self {
        ModelEstimate {
            beta_z,
            intercept,
            causes,
            beta_z_cov: None,
            se_tau: None,
            tau_cov: None,
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        self.causes.iter().map(|c| c.tau).collect()
    }

    /// Model-based τ standard errors from the last Cox fits.
    pub fn model_se_taus(&self) -> Vec<f64> {
        self.causes
            .iter()
            .map(|c| c.model_se_tau().unwrap_or(f64::NAN))
            .collect()
    }

    pub fn beta_z_se(&self) -> Option<Vec<f64>> {
        self.beta_z_cov
            .as_ref()
            .map(|c| (0..c.nrows()).map(|k| c[(k, k)].max(0.0).sqrt()).collect())
    }

    /// Largest relative change `|a - b| / (|a| + 1e-8)` over every parameter.
    pub fn max_relative_change(&self, next: &ModelEstimate) -> f64 {
        let mut worst: f64 = 0.0;
        let mut cmp = |a: f64, b: f64| worst = worst.max((a - b).abs() / (a.abs() + 1e-8));
        for (a, b) in self.beta_z.iter().zip(&next.beta_z) {
            cmp(*a, *b);
        }
        for (ca, cb) in self.causes.iter().zip(&next.causes) {
            cmp(ca.tau, cb.tau);
            for (a, b) in ca.beta.iter().zip(&cb.beta) {
                cmp(*a, *b);
            }
            if ca.baseline.event_times != cb.baseline.event_times {
                return f64::INFINITY;
            }
            for (a, b) in ca.baseline.increments.iter().zip(&cb.baseline.increments) {
                cmp(*a, *b);
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmControl {
    pub max_iter: usize,
    /// Early stop when every parameter's relative change falls below this;
    /// 0 runs exactly `max_iter` iterations.
    pub rel_tol: f64,
    pub louis_draws: usize,
    /// Seeds the Monte-Carlo draws of Louis' second term.
    pub seed: u64,
    /// Whether to attach Louis standard errors.
    pub variance: bool,
    /// Include an intercept column in the probit design.
    pub intercept: bool,
    pub fit: FitControl,
}

impl Default for EmControl {
    fn default() -> Self {
        EmControl {
            max_iter: 20,
            rel_tol: 1e-6,
            louis_draws: 1000,
            seed: 0,
            variance: true,
            intercept: true,
            fit: FitControl::default(),
        }
    }
}

impl EmControl {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 || self.louis_draws < 1 || !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "EM control needs max_iter >= 1, louis_draws >= 1, rel_tol >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-dataset quantities reused across iterations.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub data: &'a Dataset,
    pub cox: Vec<CoxData>,
    pub probit_design: DMatrix<f64>,
    pub treat: Vec<bool>,
    pub intercept: bool,
}

impl<'a> Prepared<'a> {
    pub fn new(data: &'a Dataset, intercept: bool) -> Self {
        Prepared {
            data,
            cox: (1..=data.n_causes()).map(|j| CoxData::for_cause(data, j)).collect(),
            probit_design: data.probit_design(intercept),
            treat: data.treatment(),
            intercept,
        }
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }
}

/// Cox offsets `log E[exp(ζ u_i)] = log(π̃ᵢ e^ζ + 1 − π̃ᵢ)`.
pub(crate) fn cox_offsets(probs: &[f64], zeta: f64) -> Vec<f64> {
    let em1 = zeta.exp_m1();
    probs.iter().map(|&p| (p * em1).ln_1p()).collect()
}

/// Fits of the models that ignore `U`.
pub fn no_u_fit(prep: &Prepared, fit: &FitControl) -> Result<ModelEstimate> {
    let n = prep.n();
    let zeros = vec![0.0; n];
    let ones = vec![1.0; n];
    let mut causes = Vec::with_capacity(prep.cox.len());
    for data in &prep.cox {
        let f = fit_cox(data, &zeros, &ones, &vec![0.0; data.ncoef()], fit)?;
        causes.push(cause_from_fit(f));
    }
    let pf = fit_probit(
        &prep.treat,
        &prep.probit_design,
        &zeros,
        &vec![0.0; prep.probit_design.ncols()],
        fit,
    )?;
    let mut est = ModelEstimate::new(pf.coef, prep.intercept, causes);
    est.beta_z_cov = Some(pf.cov);
    Ok(est)
}

fn cause_from_fit(f: crate::coxph::CoxFit) -> CauseEstimate {
    let p = f.coef.len() - 1;
    CauseEstimate {
        tau: f.coef[p],
        beta: f.coef[..p].to_vec(),
        baseline: f.baseline,
        coef_cov: Some(f.cov),
    }
}

/// E-step: the posterior of `U` at `theta`.
pub fn e_step(data: &Dataset, theta: &ModelEstimate, sens: &SensitivityParams) -> Result<PosteriorU> {
    posterior_u(data, theta, sens)
}

/// M-step: Cox fits with offsets `log E[e^{ζⱼu}]` per cause and the mixture
/// probit fit, each initialized at `prev`.
pub fn m_step(
    data: &Dataset,
    posterior: &PosteriorU,
    sens: &SensitivityParams,
    prev: &ModelEstimate,
) -> Result<ModelEstimate> {
    let prep = Prepared::new(data, prev.intercept);
    m_step_prepared(&prep, posterior, sens, prev, &FitControl::default())
}

pub fn m_step_prepared(
    prep: &Prepared,
    posterior: &PosteriorU,
    sens: &SensitivityParams,
    prev: &ModelEstimate,
    fit: &FitControl,
) -> Result<ModelEstimate> {
    sens.check_causes(prep.cox.len())?;
    if posterior.len() != prep.n() {
        return Err(Error::InvalidArgument("posterior length must equal n".into()));
    }
    let ones = vec![1.0; prep.n()];
    let mut causes = Vec::with_capacity(prep.cox.len());
    for (j, data) in prep.cox.iter().enumerate() {
        let offsets = cox_offsets(&posterior.probs, sens.zeta[j]);
        let f = fit_cox(data, &offsets, &ones, &prev.causes[j].coef(), fit)?;
        causes.push(cause_from_fit(f));
    }
    let pf = fit_q2_probit(
        &prep.treat,
        &prep.probit_design,
        sens.zeta_z,
        &posterior.probs,
        &prev.beta_z,
        fit,
    )?;
    let mut est = ModelEstimate::new(pf.coef, prep.intercept, causes);
    est.beta_z_cov = Some(pf.cov);
    Ok(est)
}

/// Starting value: the M-step under the prior `π̃ᵢ ≡ π`. The Cox coefficients
/// equal the fits ignoring `U` (a constant offset only rescales the
/// baseline), and the start maps onto itself under `U ↔ 1 − U`, so runs at
/// `(ζᶻ, ζ)` and `(−ζᶻ, −ζ)` follow mirrored paths.
pub fn initial_estimate(prep: &Prepared, sens: &SensitivityParams, fit: &FitControl) -> Result<ModelEstimate> {
    let no_u = no_u_fit(prep, fit)?;
    if sens.is_zero() {
        return Ok(no_u);
    }
    m_step_prepared(prep, &PosteriorU::constant(prep.n(), sens.pi), sens, &no_u, fit)
}

/// Observed-data log likelihood `Σᵢ log(π^{u=1}ᵢ + π^{u=0}ᵢ)`.
pub fn observed_loglik(data: &Dataset, theta: &ModelEstimate, sens: &SensitivityParams) -> Result<f64> {
    Ok(branch_logdensities(data, theta, sens)?
        .into_iter()
        .map(|(a, b)| log_sum_exp(a, b))
        .sum())
}

/// `E[l(θ; y, z, u) | obs]` with `u ~ Bernoulli(posterior)`: the EM
/// objective `Q₁ + Q₂ + Q₃`.
pub fn expected_complete_loglik(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    posterior: &PosteriorU,
) -> Result<f64> {
    Ok(branch_logdensities(data, theta, sens)?
        .into_iter()
        .zip(&posterior.probs)
        .map(|((a, b), &p)| p * a + (1.0 - p) * b)
        .sum())
}

/// Complete-data log likelihood with `u` observed.
pub fn complete_loglik(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    u: &[bool],
) -> Result<f64> {
    let w: Vec<f64> = u.iter().map(|&b| f64::from(u8::from(b))).collect();
    expected_complete_loglik(data, theta, sens, &PosteriorU { probs: w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub estimate: ModelEstimate,
    /// Observed log likelihood at the start and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    /// Whether the relative-change criterion was met before `max_iter`.
    pub converged: bool,
    pub posterior: PosteriorU,
}

/// Runs EM from [`initial_estimate`] and attaches Louis standard errors.
pub fn run_em(data: &Dataset, sens: &SensitivityParams, ctrl: &EmControl) -> Result<ModelEstimate> {
    Ok(run_em_traced(data, sens, ctrl)?.estimate)
}

pub fn run_em_traced(data: &Dataset, sens: &SensitivityParams, ctrl: &EmControl) -> Result<EmRun> {
    ctrl.validate()?;
    sens.check_causes(data.n_causes())?;
    let prep = Prepared::new(data, ctrl.intercept);
    let mut theta = initial_estimate(&prep, sens, &ctrl.fit)?;
    let mut trace = vec![observed_loglik(data, &theta, sens)?];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..ctrl.max_iter {
        let post = e_step(data, &theta, sens)?;
        let next = m_step_prepared(&prep, &post, sens, &theta, &ctrl.fit)?;
        let change = theta.max_relative_change(&next);
        theta = next;
        iterations += 1;
        trace.push(observed_loglik(data, &theta, sens)?);
        if ctrl.rel_tol > 0.0 && change < ctrl.rel_tol {
            converged = true;
            break;
        }
    }
    let posterior = e_step(data, &theta, sens)?;
    if ctrl.variance {
        let info = louis_information_with(&prep, &theta, sens, &posterior, ctrl.louis_draws, ctrl.seed)?;
        theta.se_tau = Some(info.se_tau);
        theta.tau_cov = Some(info.tau_cov);
    }
    Ok(EmRun {
        estimate: theta,
        loglik_trace: trace,
        iterations,
        converged,
        posterior,
    })
}

// ---------------------------------------------------------------------------
// Complete-data derivatives
// ---------------------------------------------------------------------------

/// Index map of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    p: usize,
    cause_starts: Vec<usize>,
    cause_events: Vec<usize>,
    probit_start: usize,
    probit_len: usize,
}

impl ParamLayout {
    pub fn new(theta: &ModelEstimate) -> Self {
        let p = theta.causes.first().map_or(0, |c| c.beta.len());
        let mut cause_starts = Vec::new();
        let mut cause_events = Vec::new();
        let mut at = 0;
        for c in &theta.causes {
            cause_starts.push(at);
            cause_events.push(c.baseline.len());
            at += p + 1 + c.baseline.len();
        }
        ParamLayout {
            p,
            cause_starts,
            cause_events,
            probit_start: at,
            probit_len: theta.beta_z.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.probit_start + self.probit_len
    }

    /// Index of `β_j[k]` (`j` 0-based).
    pub fn beta(&self, j: usize, k: usize) -> usize {
        self.cause_starts[j] + k
    }

    pub fn tau(&self, j: usize) -> usize {
        self.cause_starts[j] + self.p
    }

    pub fn lambda(&self, j: usize, k: usize) -> usize {
        self.cause_starts[j] + self.p + 1 + k
    }

    pub fn n_lambda(&self, j: usize) -> usize {
        self.cause_events[j]
    }

    pub fn probit(&self, k: usize) -> usize {
        self.probit_start + k
    }

    pub fn flatten(&self, theta: &ModelEstimate) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for (j, c) in theta.causes.iter().enumerate() {
            for (k, b) in c.beta.iter().enumerate() {
                v[self.beta(j, k)] = *b;
            }
            v[self.tau(j)] = c.tau;
            for (k, l) in c.baseline.increments.iter().enumerate() {
                v[self.lambda(j, k)] = *l;
            }
        }
        for (k, b) in theta.beta_z.iter().enumerate() {
            v[self.probit(k)] = *b;
        }
        v
    }

    /// Writes `v` into a copy of `template` (event times are kept).
    pub fn unflatten(&self, template: &ModelEstimate, v: &DVector<f64>) -> ModelEstimate {
        let mut t = template.clone();
        for (j, c) in t.causes.iter_mut().enumerate() {
            for k in 0..c.beta.len() {
                c.beta[k] = v[self.beta(j, k)];
            }
            c.tau = v[self.tau(j)];
            for k in 0..c.baseline.increments.len() {
                c.baseline.increments[k] = v[self.lambda(j, k)];
            }
        }
        for k in 0..t.beta_z.len() {
            t.beta_z[k] = v[self.probit(k)];
        }
        t
    }
}

/// Per-record pieces of the score and Hessian for both values of `u`.
struct ScoreParts {
    layout: ParamLayout,
    /// Cox design rows `[x | z]`.
    cox_rows: Vec<Vec<f64>>,
    probit_rows: Vec<Vec<f64>>,
    causes: Vec<CauseParts>,
    /// `(d1, d2)` of the probit log likelihood at u = 0 and u = 1.
    probit_d: Vec<[(f64, f64); 2]>,
}

struct CauseParts {
    /// `exp(η_ij + ζ_j u)` for u = 0, 1.
    risk: Vec<[f64; 2]>,
    cum: Vec<f64>,
    event: Vec<bool>,
    /// Number of event times ≤ tᵢ, so record i is at risk at times `0..bucket[i]`.
    bucket: Vec<usize>,
    deaths: Vec<f64>,
    lambda: Vec<f64>,
}

impl ScoreParts {
    fn new(data: &Dataset, theta: &ModelEstimate, sens: &SensitivityParams) -> Result<Self> {
        sens.check_causes(theta.causes.len())?;
        let layout = ParamLayout::new(theta);
        let recs = data.records();
        let cox_rows = recs
            .iter()
            .map(|r| {
                let mut row = r.covariates.clone();
                row.push(f64::from(r.treat));
                row
            })
            .collect();
        let probit_rows = recs
            .iter()
            .map(|r| {
                let mut row = Vec::with_capacity(theta.beta_z.len());
                if theta.intercept {
                    row.push(1.0);
                }
                row.extend_from_slice(&r.covariates);
                row
            })
            .collect();
        let probit_d = recs
            .iter()
            .map(|r| {
                let eta = probit_lp(theta, &r.covariates);
                [
                    normal::probit_derivs(r.treated(), eta),
                    normal::probit_derivs(r.treated(), eta + sens.zeta_z),
                ]
            })
            .collect();
        let times = data.times();
        let mut causes = Vec::with_capacity(theta.causes.len());
        for (j, c) in theta.causes.iter().enumerate() {
            let bl = &c.baseline;
            let mut deaths = vec![0.0; bl.len()];
            let mut event = Vec::with_capacity(recs.len());
            let mut risk = Vec::with_capacity(recs.len());
            for (i, r) in recs.iter().enumerate() {
                let ev = r.is_event_of(j + 1);
                if ev {
                    let k = bl.index_of(r.time).ok_or(Error::MissingBaselineMass {
                        record: i,
                        cause: j + 1,
                        time: r.time,
                    })?;
                    deaths[k] += 1.0;
                }
                event.push(ev);
                let eta = hazard_lp(theta, j, r);
                risk.push([eta.exp(), (eta + sens.zeta[j]).exp()]);
            }
            let bucket = times
                .iter()
                .map(|&t| bl.event_times.partition_point(|&s| s <= t))
                .collect();
            causes.push(CauseParts {
                risk,
                cum: bl.cumulative_at(&times),
                event,
                bucket,
                deaths,
                lambda: bl.increments.clone(),
            });
        }
        Ok(ScoreParts {
            layout,
            cox_rows,
            probit_rows,
            causes,
            probit_d,
        })
    }

    /// Score with record i contributing `wᵢ s(u=1) + (1 − wᵢ) s(u=0)`.
    fn score(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let lay = &self.layout;
        for (j, cp) in self.causes.iter().enumerate() {
            let d = cp.lambda.len();
            let mut risk_bucket = vec![0.0; d + 1];
            let tau_idx = lay.tau(j);
            let base = lay.beta(j, 0);
            for (i, row) in self.cox_rows.iter().enumerate() {
                let e = w[i] * cp.risk[i][1] + (1.0 - w[i]) * cp.risk[i][0];
                let resid = f64::from(u8::from(cp.event[i])) - cp.cum[i] * e;
                for (k, x) in row.iter().enumerate() {
                    out[base + k] += x * resid;
                }
                risk_bucket[cp.bucket[i]] += e;
            }
            debug_assert_eq!(base + row_len(&self.cox_rows) - 1, tau_idx);
            // at risk at event time k ⇔ bucket > k
            let mut suffix = 0.0;
            for k in (0..d).rev() {
                suffix += risk_bucket[k + 1];
                out[lay.lambda(j, k)] = cp.deaths[k] / cp.lambda[k] - suffix;
            }
        }
        let pbase = lay.probit(0);
        for (i, row) in self.probit_rows.iter().enumerate() {
            let g = w[i] * self.probit_d[i][1].0 + (1.0 - w[i]) * self.probit_d[i][0].0;
            for (k, x) in row.iter().enumerate() {
                out[pbase + k] += g * x;
            }
        }
    }

    /// Hessian with the same per-record mixing as [`ScoreParts::score`].
    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let lay = &self.layout;
        let dim = lay.dim();
        let mut h = DMatrix::zeros(dim, dim);
        for (j, cp) in self.causes.iter().enumerate() {
            let d = cp.lambda.len();
            let q = lay.p + 1;
            let base = lay.beta(j, 0);
            let mut cross_bucket = vec![vec![0.0; q]; d + 1];
            for (i, row) in self.cox_rows.iter().enumerate() {
                let e = w[i] * cp.risk[i][1] + (1.0 - w[i]) * cp.risk[i][0];
                let f = cp.cum[i] * e;
                for a in 0..q {
                    for b in 0..=a {
                        h[(base + a, base + b)] -= row[a] * row[b] * f;
                    }
                    cross_bucket[cp.bucket[i]][a] += row[a] * e;
                }
            }
            for a in 0..q {
                for b in 0..a {
                    h[(base + b, base + a)] = h[(base + a, base + b)];
                }
            }
            let mut suffix = vec![0.0; q];
            for k in (0..d).rev() {
                let li = lay.lambda(j, k);
                for a in 0..q {
                    suffix[a] += cross_bucket[k + 1][a];
                    h[(base + a, li)] = -suffix[a];
                    h[(li, base + a)] = -suffix[a];
                }
                h[(li, li)] = -cp.deaths[k] / (cp.lambda[k] * cp.lambda[k]);
            }
        }
        let pbase = lay.probit(0);
        for (i, row) in self.probit_rows.iter().enumerate() {
            let c = w[i] * self.probit_d[i][1].1 + (1.0 - w[i]) * self.probit_d[i][0].1;
            for a in 0..row.len() {
                for b in 0..=a {
                    h[(pbase + a, pbase + b)] += c * row[a] * row[b];
                }
            }
        }
        let k = lay.probit_len;
        for a in 0..k {
            for b in 0..a {
                h[(pbase + b, pbase + a)] = h[(pbase + a, pbase + b)];
            }
        }
        h
    }
}

fn row_len(rows: &[Vec<f64>]) -> usize {
    rows.first().map_or(0, Vec::len)
}

fn bool_weights(u: &[bool]) -> Vec<f64> {
    u.iter().map(|&b| f64::from(u8::from(b))).collect()
}

fn check_u(data: &Dataset, len: usize) -> Result<()> {
    if len != data.n() {
        return Err(Error::InvalidArgument(format!("u has {} entries for {} records", len, data.n())));
    }
    Ok(())
}

/// Score of the complete-data log likelihood with `u` observed.
pub fn complete_score(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    u: &[bool],
) -> Result<DVector<f64>> {
    check_u(data, u.len())?;
    let parts = ScoreParts::new(data, theta, sens)?;
    let mut out = DVector::zeros(parts.layout.dim());
    parts.score(&bool_weights(u), out.as_mut_slice());
    Ok(out)
}

/// Hessian of the complete-data log likelihood with `u` observed.
pub fn complete_hessian(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    u: &[bool],
) -> Result<DMatrix<f64>> {
    check_u(data, u.len())?;
    Ok(ScoreParts::new(data, theta, sens)?.hessian(&bool_weights(u)))
}

/// `E[s | obs]`; each record's score is affine in its own `(1, e^{ζu})`
/// pair, so the conditional mean is the posterior mixture.
pub fn expected_score(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    posterior: &PosteriorU,
) -> Result<DVector<f64>> {
    check_u(data, posterior.len())?;
    let parts = ScoreParts::new(data, theta, sens)?;
    let mut out = DVector::zeros(parts.layout.dim());
    parts.score(&posterior.probs, out.as_mut_slice());
    Ok(out)
}

/// `E[l̈ | obs]`, the posterior mixture of per-record Hessians.
pub fn expected_hessian(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    posterior: &PosteriorU,
) -> Result<DMatrix<f64>> {
    check_u(data, posterior.len())?;
    Ok(ScoreParts::new(data, theta, sens)?.hessian(&posterior.probs))
}

/// Monte-Carlo estimate of `E[s sᵀ | obs]` with entrywise standard errors.
#[derive(Debug, Clone)]
pub struct OuterProductEstimate {
    pub mean: DMatrix<f64>,
    pub std_err: Option<DMatrix<f64>>,
    pub draws: usize,
}

fn score_draw_matrix(
    parts: &ScoreParts,
    posterior: &PosteriorU,
    draws: usize,
    seed: u64,
) -> DMatrix<f64> {
    let dim = parts.layout.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // column-major: one column per draw
    let mut cols = DMatrix::zeros(dim, draws);
    for k in 0..draws {
        let u = bool_weights(&sample_u(posterior, &mut rng));
        parts.score(&u, cols.column_mut(k).as_mut_slice());
    }
    cols
}

/// Averages `s(u) s(u)ᵀ` over `draws` whole-vector samples of `U`.
pub fn score_outer_mc(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    posterior: &PosteriorU,
    draws: usize,
    seed: u64,
    with_std_err: bool,
) -> Result<OuterProductEstimate> {
    check_u(data, posterior.len())?;
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be positive".into()));
    }
    let parts = ScoreParts::new(data, theta, sens)?;
    let s = score_draw_matrix(&parts, posterior, draws, seed);
    let k = draws as f64;
    let mean = (&s * s.transpose()) / k;
    let std_err = with_std_err.then(|| {
        let sq = s.map(|v| v * v);
        let second = (&sq * sq.transpose()) / k;
        DMatrix::from_fn(mean.nrows(), mean.ncols(), |a, b| {
            let var = (second[(a, b)] - mean[(a, b)].powi(2)).max(0.0);
            (var / k).sqrt()
        })
    });
    Ok(OuterProductEstimate { mean, std_err, draws })
}

#[derive(Debug, Clone)]
pub struct LouisInfo {
    pub information: DMatrix<f64>,
    /// `E[−l̈ | obs]`.
    pub complete: DMatrix<f64>,
    /// Monte-Carlo `E[s sᵀ | obs]`.
    pub missing: DMatrix<f64>,
    pub se_tau: Vec<f64>,
    pub tau_cov: DMatrix<f64>,
    pub layout: ParamLayout,
}

/// Louis' observed information `E[−l̈ | obs] − E[s sᵀ | obs]` at `theta`,
/// which should be the EM fixed point.
pub fn louis_information(
    data: &Dataset,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    ctrl: &EmControl,
) -> Result<LouisInfo> {
    let prep = Prepared::new(data, theta.intercept);
    let post = posterior_u(data, theta, sens)?;
    louis_information_with(&prep, theta, sens, &post, ctrl.louis_draws, ctrl.seed)
}

fn louis_information_with(
    prep: &Prepared,
    theta: &ModelEstimate,
    sens: &SensitivityParams,
    posterior: &PosteriorU,
    draws: usize,
    seed: u64,
) -> Result<LouisInfo> {
    let parts = ScoreParts::new(prep.data, theta, sens)?;
    let complete = -parts.hessian(&posterior.probs);
    let s = score_draw_matrix(&parts, posterior, draws, seed);
    let missing = (&s * s.transpose()) / draws as f64;
    let information = linalg::symmetrize(&complete - &missing);
    let inv = linalg::inverse_spd(&information, "Louis information")?;
    let m = theta.causes.len();
    let idx: Vec<usize> = (0..m).map(|j| parts.layout.tau(j)).collect();
    let tau_cov = DMatrix::from_fn(m, m, |a, b| inv[(idx[a], idx[b])]);
    let se_tau = (0..m)
        .map(|j| {
            let v = tau_cov[(j, j)];
            if v > 0.0 {
                Ok(v.sqrt())
            } else {
                Err(Error::Singular {
                    what: "Louis information",
                    min_eigenvalue: linalg::min_eigenvalue(&information),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LouisInfo {
        information,
        complete,
        missing,
        se_tau,
        tau_cov,
        layout: parts.layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use rand::Rng;

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / b.abs().max(scale)
    }

    #[test]
    fn score_and_hessian_match_finite_differences() {
        for seed in 0..4 {
            let m = 1 + (seed as usize % 2);
            let data = testutil::dataset(25, m, 100 + seed);
            let mut rng = testutil::rng(seed);
            let theta = testutil::theta(&data, true, &mut rng);
            let sens = testutil::sens(m, &mut rng);
            let u: Vec<bool> = (0..data.n()).map(|_| rng.random::<bool>()).collect();
            let lay = ParamLayout::new(&theta);
            let v0 = lay.flatten(&theta);
            let score = complete_score(&data, &theta, &sens, &u).unwrap();
            let hess = complete_hessian(&data, &theta, &sens, &u).unwrap();
            for k in 0..lay.dim() {
                let h = 1e-6 * v0[k].abs().max(1e-2);
                let at = |d: f64| {
                    let mut v = v0.clone();
                    v[k] += d;
                    lay.unflatten(&theta, &v)
                };
                let fd = (complete_loglik(&data, &at(h), &sens, &u).unwrap()
                    - complete_loglik(&data, &at(-h), &sens, &u).unwrap())
                    / (2.0 * h);
                assert!(rel_err(score[k], fd, 1.0) < 1e-5, "score {k}: {} vs {fd}", score[k]);
                let col = (complete_score(&data, &at(h), &sens, &u).unwrap()
                    - complete_score(&data, &at(-h), &sens, &u).unwrap())
                    / (2.0 * h);
                for r in 0..lay.dim() {
                    assert!(
                        rel_err(hess[(r, k)], col[r], 1.0) < 1e-4,
                        "hessian ({r},{k}): {} vs {}",
                        hess[(r, k)],
                        col[r]
                    );
                }
            }
            assert_eq!(hess, hess.transpose());
        }
    }

    #[test]
    fn hessian_structure() {
        let data = testutil::dataset(30, 1, 5);
        let mut rng = testutil::rng(5);
        let theta = testutil::theta(&data, true, &mut rng);
        let sens = testutil::sens(1, &mut rng);
        let u = vec![true; data.n()];
        let h = complete_hessian(&data, &theta, &sens, &u).unwrap();
        let lay = ParamLayout::new(&theta);
        let deaths = data.event_counts()[0] as f64;
        let mut sum = 0.0;
        for a in 0..lay.n_lambda(0) {
            for b in 0..lay.n_lambda(0) {
                if a != b {
                    assert_eq!(h[(lay.lambda(0, a), lay.lambda(0, b))], 0.0);
                }
            }
            let l = theta.causes[0].baseline.increments[a];
            sum += h[(lay.lambda(0, a), lay.lambda(0, a))] * l * l;
        }
        // continuous times: one death per event time
        assert!((sum + deaths).abs() < 1e-9);
        let k = theta.beta_z.len();
        let pb = h.view((lay.probit(0), lay.probit(0)), (k, k)).into_owned();
        assert!(linalg::min_eigenvalue(&(-pb)) >= -1e-12);
        // no cross terms between outcome and treatment blocks
        for r in 0..lay.probit(0) {
            for c in 0..k {
                assert_eq!(h[(r, lay.probit(c))], 0.0);
            }
        }
    }

    #[test]
    fn score_ignores_u_without_sensitivity() {
        let data = testutil::dataset(20, 2, 8);
        let mut rng = testutil::rng(8);
        let theta = testutil::theta(&data, true, &mut rng);
        let sens = SensitivityParams::zero(2);
        let a = complete_score(&data, &theta, &sens, &vec![false; 20]).unwrap();
        let b = complete_score(&data, &theta, &sens, &vec![true; 20]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_second_moment_matches_enumeration() {
        let data = testutil::dataset(5, 1, 21);
        let mut rng = testutil::rng(21);
        let theta = testutil::theta(&data, true, &mut rng);
        let sens = SensitivityParams::new(1.0, vec![-1.5], 0.5).unwrap();
        let post = posterior_u(&data, &theta, &sens).unwrap();
        let dim = ParamLayout::new(&theta).dim();
        let mut exact = DMatrix::zeros(dim, dim);
        for mask in 0u32..32 {
            let u: Vec<bool> = (0..5).map(|i| mask >> i & 1 == 1).collect();
            let w: f64 = u
                .iter()
                .zip(&post.probs)
                .map(|(&b, &p)| if b { p } else { 1.0 - p })
                .product();
            let s = complete_score(&data, &theta, &sens, &u).unwrap();
            exact += w * &s * s.transpose();
        }
        let mc = score_outer_mc(&data, &theta, &sens, &post, 1000, 3, true).unwrap();
        let se = mc.std_err.unwrap();
        for r in 0..dim {
            for c in 0..dim {
                let diff = (mc.mean[(r, c)] - exact[(r, c)]).abs();
                assert!(
                    diff <= 3.0 * se[(r, c)] + 1e-9 * exact[(r, c)].abs().max(1.0),
                    "({r},{c}): {} vs {} (se {})",
                    mc.mean[(r, c)],
                    exact[(r, c)],
                    se[(r, c)]
                );
            }
        }
    }

    #[test]
    fn zero_sensitivity_is_the_no_u_fit() {
        let data = testutil::dataset(200, 2, 31);
        let prep = Prepared::new(&data, true);
        let ctrl = EmControl {
            max_iter: 1,
            rel_tol: 0.0,
            ..EmControl::default()
        };
        let no_u = no_u_fit(&prep, &ctrl.fit).unwrap();
        let em = run_em(&data, &SensitivityParams::zero(2), &ctrl).unwrap();
        assert!(no_u.max_relative_change(&em) < 1e-10);
        // Louis SE reduces to the model-based Cox SE
        for (j, se) in em.se_tau.as_ref().unwrap().iter().enumerate() {
            let model = no_u.causes[j].model_se_tau().unwrap();
            assert!((se - model).abs() < 1e-3 * model, "{se} vs {model}");
        }
        let post = e_step(&data, &em, &SensitivityParams::zero(2)).unwrap();
        assert!(post.probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn zero_sensitivity_louis_has_no_missing_information() {
        let data = testutil::dataset(60, 1, 32);
        let sens = SensitivityParams::zero(1);
        let ctrl = EmControl::default();
        let em = run_em(&data, &sens, &ctrl).unwrap();
        let info = louis_information(&data, &em, &sens, &ctrl).unwrap();
        // the score no longer depends on u, so E[s sᵀ] = E[s] E[s]ᵀ ≈ 0 at the MLE
        assert!(info.missing.amax() < 1e-8 * info.complete.amax());
    }

    #[test]
    fn degenerate_posteriors() {
        let data = testutil::dataset(80, 1, 41);
        let prep = Prepared::new(&data, true);
        let fit = FitControl::default();
        let sens = SensitivityParams::new(0.7, vec![-1.2], 0.5).unwrap();
        let no_u = no_u_fit(&prep, &fit).unwrap();
        let zero = m_step_prepared(&prep, &PosteriorU::constant(80, 0.0), &sens, &no_u, &fit).unwrap();
        assert!(no_u.max_relative_change(&zero) < 1e-9);

        let one = m_step_prepared(&prep, &PosteriorU::constant(80, 1.0), &sens, &no_u, &fit).unwrap();
        let off = vec![-1.2; 80];
        let cox = fit_cox(&prep.cox[0], &off, &vec![1.0; 80], &no_u.causes[0].coef(), &fit).unwrap();
        let pf = fit_probit(&prep.treat, &prep.probit_design, &vec![0.7; 80], &no_u.beta_z, &fit).unwrap();
        for (a, b) in one.causes[0].coef().iter().zip(&cox.coef) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in one.beta_z.iter().zip(&pf.coef) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn m_step_is_stationary_and_monotone() {
        let data = testutil::dataset(50, 2, 51);
        let mut rng = testutil::rng(51);
        let sens = testutil::sens(2, &mut rng);
        let prep = Prepared::new(&data, true);
        let fit = FitControl::default();
        let prev = initial_estimate(&prep, &sens, &fit).unwrap();
        let post = PosteriorU {
            probs: (0..50).map(|_| rng.random_range(0.05..0.95)).collect(),
        };
        let next = m_step_prepared(&prep, &post, &sens, &prev, &fit).unwrap();
        let before = expected_complete_loglik(&data, &prev, &sens, &post).unwrap();
        let after = expected_complete_loglik(&data, &next, &sens, &post).unwrap();
        assert!(after >= before - 1e-9);
        let s = expected_score(&data, &next, &sens, &post).unwrap();
        assert!(s.amax() < 1e-6, "{}", s.amax());
    }

    #[test]
    fn em_ascends() {
        for seed in 0..5 {
            let m = 1 + (seed as usize % 2);
            let data = testutil::dataset(60 + 20 * seed as usize, m, 60 + seed);
            let mut rng = testutil::rng(seed);
            let sens = testutil::sens(m, &mut rng);
            let ctrl = EmControl {
                rel_tol: 0.0,
                variance: false,
                ..EmControl::default()
            };
            let run = run_em_traced(&data, &sens, &ctrl).unwrap();
            assert_eq!(run.iterations, 20);
            for w in run.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
            }
            let m = run.posterior.mean();
            assert!(m > 0.0 && m < 1.0);
        }
    }

    #[test]
    fn fixed_point_after_convergence() {
        let data = testutil::dataset(150, 1, 71);
        let sens = SensitivityParams::new(1.0, vec![1.0], 0.5).unwrap();
        let ctrl = EmControl {
            max_iter: 500,
            variance: false,
            ..EmControl::default()
        };
        let run = run_em_traced(&data, &sens, &ctrl).unwrap();
        assert!(run.converged);
        let theta = run.estimate;
        let post = e_step(&data, &theta, &sens).unwrap();
        let next = m_step(&data, &post, &sens, &theta).unwrap();
        assert!(theta.max_relative_change(&next) < 10.0 * ctrl.rel_tol);
    }

    #[test]
    fn observed_loglik_matches_branches_and_permutation() {
        let data = testutil::dataset(30, 1, 81);
        let mut rng = testutil::rng(81);
        let theta = testutil::theta(&data, true, &mut rng);
        let sens = testutil::sens(1, &mut rng);
        let total = observed_loglik(&data, &theta, &sens).unwrap();
        let mut records = data.records().to_vec();
        records.reverse();
        let rev = Dataset::new(records, data.covariate_names().to_vec()).unwrap();
        let total_rev = observed_loglik(&rev, &theta, &sens).unwrap();
        assert!((total - total_rev).abs() < 1e-9 * total.abs());
        let post = e_step(&data, &theta, &sens).unwrap();
        let post_rev = e_step(&rev, &theta, &sens).unwrap();
        let mut back = post_rev.probs.clone();
        back.reverse();
        assert_eq!(back, post.probs);
    }

    #[test]
    fn layout_round_trip() {
        let data = testutil::dataset(40, 2, 91);
        let theta = testutil::theta(&data, false, &mut testutil::rng(91));
        let lay = ParamLayout::new(&theta);
        let counts = data.event_counts();
        assert_eq!(lay.dim(), 2 * (data.p() + 1) + counts[0] + counts[1] + data.p());
        assert_eq!(lay.unflatten(&theta, &lay.flatten(&theta)), theta);
    }
}
