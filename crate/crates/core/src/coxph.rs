//! Cox proportional hazards with offsets and case weights.
//!
//! Ties use the Breslow convention throughout: every subject at risk at a
//! tied time shares one denominator, and the baseline has one jump per
//! distinct event time.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
pub use crate::optim::FitControl;
use crate::optim::{check_flat_directions, newton_maximize, Derivs};

/// Discrete baseline hazard: jumps `increments[k]` at `event_times[k]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub event_times: Vec<f64>,
    pub increments: Vec<f64>,
}

impl BaselineHazard {
    pub fn len(&self) -> usize {
        self.event_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_times.is_empty()
    }

    /// Λ₀(t): sum of increments at event times ≤ t; constant past the last one.
    pub fn cumulative(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&s| s <= t);
        self.increments[..k].iter().sum()
    }

    /// λ₀(t) when `t` is exactly one of the event times.
    pub fn increment_at(&self, t: f64) -> Option<f64> {
        self.index_of(t).map(|k| self.increments[k])
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.event_times
            .binary_search_by(|s| s.partial_cmp(&t).expect("finite event times"))
            .ok()
    }

    /// Cumulative hazard evaluated at each of `times`, in O((n + d) log n).
    pub fn cumulative_at(&self, times: &[f64]) -> Vec<f64> {
        let mut prefix = Vec::with_capacity(self.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &inc in &self.increments {
            acc += inc;
            prefix.push(acc);
        }
        times
            .iter()
            .map(|&t| prefix[self.event_times.partition_point(|&s| s <= t)])
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        BaselineHazard {
            event_times: self.event_times.clone(),
            increments: self.increments.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Outcome data for a single cause: times, cause-specific event flags, design.
#[derive(Debug, Clone)]
pub struct CoxData {
    times: Vec<f64>,
    events: Vec<bool>,
    design: DMatrix<f64>,
    /// Indices sorted by decreasing time.
    order: Vec<usize>,
    /// `order[groups[g]..groups[g + 1]]` share one time.
    groups: Vec<usize>,
}

impl CoxData {
    pub fn new(times: Vec<f64>, events: Vec<bool>, design: DMatrix<f64>) -> Result<Self> {
        let n = times.len();
        if events.len() != n || design.nrows() != n {
            return Err(Error::InvalidArgument(format!(
                "length mismatch: {} times, {} events, {} design rows",
                n,
                events.len(),
                design.nrows()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("times must be finite".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).expect("finite"));
        let mut groups = vec![0];
        for k in 1..n {
            if times[order[k]] != times[order[k - 1]] {
                groups.push(k);
            }
        }
        groups.push(n);
        Ok(CoxData {
            times,
            events,
            design,
            order,
            groups,
        })
    }

    /// Cause `j` (1-based) of `data` with design `[x | z]`.
    pub fn for_cause(data: &Dataset, j: usize) -> Self {
        let events = data.records().iter().map(|r| r.is_event_of(j)).collect();
        CoxData::new(data.times(), events, data.cox_design()).expect("validated dataset")
    }

    /// Cause `j` with the treatment indicator as the only covariate.
    pub fn treatment_only(data: &Dataset, j: usize) -> Self {
        let events = data.records().iter().map(|r| r.is_event_of(j)).collect();
        let design = DMatrix::from_iterator(
            data.n(),
            1,
            data.records().iter().map(|r| f64::from(r.treat)),
        );
        CoxData::new(data.times(), events, design).expect("validated dataset")
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn ncoef(&self) -> usize {
        self.design.ncols()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Distinct event times in increasing order.
    pub fn event_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .groups
            .windows(2)
            .filter(|g| self.order[g[0]..g[1]].iter().any(|&i| self.events[i]))
            .map(|g| self.times[self.order[g[0]]])
            .collect();
        out.reverse();
        out
    }

    fn linear_predictor(&self, coef: &[f64], offsets: &[f64]) -> Result<Vec<f64>> {
        self.check_lengths(coef, offsets, None)?;
        let beta = DVector::from_column_slice(coef);
        let eta = &self.design * beta;
        eta.iter()
            .zip(offsets)
            .enumerate()
            .map(|(i, (e, o))| {
                let v = e + o;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(i))
                }
            })
            .collect()
    }

    fn check_lengths(&self, coef: &[f64], offsets: &[f64], weights: Option<&[f64]>) -> Result<()> {
        if coef.len() != self.ncoef() {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                self.ncoef(),
                coef.len()
            )));
        }
        if offsets.len() != self.n() {
            return Err(Error::InvalidArgument("offsets length must equal n".into()));
        }
        if let Some(w) = weights {
            if w.len() != self.n() {
                return Err(Error::InvalidArgument("weights length must equal n".into()));
            }
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub coef: Vec<f64>,
    /// Inverse of the negative Hessian of the log partial likelihood.
    pub cov: DMatrix<f64>,
    pub baseline: BaselineHazard,
    pub loglik: f64,
    pub iterations: usize,
}

impl CoxFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|k| self.cov[(k, k)].max(0.0).sqrt()).collect()
    }
}

fn derivs(
    data: &CoxData,
    coef: &[f64],
    offsets: &[f64],
    weights: &[f64],
    second_order: bool,
) -> Result<Derivs> {
    data.check_lengths(coef, offsets, Some(weights))?;
    let q = data.ncoef();
    let eta = data.linear_predictor(coef, offsets)?;
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut loglik = 0.0;
    let mut grad = DVector::zeros(q);
    let mut hess = DMatrix::zeros(q, q);
    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(q);
    let mut s2 = DMatrix::<f64>::zeros(q, q);

    for g in data.groups.windows(2) {
        let members = &data.order[g[0]..g[1]];
        for &i in members {
            let r = weights[i] * (eta[i] - shift).exp();
            if r == 0.0 {
                continue;
            }
            s0 += r;
            let x = data.design.row(i);
            for a in 0..q {
                s1[a] += r * x[a];
                if second_order {
                    for b in 0..=a {
                        s2[(a, b)] += r * x[a] * x[b];
                    }
                }
            }
        }
        for &i in members {
            let w = weights[i];
            if !data.events[i] || w == 0.0 {
                continue;
            }
            loglik += w * (eta[i] - shift - s0.ln());
            let x = data.design.row(i);
            for a in 0..q {
                grad[a] += w * (x[a] - s1[a] / s0);
            }
            if second_order {
                for a in 0..q {
                    for b in 0..=a {
                        let v = w * (s2[(a, b)] / s0 - s1[a] * s1[b] / (s0 * s0));
                        hess[(a, b)] -= v;
                    }
                }
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

/// Weighted log partial likelihood with linear predictor `x'coef + offset`.
pub fn cox_loglik(data: &CoxData, coef: &[f64], offsets: &[f64], weights: &[f64]) -> Result<f64> {
    Ok(derivs(data, coef, offsets, weights, false)?.loglik)
}

/// Gradient of [`cox_loglik`] in `coef`.
pub fn cox_gradient(
    data: &CoxData,
    coef: &[f64],
    offsets: &[f64],
    weights: &[f64],
) -> Result<Vec<f64>> {
    Ok(derivs(data, coef, offsets, weights, false)?.grad.iter().copied().collect())
}

/// Hessian of [`cox_loglik`] in `coef`.
pub fn cox_hessian(
    data: &CoxData,
    coef: &[f64],
    offsets: &[f64],
    weights: &[f64],
) -> Result<DMatrix<f64>> {
    Ok(derivs(data, coef, offsets, weights, true)?.hess)
}

/// Maximizes the weighted partial likelihood by Newton–Raphson with step halving.
pub fn fit_cox(
    data: &CoxData,
    offsets: &[f64],
    weights: &[f64],
    init: &[f64],
    ctrl: &FitControl,
) -> Result<CoxFit> {
    data.check_lengths(init, offsets, Some(weights))?;
    if !(0..data.n()).any(|i| data.events[i] && weights[i] > 0.0) {
        return Err(Error::InvalidArgument("no events with positive weight".into()));
    }
    let objective = |c: &[f64]| derivs(data, c, offsets, weights, true);
    let (coef, d, iterations) = newton_maximize(init, objective, ctrl, "Cox partial likelihood")?;
    let cov = linalg::inverse_spd(&(-&d.hess), "Cox information")?;
    check_flat_directions(&cov, &data.design, ctrl, "Cox partial likelihood")?;
    let baseline = breslow_baseline(data, &coef, offsets, weights)?;
    Ok(CoxFit {
        coef,
        cov,
        baseline,
        loglik: d.loglik,
        iterations,
    })
}

/// Breslow increments `dW(t) / Σ_{t_k ≥ t} w_k exp(x_k'coef + o_k)` at every
/// distinct time with positive weighted events.
pub fn breslow_baseline(
    data: &CoxData,
    coef: &[f64],
    offsets: &[f64],
    weights: &[f64],
) -> Result<BaselineHazard> {
    data.check_lengths(coef, offsets, Some(weights))?;
    let eta = data.linear_predictor(coef, offsets)?;
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut times = Vec::new();
    let mut incs = Vec::new();
    for g in data.groups.windows(2) {
        let members = &data.order[g[0]..g[1]];
        let mut dw = 0.0;
        for &i in members {
            s0 += weights[i] * (eta[i] - shift).exp();
            if data.events[i] {
                dw += weights[i];
            }
        }
        if dw > 0.0 {
            let t = data.times[members[0]];
            if s0 <= 0.0 {
                return Err(Error::EmptyRiskSet(t));
            }
            times.push(t);
            incs.push(dw / s0 * (-shift).exp());
        }
    }
    times.reverse();
    incs.reverse();
    Ok(BaselineHazard {
        event_times: times,
        increments: incs,
    })
}

/// Per-subject score residuals (unweighted), rows of an n × q matrix.
pub fn score_residuals(
    data: &CoxData,
    coef: &[f64],
    offsets: &[f64],
    weights: &[f64],
) -> Result<DMatrix<f64>> {
    data.check_lengths(coef, offsets, Some(weights))?;
    let q = data.ncoef();
    let n = data.n();
    let eta = data.linear_predictor(coef, offsets)?;
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let risk: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    // Per distinct-time group, in decreasing time: dW/S0 and the weighted mean x̄.
    let ngroups = data.groups.len() - 1;
    let mut hazard = vec![0.0; ngroups];
    let mut xbar = vec![DVector::<f64>::zeros(q); ngroups];
    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(q);
    for (gi, g) in data.groups.windows(2).enumerate() {
        let members = &data.order[g[0]..g[1]];
        let mut dw = 0.0;
        for &i in members {
            let r = weights[i] * risk[i];
            s0 += r;
            s1 += data.design.row(i).transpose() * r;
            if data.events[i] {
                dw += weights[i];
            }
        }
        if s0 > 0.0 {
            xbar[gi] = &s1 / s0;
            hazard[gi] = dw / s0;
        }
    }

    let mut resid = DMatrix::zeros(n, q);
    // Walk in increasing time, accumulating Σ dW/S0 and Σ dW x̄/S0 over t_k ≤ t.
    let mut cum_h = 0.0;
    let mut cum_hx = DVector::<f64>::zeros(q);
    for gi in (0..ngroups).rev() {
        cum_h += hazard[gi];
        cum_hx += &xbar[gi] * hazard[gi];
        let g = &data.groups[gi..gi + 2];
        for &i in &data.order[g[0]..g[1]] {
            let x = data.design.row(i).transpose();
            let mut r = (&x * cum_h - &cum_hx) * (-risk[i]);
            if data.events[i] {
                r += &x - &xbar[gi];
            }
            resid.set_row(i, &r.transpose());
        }
    }
    Ok(resid)
}

/// Robust variance `A⁻¹ B A⁻¹`, `A` the negative Hessian of the weighted
/// partial likelihood and `B = Σ (w_i r_i)(w_i r_i)'` over score residuals.
pub fn sandwich_variance(
    data: &CoxData,
    fit: &CoxFit,
    offsets: &[f64],
    weights: &[f64],
) -> Result<DMatrix<f64>> {
    let a = -cox_hessian(data, &fit.coef, offsets, weights)?;
    let a_inv = linalg::inverse_spd(&a, "sandwich bread")?;
    let mut resid = score_residuals(data, &fit.coef, offsets, weights)?;
    for (i, &w) in weights.iter().enumerate() {
        resid.row_mut(i).scale_mut(w);
    }
    let meat = resid.transpose() * &resid;
    let v = &a_inv * meat * &a_inv;
    Ok(linalg::symmetrize(v))
}
