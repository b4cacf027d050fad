//! Sweeps of the sensitivity parameters over a lattice, τ̂ / SE / t surfaces,
//! and level-set contours of those surfaces.
//!
//! Lattice order is lexicographic with `ζᶻ` outermost and `ζ₁ .. ζ_m` inner
//! (`ζ_m` fastest).

mod contour;
mod emit;

pub use contour::{extract_contours, ContourSet, Field};
pub use emit::{read_grid_csv, write_contours_json, write_grid_csv, write_grid_json, write_svg, SvgStyle};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coxph::fit_cox;
use crate::dataset::Dataset;
use crate::em_engine::{no_u_fit, run_em, EmControl, Prepared};
use crate::error::{Error, Result};
use crate::ipw::{stochastic_em_ipw, WeightSpec};
use crate::latent_confounder::SensitivityParams;
use crate::stochastic_em::{run_stochastic_em, u_offsets, StoEmControl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Em,
    StoEm,
    Ipw,
    /// Fits ignoring `U`; the sensitivity parameters are unused.
    NoU,
    /// Cox fits with the supplied true `U` entering as offset `ζⱼuᵢ`.
    TrueU,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Em, Method::StoEm, Method::Ipw, Method::NoU, Method::TrueU];

    pub fn name(self) -> &'static str {
        match self {
            Method::Em => "em",
            Method::StoEm => "sto_em",
            Method::Ipw => "ipw",
            Method::NoU => "no_u",
            Method::TrueU => "true_u",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}` (expected em, sto_em, ipw, no_u or true_u)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub zeta_z_values: Vec<f64>,
    /// One axis per cause; a single value holds that cause fixed.
    pub zeta_values: Vec<Vec<f64>>,
    pub pi: f64,
    pub method: Method,
    pub em: EmControl,
    pub sto_em: StoEmControl,
    pub weights: WeightSpec,
    /// Master seed; each point's seed is derived from it and the point index.
    pub seed: u64,
    /// Required by [`Method::TrueU`].
    pub true_u: Option<Vec<bool>>,
}

impl GridSpec {
    pub fn new(zeta_z_values: Vec<f64>, zeta_values: Vec<Vec<f64>>, method: Method) -> Self {
        GridSpec {
            zeta_z_values,
            zeta_values,
            pi: 0.5,
            method,
            em: EmControl::default(),
            sto_em: StoEmControl::default(),
            weights: WeightSpec::default(),
            seed: 0,
            true_u: None,
        }
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.zeta_values.len() != data.n_causes() {
            return bad(format!(
                "grid has {} outcome axes but the data have {} causes",
                self.zeta_values.len(),
                data.n_causes()
            ));
        }
        for (name, axis) in std::iter::once(("zeta_z".to_string(), &self.zeta_z_values))
            .chain(self.zeta_values.iter().enumerate().map(|(j, a)| (format!("zeta_{}", j + 1), a)))
        {
            if axis.is_empty() {
                return bad(format!("axis {name} is empty"));
            }
            if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("axis {name} must be finite and strictly increasing"));
            }
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return bad("pi must lie in (0, 1)".into());
        }
        self.em.validate()?;
        if matches!(self.method, Method::StoEm | Method::Ipw) {
            self.sto_em.validate()?;
        }
        if self.method == Method::Ipw {
            self.weights.validate()?;
        }
        if self.method == Method::TrueU {
            match &self.true_u {
                Some(u) if u.len() == data.n() => {}
                Some(_) => return bad("true_u must have one entry per record".into()),
                None => return bad("method true_u needs the true U vector".into()),
            }
        }
        Ok(())
    }

    /// Lattice points in row order.
    pub fn lattice(&self) -> Vec<(f64, Vec<f64>)> {
        let inner: usize = self.zeta_values.iter().map(Vec::len).product();
        let mut pts = Vec::with_capacity(self.zeta_z_values.len() * inner);
        for &zz in &self.zeta_z_values {
            for r in 0..inner {
                let mut rest = r;
                let mut zeta = vec![0.0; self.zeta_values.len()];
                for (j, axis) in self.zeta_values.iter().enumerate().rev() {
                    zeta[j] = axis[rest % axis.len()];
                    rest /= axis.len();
                }
                pts.push((zz, zeta));
            }
        }
        pts
    }
}

/// Seed of lattice point `index`: the first 8 bytes of SHA-256 over the
/// little-endian master seed and index.
pub fn point_seed(master: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "message", rename_all = "snake_case")]
pub enum PointStatus {
    Ok,
    Failed(String),
}

impl PointStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, PointStatus::Ok)
    }
}

impl fmt::Display for PointStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointStatus::Ok => f.write_str("ok"),
            PointStatus::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

impl FromStr for PointStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ok" {
            Ok(PointStatus::Ok)
        } else if let Some(m) = s.strip_prefix("failed: ") {
            Ok(PointStatus::Failed(m.to_string()))
        } else {
            Err(Error::InvalidArgument(format!("unknown point status `{s}`")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub zeta_z: f64,
    pub zeta: Vec<f64>,
    pub tau: Vec<f64>,
    pub se: Vec<f64>,
    /// `tau / se`, per cause.
    pub t: Vec<f64>,
    pub status: PointStatus,
}

impl GridPoint {
    fn new(zeta_z: f64, zeta: Vec<f64>, tau: Vec<f64>, se: Vec<f64>) -> Self {
        let t = tau.iter().zip(&se).map(|(a, b)| a / b).collect();
        GridPoint {
            zeta_z,
            zeta,
            tau,
            se,
            t,
            status: PointStatus::Ok,
        }
    }

    fn failed(zeta_z: f64, zeta: Vec<f64>, err: &Error) -> Self {
        let m = zeta.len();
        GridPoint {
            zeta_z,
            zeta,
            tau: vec![f64::NAN; m],
            se: vec![f64::NAN; m],
            t: vec![f64::NAN; m],
            status: PointStatus::Failed(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub method: Method,
    pub master_seed: u64,
    pub point_seeds: Vec<u64>,
    pub data_fingerprint: String,
    pub pi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    /// Absent when the grid was read back from CSV.
    pub metadata: Option<GridMetadata>,
}

impl GridResult {
    pub fn n_causes(&self) -> usize {
        self.points.first().map_or(0, |p| p.zeta.len())
    }

    /// Distinct `ζᶻ` values, then each cause's distinct `ζⱼ`, in lattice order.
    pub fn axes(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut zz: Vec<f64> = Vec::new();
        let mut zs: Vec<Vec<f64>> = vec![Vec::new(); self.n_causes()];
        for p in &self.points {
            if !zz.contains(&p.zeta_z) {
                zz.push(p.zeta_z);
            }
            for (axis, v) in zs.iter_mut().zip(&p.zeta) {
                if !axis.contains(v) {
                    axis.push(*v);
                }
            }
        }
        (zz, zs)
    }

    /// The sub-lattice with `ζ_cause` (1-based) held at `value`.
    pub fn fix_zeta(&self, cause: usize, value: f64) -> Result<GridResult> {
        if cause == 0 || cause > self.n_causes() {
            return Err(Error::InvalidArgument(format!("cause {cause} out of range")));
        }
        let points: Vec<GridPoint> = self
            .points
            .iter()
            .filter(|p| p.zeta[cause - 1] == value)
            .cloned()
            .collect();
        if points.is_empty() {
            return Err(Error::InvalidArgument(format!("zeta_{cause} = {value} is not on the lattice")));
        }
        Ok(GridResult {
            points,
            metadata: None,
        })
    }

    /// Checks the row invariants: `t` recomputes bitwise from τ̂ / SE and
    /// failed rows carry NaN.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            let m = p.zeta.len();
            if p.tau.len() != m || p.se.len() != m || p.t.len() != m {
                return Err(Error::InvalidDataset(format!("row {i} has inconsistent lengths")));
            }
            for j in 0..m {
                let t = p.tau[j] / p.se[j];
                if t.to_bits() != p.t[j].to_bits() && !(t.is_nan() && p.t[j].is_nan()) {
                    return Err(Error::InvalidDataset(format!("row {i}: t is not tau / se")));
                }
            }
            if !p.status.is_ok() && p.tau.iter().any(|v| !v.is_nan()) {
                return Err(Error::InvalidDataset(format!("row {i}: failed row carries values")));
            }
        }
        Ok(())
    }
}

fn estimate_point(
    data: &Dataset,
    prep: &Prepared,
    spec: &GridSpec,
    sens: &SensitivityParams,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match spec.method {
        Method::Em => {
            let est = run_em(data, sens, &EmControl { seed, ..spec.em })?;
            let se = est.se_tau.clone().unwrap_or_else(|| est.model_se_taus());
            Ok((est.taus(), se))
        }
        Method::StoEm => {
            let c = run_stochastic_em(data, sens, &StoEmControl { seed, ..spec.sto_em })?;
            Ok((c.tau_hat, c.se))
        }
        Method::Ipw => {
            let c = stochastic_em_ipw(data, sens, &StoEmControl { seed, ..spec.sto_em }, &spec.weights)?;
            Ok((c.tau_hat, c.se))
        }
        Method::NoU => {
            let est = no_u_fit(prep, &spec.em.fit)?;
            Ok((est.taus(), est.model_se_taus()))
        }
        Method::TrueU => {
            let u = spec.true_u.as_ref().expect("validated");
            let ones = vec![1.0; data.n()];
            let mut tau = Vec::new();
            let mut se = Vec::new();
            for (j, cd) in prep.cox.iter().enumerate() {
                let f = fit_cox(cd, &u_offsets(u, sens.zeta[j]), &ones, &vec![0.0; cd.ncoef()], &spec.em.fit)?;
                let k = f.coef.len() - 1;
                tau.push(f.coef[k]);
                se.push(f.cov[(k, k)].sqrt());
            }
            Ok((tau, se))
        }
    }
}

/// Runs the estimator at every lattice point on `threads` worker threads.
/// Point failures become NaN rows; only configuration errors are returned.
/// The result does not depend on `threads`.
pub fn run_grid(data: &Dataset, spec: &GridSpec, threads: usize) -> Result<GridResult> {
    spec.validate(data)?;
    let lattice = spec.lattice();
    let prep = Prepared::new(data, spec.em.intercept);
    let seeds: Vec<u64> = (0..lattice.len()).map(|i| point_seed(spec.seed, i)).collect();
    let work = |i: usize| -> GridPoint {
        let (zz, zeta) = &lattice[i];
        let outcome = SensitivityParams::new(*zz, zeta.clone(), spec.pi)
            .and_then(|sens| estimate_point(data, &prep, spec, &sens, seeds[i]));
        match outcome {
            Ok((tau, se)) => GridPoint::new(*zz, zeta.clone(), tau, se),
            Err(e) => GridPoint::failed(*zz, zeta.clone(), &e),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let points: Vec<GridPoint> = pool.install(|| (0..lattice.len()).into_par_iter().map(work).collect());
    Ok(GridResult {
        points,
        metadata: Some(GridMetadata {
            method: spec.method,
            master_seed: spec.seed,
            point_seeds: seeds,
            data_fingerprint: data.fingerprint(),
            pi: spec.pi,
        }),
    })
}
