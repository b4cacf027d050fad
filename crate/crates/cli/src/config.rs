//! Run configuration (TOML). Unknown keys are rejected; errors name the key path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use survsens::simgen::CauseSimParams;

/// Every configuration key with its type, default and meaning; printed by
/// `--help` and mirrored in docs/config.md.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("seed", "integer, default 0", "master seed (overridden by --seed)"),
    ("method", "string, default \"em\"", "estimator for fit/grid: em, sto_em, ipw, no_u, true_u (overridden by --method)"),
    ("threads", "integer, default 1", "worker threads for grid (overridden by --threads)"),
    ("data.path", "path, required", "input CSV"),
    ("data.time", "string, default \"time\"", "follow-up time column"),
    ("data.status", "string, default \"status\"", "event indicator column (0 = censored, 1 = event)"),
    ("data.treat", "string, default \"treat\"", "binary treatment column"),
    ("data.cause", "string, optional", "cause column (1..m) for competing risks"),
    ("data.covariates", "array of strings, required", "covariate columns"),
    ("data.probit_transform", "array of strings, default []", "covariates holding propensity scores, replaced by their probit transform"),
    ("data.intercept", "bool, default true", "intercept in the treatment model"),
    ("data.true_u", "path, optional", "CSV with a `u` column; required by method true_u"),
    ("simulate.n", "integer, required", "sample size"),
    ("simulate.beta_z", "array of reals, required", "treatment-model coefficients (one per covariate)"),
    ("simulate.zeta_z", "real, required", "confounder effect on treatment"),
    ("simulate.pi", "real, default 0.5", "confounder prevalence"),
    ("simulate.covariate_means", "array of reals, required", "normal covariate means"),
    ("simulate.covariate_sds", "array of reals, required", "normal covariate standard deviations"),
    ("simulate.censor_low", "real, required", "lower end of the uniform censoring distribution"),
    ("simulate.censor_high", "real, required", "upper end of the uniform censoring distribution"),
    ("simulate.causes", "array of tables, required", "one table per cause (one cause = plain survival)"),
    ("simulate.causes.beta", "array of reals, required", "covariate log hazard ratios"),
    ("simulate.causes.tau", "real, required", "treatment log hazard ratio"),
    ("simulate.causes.zeta", "real, required", "confounder log hazard ratio"),
    ("simulate.causes.baseline_rate", "real, required", "constant baseline hazard"),
    ("sensitivity.zeta_z", "real, default 0", "confounder coefficient in the treatment model (fit)"),
    ("sensitivity.zeta", "array of reals, default all 0", "confounder coefficient per cause (fit)"),
    ("sensitivity.pi", "real, default 0.5", "confounder prevalence (fit)"),
    ("grid.zeta_z", "array of reals, required", "increasing zeta_z axis"),
    ("grid.zeta", "array of arrays, required", "increasing zeta axis per cause; one value holds a cause fixed"),
    ("grid.pi", "real, default 0.5", "confounder prevalence"),
    ("em.max_iter", "integer, default 20", "EM iterations"),
    ("em.rel_tol", "real, default 1e-6", "early stop on relative parameter change; 0 disables"),
    ("em.louis_draws", "integer, default 1000", "Monte-Carlo draws for the Louis variance"),
    ("em.variance", "bool, default true", "compute Louis standard errors"),
    ("sto_em.burn_in", "integer, default 20", "stochastic EM burn-in iterations"),
    ("sto_em.k", "integer, default 40", "retained stochastic EM iterations"),
    ("ipw.stabilize", "bool, default true", "stabilized weights"),
    ("ipw.trim_low", "real, default 0.1", "lower weight clamp"),
    ("ipw.trim_high", "real, default 10", "upper weight clamp"),
    ("fit.tol", "real, default 1e-8", "Newton gradient-norm tolerance"),
    ("fit.max_iter", "integer, default 100", "Newton iteration limit"),
    ("fit.coef_limit", "real, default 50", "coefficient magnitude treated as divergence"),
    ("contour.grid", "path, default <output.dir>/grid.csv", "grid CSV to contour"),
    ("contour.cause", "integer, default 1", "cause whose surfaces are contoured"),
    ("contour.tau_levels", "array of reals, default [tau at the origin]", "levels of the tau surface"),
    ("contour.abs_t_levels", "array of reals, default [1.96]", "levels of the |t| surface"),
    ("contour.fix", "table, optional", "zeta_J = value, fixing extra swept cause axes"),
    ("output.dir", "path, required unless --out", "output directory"),
    ("output.formats", "array of strings, default [\"csv\", \"json\", \"svg\"]", "formats to write"),
];

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub threads: Option<usize>,
    pub data: Option<DataConfig>,
    pub simulate: Option<SimulateConfig>,
    pub sensitivity: Option<SensitivityConfig>,
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub sto_em: StoEmConfig,
    #[serde(default)]
    pub ipw: IpwConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub contour: ContourConfig,
    pub output: Option<OutputConfig>,
}

fn default_time() -> String {
    "time".into()
}
fn default_status() -> String {
    "status".into()
}
fn default_treat() -> String {
    "treat".into()
}
fn yes() -> bool {
    true
}
fn half() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "default_time")]
    pub time: String,
    #[serde(default = "default_status")]
    pub status: String,
    #[serde(default = "default_treat")]
    pub treat: String,
    pub cause: Option<String>,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub probit_transform: Vec<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
    pub true_u: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub beta_z: Vec<f64>,
    pub zeta_z: f64,
    #[serde(default = "half")]
    pub pi: f64,
    pub covariate_means: Vec<f64>,
    pub covariate_sds: Vec<f64>,
    pub censor_low: f64,
    pub censor_high: f64,
    pub causes: Vec<CauseSimParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    #[serde(default)]
    pub zeta_z: f64,
    pub zeta: Option<Vec<f64>>,
    #[serde(default = "half")]
    pub pi: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub zeta_z: Vec<f64>,
    pub zeta: Vec<Vec<f64>>,
    #[serde(default = "half")]
    pub pi: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub louis_draws: usize,
    pub variance: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 20,
            rel_tol: 1e-6,
            louis_draws: 1000,
            variance: true,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoEmConfig {
    pub burn_in: usize,
    pub k: usize,
}

impl Default for StoEmConfig {
    fn default() -> Self {
        StoEmConfig { burn_in: 20, k: 40 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpwConfig {
    pub stabilize: bool,
    pub trim_low: f64,
    pub trim_high: f64,
}

impl Default for IpwConfig {
    fn default() -> Self {
        IpwConfig {
            stabilize: true,
            trim_low: 0.1,
            trim_high: 10.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub coef_limit: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: 1e-8,
            max_iter: 100,
            coef_limit: 50.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContourConfig {
    pub grid: Option<PathBuf>,
    pub cause: usize,
    pub tau_levels: Option<Vec<f64>>,
    pub abs_t_levels: Vec<f64>,
    pub fix: BTreeMap<String, f64>,
}

impl Default for ContourConfig {
    fn default() -> Self {
        ContourConfig {
            grid: None,
            cause: 1,
            tau_levels: None,
            abs_t_levels: vec![1.96],
            fix: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

fn all_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json, Format::Svg]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
}

/// Parses a configuration document; the error names the offending key.
pub fn parse(text: &str) -> Result<Config, String> {
    let de = toml::Deserializer::parse(text).map_err(|e| format!("invalid TOML: {e}"))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.inner().message().trim().to_string();
        if let Some(field) = inner
            .find("missing field `")
            .map(|at| &inner[at + "missing field `".len()..])
            .and_then(|r| r.split('`').next())
        {
            let key = if path == "." || path.is_empty() {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
            format!("missing key `{key}`")
        } else if path == "." || path.is_empty() {
            inner
        } else {
            format!("key `{path}`: {inner}")
        }
    })
}

pub fn load(path: &Path) -> Result<Config, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse(&text)
}

/// Help text listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (TOML; see docs/config.md):\n");
    for (k, ty, what) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<24} {ty}: {what}\n"));
    }
    s
}
