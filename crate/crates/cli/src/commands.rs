use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use survsens::dataset::{transform_ps_covariate, CsvSchema, Dataset};
use survsens::em_engine::{no_u_fit, run_em, EmControl, ModelEstimate, Prepared};
use survsens::ipw::{stochastic_em_ipw, WeightSpec};
use survsens::latent_confounder::SensitivityParams;
use survsens::sensgrid::{
    extract_contours, read_grid_csv, run_grid, write_contours_json, write_grid_csv, write_grid_json, write_svg,
    ContourSet, Field, GridResult, GridSpec, Method, SvgStyle,
};
use survsens::simgen::{gen_competing, CompRiskSimConfig};
use survsens::stochastic_em::{refit_with_u, run_stochastic_em, StoEmControl};
use survsens::FitControl;

use crate::config::{self, Config, Format};
use crate::Common;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_FIT: u8 = 3;
pub const EXIT_GRID: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

type CliResult<T> = Result<T, CliError>;

fn cfg_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn with_code<E: std::fmt::Display>(code: u8) -> impl Fn(E) -> CliError {
    move |e| CliError {
        code,
        message: e.to_string(),
    }
}

/// Config file plus command-line overrides.
struct Run {
    cfg: Config,
    seed: u64,
    method: Method,
    threads: usize,
    out: Option<PathBuf>,
}

impl Run {
    fn load(c: &Common) -> CliResult<Self> {
        let cfg = config::load(&c.config).map_err(cfg_err)?;
        let method_name = c.method.clone().or_else(|| cfg.method.clone()).unwrap_or_else(|| "em".into());
        let method: Method = method_name.parse().map_err(with_code(EXIT_CONFIG))?;
        let threads = c.threads.or(cfg.threads).unwrap_or(1);
        if threads == 0 {
            return Err(cfg_err("threads must be at least 1"));
        }
        let out = c.out.clone().or_else(|| cfg.output.as_ref().and_then(|o| o.dir.clone()));
        Ok(Run {
            seed: c.seed.or(cfg.seed).unwrap_or(0),
            method,
            threads,
            out,
            cfg,
        })
    }

    fn out_dir(&self) -> CliResult<&Path> {
        let dir = self
            .out
            .as_deref()
            .ok_or_else(|| cfg_err("missing key `output.dir` (or pass --out)"))?;
        fs::create_dir_all(dir).map_err(|e| cfg_err(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn formats(&self) -> Vec<Format> {
        self.cfg
            .output
            .as_ref()
            .map_or_else(|| vec![Format::Csv, Format::Json, Format::Svg], |o| o.formats.clone())
    }

    fn fit_control(&self) -> FitControl {
        FitControl {
            tol: self.cfg.fit.tol,
            max_iter: self.cfg.fit.max_iter,
            coef_limit: self.cfg.fit.coef_limit,
        }
    }

    fn intercept(&self) -> bool {
        self.cfg.data.as_ref().map_or(true, |d| d.intercept)
    }

    fn em_control(&self) -> EmControl {
        EmControl {
            max_iter: self.cfg.em.max_iter,
            rel_tol: self.cfg.em.rel_tol,
            louis_draws: self.cfg.em.louis_draws,
            seed: self.seed,
            variance: self.cfg.em.variance,
            intercept: self.intercept(),
            fit: self.fit_control(),
        }
    }

    fn sto_control(&self) -> StoEmControl {
        StoEmControl {
            burn_in: self.cfg.sto_em.burn_in,
            k: self.cfg.sto_em.k,
            seed: self.seed,
            intercept: self.intercept(),
            fit: self.fit_control(),
        }
    }

    fn weights(&self) -> WeightSpec {
        WeightSpec {
            stabilize: self.cfg.ipw.stabilize,
            trim_low: self.cfg.ipw.trim_low,
            trim_high: self.cfg.ipw.trim_high,
        }
    }

    /// Loads `[data]`, applying the probit transform to propensity columns.
    fn dataset(&self) -> CliResult<(Dataset, Option<Vec<bool>>)> {
        let d = self.cfg.data.as_ref().ok_or_else(|| cfg_err("missing key `data`"))?;
        let mut schema = CsvSchema::new(d.covariates.clone());
        schema.time = d.time.clone();
        schema.status = d.status.clone();
        schema.treat = d.treat.clone();
        schema.cause = d.cause.clone();
        let mut data = Dataset::load_csv(&d.path, &schema).map_err(with_code(EXIT_CONFIG))?;
        if let Some(bad) = d.probit_transform.iter().find(|c| !d.covariates.contains(c)) {
            return Err(cfg_err(format!(
                "key `data.probit_transform`: `{bad}` is not listed in data.covariates"
            )));
        }
        if !d.probit_transform.is_empty() {
            let mut columns: Vec<Vec<f64>> = (0..data.p())
                .map(|k| data.records().iter().map(|r| r.covariates[k]).collect())
                .collect();
            for (k, name) in d.covariates.iter().enumerate() {
                if d.probit_transform.contains(name) {
                    columns[k] = transform_ps_covariate(&columns[k])
                        .map_err(|e| cfg_err(format!("column `{name}`: {e}")))?;
                }
            }
            data = data
                .with_covariates(d.covariates.clone(), &columns)
                .map_err(with_code(EXIT_CONFIG))?;
        }
        let u = match &d.true_u {
            Some(p) => Some(read_true_u(p, data.n())?),
            None => None,
        };
        Ok((data, u))
    }
}

fn read_true_u(path: &Path, n: usize) -> CliResult<Vec<bool>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
    let col = r
        .headers()
        .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?
        .iter()
        .position(|h| h == "u")
        .ok_or_else(|| cfg_err(format!("{}: missing column `u`", path.display())))?;
    let mut u = Vec::with_capacity(n);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        u.push(match rec.get(col).map(str::trim) {
            Some("0") => false,
            Some("1") => true,
            v => return Err(cfg_err(format!("{}: row {}: u must be 0 or 1, got {v:?}", path.display(), i + 1))),
        });
    }
    if u.len() != n {
        return Err(cfg_err(format!("{}: {} rows but the data have {n}", path.display(), u.len())));
    }
    Ok(u)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| cfg_err(format!("cannot create {}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| cfg_err(format!("cannot write {}: {e}", path.display())))
}

pub fn simulate(c: &Common) -> CliResult<()> {
    let run = Run::load(c)?;
    let s = run.cfg.simulate.as_ref().ok_or_else(|| cfg_err("missing key `simulate`"))?;
    let sim = CompRiskSimConfig {
        n: s.n,
        beta_z: s.beta_z.clone(),
        zeta_z: s.zeta_z,
        causes: s.causes.clone(),
        pi: s.pi,
        censor_low: s.censor_low,
        censor_high: s.censor_high,
        covariate_means: s.covariate_means.clone(),
        covariate_sds: s.covariate_sds.clone(),
        seed: run.seed,
    };
    let (data, u) = gen_competing(&sim).map_err(|e| cfg_err(format!("[simulate]: {e}")))?;
    let dir = run.out_dir()?;
    let path = dir.join("data.csv");
    let mut w = create(&path)?;
    data.write_csv(&mut w).map_err(with_code(EXIT_CONFIG))?;
    finish(w, &path)?;
    let path = dir.join("true_u.csv");
    let mut w = create(&path)?;
    let mut text = String::from("u\n");
    for b in &u {
        text.push_str(if *b { "1\n" } else { "0\n" });
    }
    w.write_all(text.as_bytes()).map_err(|e| cfg_err(e.to_string()))?;
    finish(w, &path)?;

    println!("n = {}", data.n());
    println!("censored fraction = {:.4}", data.censored_fraction());
    for (j, k) in data.event_counts().iter().enumerate() {
        println!("cause {} events = {k}", j + 1);
    }
    println!("wrote {}", dir.join("data.csv").display());
    println!("wrote {}", dir.join("true_u.csv").display());
    Ok(())
}

/// One sensitivity point: per-cause (τ̂, SE), β̂ᶻ and per-cause β̂.
struct FitReport {
    tau: Vec<f64>,
    se: Vec<f64>,
    beta_z: Vec<f64>,
    beta: Vec<Vec<f64>>,
}

impl FitReport {
    fn from_model(m: &ModelEstimate, se: Vec<f64>) -> Self {
        FitReport {
            tau: m.taus(),
            se,
            beta_z: m.beta_z.clone(),
            beta: m.causes.iter().map(|c| c.beta.clone()).collect(),
        }
    }
}

fn sensitivity(run: &Run, m: usize) -> CliResult<SensitivityParams> {
    let (zeta_z, zeta, pi) = match &run.cfg.sensitivity {
        Some(s) => (s.zeta_z, s.zeta.clone().unwrap_or_else(|| vec![0.0; m]), s.pi),
        None => (0.0, vec![0.0; m], 0.5),
    };
    if zeta.len() != m {
        return Err(cfg_err(format!(
            "key `sensitivity.zeta`: {} values given but the data have {m} causes",
            zeta.len()
        )));
    }
    SensitivityParams::new(zeta_z, zeta, pi).map_err(|e| cfg_err(format!("[sensitivity]: {e}")))
}

pub fn fit(c: &Common) -> CliResult<()> {
    let run = Run::load(c)?;
    let (data, true_u) = run.dataset()?;
    let sens = sensitivity(&run, data.n_causes())?;
    let fit_err = with_code(EXIT_FIT);
    let report = match run.method {
        Method::Em => {
            let ctrl = run.em_control();
            ctrl.validate().map_err(with_code(EXIT_CONFIG))?;
            let est = run_em(&data, &sens, &ctrl).map_err(&fit_err)?;
            let se = est.se_tau.clone().unwrap_or_else(|| est.model_se_taus());
            FitReport::from_model(&est, se)
        }
        Method::StoEm | Method::Ipw => {
            let ctrl = run.sto_control();
            ctrl.validate().map_err(with_code(EXIT_CONFIG))?;
            let est = if run.method == Method::StoEm {
                run_stochastic_em(&data, &sens, &ctrl)
            } else {
                let w = run.weights();
                w.validate().map_err(with_code(EXIT_CONFIG))?;
                stochastic_em_ipw(&data, &sens, &ctrl, &w)
            }
            .map_err(&fit_err)?;
            FitReport {
                tau: est.tau_hat,
                se: est.se,
                beta_z: est.beta_z,
                beta: est.beta,
            }
        }
        Method::NoU => {
            let prep = Prepared::new(&data, run.intercept());
            let est = no_u_fit(&prep, &run.fit_control()).map_err(&fit_err)?;
            let se = est.model_se_taus();
            FitReport::from_model(&est, se)
        }
        Method::TrueU => {
            let u = true_u.ok_or_else(|| cfg_err("method true_u needs key `data.true_u`"))?;
            let prep = Prepared::new(&data, run.intercept());
            let start = no_u_fit(&prep, &run.fit_control()).map_err(&fit_err)?;
            let est = refit_with_u(&prep, &start, &sens, &u, &run.fit_control()).map_err(&fit_err)?;
            let se = est.model_se_taus();
            FitReport::from_model(&est, se)
        }
    };

    println!("method = {}", run.method);
    println!(
        "sensitivity: zeta_z = {}, zeta = {:?}, pi = {}",
        sens.zeta_z, sens.zeta, sens.pi
    );
    println!("{:<8} {:>12} {:>12} {:>10}", "cause", "tau", "se", "t");
    for j in 0..report.tau.len() {
        println!(
            "{:<8} {:>12.6} {:>12.6} {:>10.4}",
            j + 1,
            report.tau[j],
            report.se[j],
            report.tau[j] / report.se[j]
        );
    }
    let names = data.covariate_names();
    let zlabels: Vec<String> = if run.intercept() {
        std::iter::once("(intercept)".to_string()).chain(names.iter().cloned()).collect()
    } else {
        names.to_vec()
    };
    println!("beta_z:");
    for (l, b) in zlabels.iter().zip(&report.beta_z) {
        println!("  {l:<14} {b:>12.6}");
    }
    for (j, beta) in report.beta.iter().enumerate() {
        println!("beta (cause {}):", j + 1);
        for (l, b) in names.iter().zip(beta) {
            println!("  {l:<14} {b:>12.6}");
        }
    }

    if run.out.is_some() && run.formats().contains(&Format::Json) {
        let dir = run.out_dir()?;
        let path = dir.join("fit.json");
        let causes: Vec<_> = (0..report.tau.len())
            .map(|j| {
                json!({
                    "cause": j + 1,
                    "tau": finite(report.tau[j]),
                    "se": finite(report.se[j]),
                    "t": finite(report.tau[j] / report.se[j]),
                    "beta": report.beta.get(j).map(|b| b.iter().map(|v| finite(*v)).collect::<Vec<_>>()),
                })
            })
            .collect();
        let doc = json!({
            "method": run.method.name(),
            "seed": run.seed,
            "sensitivity": { "zeta_z": sens.zeta_z, "zeta": sens.zeta, "pi": sens.pi },
            "covariates": names,
            "intercept": run.intercept(),
            "beta_z": report.beta_z.iter().map(|v| finite(*v)).collect::<Vec<_>>(),
            "causes": causes,
            "data_fingerprint": data.fingerprint(),
        });
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| cfg_err(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| cfg_err(e.to_string()))?;
        finish(w, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn finite(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Reduces a lattice to one swept outcome axis. Causes in `fixed` are held at
/// their value; any other swept cause besides `cause` is held at its value
/// nearest zero when `default_nearest_zero`, otherwise it is an error.
fn plane(
    grid: &GridResult,
    cause: usize,
    fixed: &[(usize, f64)],
    default_nearest_zero: bool,
) -> CliResult<GridResult> {
    let mut g = grid.clone();
    for &(j, v) in fixed {
        g = g.fix_zeta(j, v).map_err(with_code(EXIT_GRID))?;
    }
    let (_, zs) = g.axes();
    let swept: Vec<usize> = (0..zs.len()).filter(|&j| zs[j].len() > 1).collect();
    if swept.len() > 1 {
        for &j in &swept {
            if j + 1 == cause {
                continue;
            }
            if !default_nearest_zero {
                return Err(CliError {
                    code: EXIT_GRID,
                    message: format!(
                        "insufficient grid: zeta_{} is swept; hold it fixed with contour.fix.zeta_{}",
                        j + 1,
                        j + 1
                    ),
                });
            }
            let v = zs[j]
                .iter()
                .copied()
                .min_by(|a, b| a.abs().total_cmp(&b.abs()))
                .expect("non-empty axis");
            g = g.fix_zeta(j + 1, v).map_err(with_code(EXIT_GRID))?;
        }
    }
    Ok(g)
}

pub fn grid(c: &Common) -> CliResult<()> {
    let run = Run::load(c)?;
    let (data, true_u) = run.dataset()?;
    let gc = run.cfg.grid.as_ref().ok_or_else(|| cfg_err("missing key `grid`"))?;
    let mut spec = GridSpec::new(gc.zeta_z.clone(), gc.zeta.clone(), run.method);
    spec.pi = gc.pi;
    spec.em = run.em_control();
    spec.sto_em = run.sto_control();
    spec.weights = run.weights();
    spec.seed = run.seed;
    spec.true_u = true_u;
    let dir = run.out_dir()?.to_path_buf();
    let g = run_grid(&data, &spec, run.threads).map_err(with_code(EXIT_GRID))?;
    g.check_invariants().map_err(with_code(EXIT_GRID))?;

    let formats = run.formats();
    if formats.contains(&Format::Csv) {
        let path = dir.join("grid.csv");
        let mut w = create(&path)?;
        write_grid_csv(&g, &mut w).map_err(with_code(EXIT_GRID))?;
        finish(w, &path)?;
        println!("wrote {}", path.display());
    }
    if formats.contains(&Format::Json) {
        let path = dir.join("grid.json");
        let mut w = create(&path)?;
        write_grid_json(&g, &mut w).map_err(with_code(EXIT_GRID))?;
        finish(w, &path)?;
        println!("wrote {}", path.display());
    }
    if formats.contains(&Format::Svg) {
        let path = dir.join("grid.svg");
        let flat = plane(&g, 1, &[], true)?;
        let mut buf = Vec::new();
        match write_svg(&flat, Field::Tau, 1, &[], &SvgStyle::default(), &mut buf) {
            Ok(()) => {
                let mut w = create(&path)?;
                w.write_all(&buf).map_err(|e| cfg_err(e.to_string()))?;
                finish(w, &path)?;
                println!("wrote {}", path.display());
            }
            Err(e) => eprintln!("warning: grid.svg not written: {e}"),
        }
    }
    let failed = g.points.iter().filter(|p| !p.status.is_ok()).count();
    println!("points = {}, failed = {failed}", g.points.len());
    Ok(())
}

fn parse_fix(run: &Run) -> CliResult<Vec<(usize, f64)>> {
    run.cfg
        .contour
        .fix
        .iter()
        .map(|(k, v)| {
            k.strip_prefix("zeta_")
                .and_then(|j| j.parse::<usize>().ok())
                .filter(|&j| j >= 1)
                .map(|j| (j, *v))
                .ok_or_else(|| cfg_err(format!("key `contour.fix.{k}`: expected a key of the form zeta_J")))
        })
        .collect()
}

/// τ̂ at the lattice point nearest the origin.
fn origin_tau(grid: &GridResult, cause: usize) -> Option<f64> {
    grid.points
        .iter()
        .filter(|p| p.status.is_ok())
        .min_by(|a, b| {
            let d = |p: &survsens::sensgrid::GridPoint| p.zeta_z * p.zeta_z + p.zeta.iter().map(|z| z * z).sum::<f64>();
            d(a).total_cmp(&d(b))
        })
        .map(|p| p.tau[cause - 1])
}

pub fn contour(c: &Common) -> CliResult<()> {
    let run = Run::load(c)?;
    let cc = &run.cfg.contour;
    let grid_path = match (&cc.grid, &run.out) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("grid.csv"),
        (None, None) => return Err(cfg_err("missing key `contour.grid` (or output.dir / --out)")),
    };
    let file = File::open(&grid_path).map_err(|e| cfg_err(format!("cannot read {}: {e}", grid_path.display())))?;
    let g = read_grid_csv(std::io::BufReader::new(file)).map_err(with_code(EXIT_CONFIG))?;
    let grid_err = with_code(EXIT_GRID);
    g.check_invariants().map_err(&grid_err)?;
    let cause = cc.cause;
    if cause == 0 || cause > g.n_causes() {
        return Err(cfg_err(format!(
            "key `contour.cause`: {cause} is out of range 1..={}",
            g.n_causes()
        )));
    }
    let flat = plane(&g, cause, &parse_fix(&run)?, false)?;
    let tau_levels = match &cc.tau_levels {
        Some(l) => l.clone(),
        None => vec![origin_tau(&flat, cause).ok_or_else(|| CliError {
            code: EXIT_GRID,
            message: "insufficient grid: no successful point to take the default tau level from".into(),
        })?],
    };

    let mut tau_sets: Vec<ContourSet> = Vec::new();
    for &l in &tau_levels {
        tau_sets.push(extract_contours(&flat, Field::Tau, cause, l).map_err(&grid_err)?);
    }
    let mut t_sets: Vec<ContourSet> = Vec::new();
    for &l in &cc.abs_t_levels {
        t_sets.push(extract_contours(&flat, Field::AbsT, cause, l).map_err(&grid_err)?);
    }

    let dir = run.out_dir()?.to_path_buf();
    let formats = run.formats();
    if formats.contains(&Format::Json) {
        let path = dir.join("contours.json");
        let all: Vec<ContourSet> = tau_sets.iter().chain(&t_sets).cloned().collect();
        let mut w = create(&path)?;
        write_contours_json(&all, &mut w).map_err(&grid_err)?;
        finish(w, &path)?;
        println!("wrote {}", path.display());
    }
    if formats.contains(&Format::Svg) {
        for (field, sets, name) in [
            (Field::Tau, &tau_sets, "contours_tau.svg"),
            (Field::AbsT, &t_sets, "contours_abs_t.svg"),
        ] {
            let path = dir.join(name);
            let mut w = create(&path)?;
            write_svg(&flat, field, cause, sets, &SvgStyle::default(), &mut w).map_err(&grid_err)?;
            finish(w, &path)?;
            println!("wrote {}", path.display());
        }
    }
    for s in tau_sets.iter().chain(&t_sets) {
        println!(
            "{} = {}: {} polylines, {} skipped cells",
            s.field.name(),
            s.level,
            s.polylines.len(),
            s.skipped_cells.len()
        );
    }
    Ok(())
}
