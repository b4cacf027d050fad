use survsens::dataset::{transform_ps_covariate, Dataset};
use survsens::em_engine::{run_em, EmControl};
use survsens::latent_confounder::SensitivityParams;
use survsens::normal;
use survsens::sensgrid::{extract_contours, read_grid_csv, run_grid, write_grid_csv, Field, GridSpec, Method};
use survsens::simgen::{gen_competing, gen_survival, CompRiskSimConfig, SurvSimConfig};
use survsens::Error;

fn small_survival(n: usize, seed: u64) -> Dataset {
    let mut cfg = SurvSimConfig::standard(1.0, 1.0, seed);
    cfg.n = n;
    gen_survival(&cfg).unwrap().0
}

#[test]
fn csv_round_trip_preserves_fits() {
    let data = small_survival(200, 1);
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    let back = Dataset::from_reader(buf.as_slice(), &data.default_schema()).unwrap();
    assert_eq!(back.fingerprint(), data.fingerprint());
    let sens = SensitivityParams::new(1.0, vec![1.0], 0.5).unwrap();
    let ctrl = EmControl {
        variance: false,
        ..EmControl::default()
    };
    assert_eq!(run_em(&data, &sens, &ctrl).unwrap().taus(), run_em(&back, &sens, &ctrl).unwrap().taus());
}

#[test]
fn propensity_workflow_yields_contours_and_valid_grid() {
    // Replace the covariates by a probit-scale propensity score.
    let data = small_survival(300, 2);
    let ps: Vec<f64> = data
        .records()
        .iter()
        .map(|r| normal::cdf(0.25 * r.covariates[0] - 0.25 * r.covariates[1]))
        .collect();
    let data = data
        .with_covariates(vec!["ps".into()], &[transform_ps_covariate(&ps).unwrap()])
        .unwrap();
    let axis = vec![-1.0, 0.0, 1.0, 2.0];
    let mut spec = GridSpec::new(axis.clone(), vec![axis], Method::Em);
    spec.em.louis_draws = 100;
    spec.seed = 4;
    let g = run_grid(&data, &spec, 1).unwrap();
    g.check_invariants().unwrap();
    assert!(g.points.iter().all(|p| p.status.is_ok()));

    let mut csv = Vec::new();
    write_grid_csv(&g, &mut csv).unwrap();
    let back = read_grid_csv(csv.as_slice()).unwrap();
    assert_eq!(back.points.len(), g.points.len());
    back.check_invariants().unwrap();

    let origin = g.points.iter().find(|p| p.zeta_z == 0.0 && p.zeta[0] == 0.0).unwrap().tau[0];
    let tau = extract_contours(&back, Field::Tau, 1, origin).unwrap();
    assert!(!tau.is_empty());
    for line in &tau.polylines {
        for &(x, y) in line {
            assert!((-1.0..=2.0).contains(&x) && (-1.0..=2.0).contains(&y));
        }
    }
}

#[test]
fn multi_cause_lattice_needs_a_fixed_axis() {
    let mut cfg = CompRiskSimConfig::standard(1.0, 1.0, 1.0, 3);
    cfg.n = 250;
    let (data, _) = gen_competing(&cfg).unwrap();
    let spec = GridSpec::new(vec![-1.0, 1.0], vec![vec![-1.0, 1.0], vec![0.0, 1.0]], Method::NoU);
    let g = run_grid(&data, &spec, 2).unwrap();
    assert_eq!(g.points.len(), 8);
    assert!(matches!(
        extract_contours(&g, Field::Tau, 1, 0.0),
        Err(Error::InsufficientGrid(_))
    ));
    let plane = g.fix_zeta(2, 1.0).unwrap();
    assert_eq!(plane.points.len(), 4);
    extract_contours(&plane, Field::AbsT, 1, 1.96).unwrap();
}
