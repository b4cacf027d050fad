//! Random fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coxph::BaselineHazard;
use crate::dataset::Dataset;
use crate::em_engine::{CauseEstimate, ModelEstimate};
use crate::latent_confounder::SensitivityParams;
use crate::simgen::{CompRiskSimConfig, SurvSimConfig, gen_competing, gen_survival};

/// Small simulated dataset with `m` causes (1 or 2).
pub fn dataset(n: usize, m: usize, seed: u64) -> Dataset {
    if m == 1 {
        let mut cfg = SurvSimConfig::standard(1.0, 1.0, seed);
        cfg.n = n;
        gen_survival(&cfg).unwrap().0
    } else {
        let mut cfg = CompRiskSimConfig::standard(1.0, 1.0, -1.0, seed);
        cfg.n = n;
        gen_competing(&cfg).unwrap().0
    }
}

/// Arbitrary parameter values with baseline mass at every event time.
pub fn theta(data: &Dataset, intercept: bool, rng: &mut ChaCha8Rng) -> ModelEstimate {
    let p = data.p();
    let causes = (1..=data.n_causes())
        .map(|j| {
            let mut t: Vec<f64> = data
                .records()
                .iter()
                .filter(|r| r.is_event_of(j))
                .map(|r| r.time)
                .collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            let inc = t.iter().map(|_| rng.random_range(0.05..0.5)).collect();
            CauseEstimate::new(
                rng.random_range(-1.0..1.0),
                (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                BaselineHazard {
                    event_times: t,
                    increments: inc,
                },
            )
        })
        .collect();
    let nz = p + usize::from(intercept);
    ModelEstimate::new(
        (0..nz).map(|_| rng.random_range(-0.5..0.5)).collect(),
        intercept,
        causes,
    )
}

pub fn sens(m: usize, rng: &mut ChaCha8Rng) -> SensitivityParams {
    SensitivityParams::new(
        rng.random_range(-2.0..2.0),
        (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        0.5,
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
