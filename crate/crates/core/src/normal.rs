//! Standard normal helpers with tail-stable logarithms.

use statrs::function::erf::{erfc, erfc_inv};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this point `log_cdf` switches from `erfc` to the asymptotic series.
const ASYMPTOTIC_CUTOFF: f64 = -20.0;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `log Φ(x)`, finite for every finite `x`.
///
/// Uses `erfc` down to -20 and the Mills-ratio expansion
/// `1 - 1/x² + 3/x⁴ - 15/x⁶ + ...` (seven correction terms) below, where the
/// truncation error is under 1e-14.
pub fn log_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else if x >= ASYMPTOTIC_CUTOFF {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        let inv_x2 = 1.0 / (x * x);
        let mut term = 1.0;
        let mut series = 1.0;
        for k in 1..=7 {
            term *= -((2 * k - 1) as f64) * inv_x2;
            series += term;
        }
        -0.5 * x * x - (-x).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// `log(1 - Φ(x))`.
pub fn log_sf(x: f64) -> f64 {
    log_cdf(-x)
}

/// Inverse Mills ratio `φ(x) / Φ(x)`.
pub fn mills(x: f64) -> f64 {
    (log_pdf(x) - log_cdf(x)).exp()
}

/// Standard normal quantile. `p` must lie in (0, 1).
pub fn quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// First and second derivatives in `eta` of the Bernoulli-probit log
/// likelihood `z log Φ(η) + (1 - z) log(1 - Φ(η))`.
pub fn probit_derivs(z: bool, eta: f64) -> (f64, f64) {
    if z {
        let m = mills(eta);
        (m, -m * (eta + m))
    } else {
        let m = mills(-eta);
        (-m, -m * (m - eta))
    }
}

/// Bernoulli-probit log likelihood of a single observation.
pub fn probit_ll(z: bool, eta: f64) -> f64 {
    if z {
        log_cdf(eta)
    } else {
        log_sf(eta)
    }
}
