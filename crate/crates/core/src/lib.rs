//! Sensitivity of estimated treatment effects on survival and competing-risks
//! outcomes to an unmeasured binary confounder.
//!
//! The confounder `U ~ Bernoulli(π)` enters a probit treatment model with a
//! fixed coefficient `ζᶻ` and each cause-specific Cox hazard with a fixed
//! coefficient `ζⱼ`. For given sensitivity parameters the remaining
//! parameters are estimated by EM (with Louis standard errors), by stochastic
//! EM, or by stochastic EM combined with inverse probability weighting;
//! [`sensgrid`] sweeps the sensitivity parameters and extracts contours.

pub mod coxph;
pub mod dataset;
pub mod em_engine;
pub mod error;
pub mod ipw;
pub mod latent_confounder;
pub mod linalg;
pub mod normal;
mod optim;
pub mod probit;
pub mod sensgrid;
pub mod simgen;
pub mod stochastic_em;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use optim::FitControl;
