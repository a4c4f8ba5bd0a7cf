//! Robust Bayesian linear regression under the contamination model
//! `y_i ~ (1-s) N(x_i'beta, sigma^2) + s f1(y_i)`.
//!
//! With the conjugate normal-inverse-gamma prior the posterior is an exact
//! finite mixture ([`conjugate`]). On top of that the crate provides Monte
//! Carlo KL diagnostics along an outlier schedule ([`divergence`]), a
//! brute-force quadrature reference ([`oracle`]) and a decision rule for
//! whether a prior/error pairing yields a robust posterior ([`robustness`]).

pub mod conjugate;
pub mod densities;
pub mod divergence;
pub mod error;
pub mod math;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod robustness;

pub use conjugate::{
    build_mixture_posterior, log_marginal_likelihood, log_posterior_density, nig_update, predictive_quantiles,
    sample_posterior, MixturePosterior, NigParams, Outlier, PredictiveQuantiles, RegressionData,
};
pub use densities::{BoundSpec, ConjugatePrior, ErrorDensity};
pub use divergence::{kl_mc, kl_mc_direct, kl_sweep, KlEstimate, SweepRow};
pub use error::{Error, Result};
pub use robustness::{check_robustness, moment_threshold, PriorFamily, RobustnessQuery, RobustnessVerdict, Verdict};
