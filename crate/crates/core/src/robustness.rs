//! Decision rule for posterior robustness under the contamination model.
//!
//! The sufficient condition asks for a finite `sigma` moment of order
//! `|L| alpha + rho`; the necessary-side condition asks for a `sigma` tail
//! no lighter than `sigma^-(|L| alpha + 1 - rho)`. For the three prior
//! families on `sigma^2` handled here both reduce to comparing `|L| alpha`
//! with the family's moment threshold, with equality left undecided.
//! The reduction of the tail bound to the threshold comparison for the
//! inverse-gamma and scaled-beta families follows from their polynomial
//! `sigma` tails (`sigma^-(2A+1)` and `sigma^-(2F+1)`).

use std::fmt;

use crate::densities::{prior_bound_sup_ratio, ConjugatePrior, ErrorDensity};
use crate::error::{invalid, Result};

/// Prior on `sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorFamily {
    /// Density in sigma `∝ sigma^-(2A+1) exp(-B/sigma^2)`.
    InverseGamma { a: f64, b: f64 },
    /// Density in sigma `∝ sigma^(2C-1) exp(-D sigma^2)`.
    Gamma { c: f64, d: f64 },
    /// Density in sigma `∝ sigma^(2E-1) / (1+sigma^2)^(E+F)`.
    ScaledBeta { e: f64, f: f64 },
}

impl PriorFamily {
    pub fn validate(&self) -> Result<()> {
        let (x, y) = match *self {
            Self::InverseGamma { a, b } => (a, b),
            Self::Gamma { c, d } => (c, d),
            Self::ScaledBeta { e, f } => (e, f),
        };
        if x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("prior hyperparameters must be finite and > 0: {self:?}")))
        }
    }

    /// Symbol that names the threshold in condition citations.
    fn threshold_symbol(&self) -> &'static str {
        match self {
            Self::InverseGamma { .. } => "2A",
            Self::Gamma { .. } => "",
            Self::ScaledBeta { .. } => "2F",
        }
    }
}

/// `sup { m : E[sigma^m] < ∞ }` for the family (`+inf` for gamma).
pub fn moment_threshold(prior: &PriorFamily) -> f64 {
    match *prior {
        PriorFamily::InverseGamma { a, .. } => 2.0 * a,
        PriorFamily::Gamma { .. } => f64::INFINITY,
        PriorFamily::ScaledBeta { f, .. } => 2.0 * f,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessQuery {
    pub prior: PriorFamily,
    pub error: ErrorDensity,
    pub n_outliers: usize,
    /// Exponent of the scaled-beta bound on `pi(beta | sigma)`. `None` picks
    /// `alpha + 1`.
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Robust,
    NonRobust,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Robust => "Robust",
            Self::NonRobust => "NonRobust",
            Self::Inconclusive => "Inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessVerdict {
    pub verdict: Verdict,
    /// Inequality that decided the verdict, e.g. `2A > |L|α`.
    pub condition: String,
    pub threshold: f64,
    /// `|L| * alpha`.
    pub load: f64,
    /// Exponent used for the prior bound on `beta | sigma`.
    pub nu: f64,
    /// Empirical constant `M` of that bound for the normal conditional prior
    /// (`C = 1`, `kappa = 1`).
    pub prior_bound_m: f64,
}

impl fmt::Display for RobustnessVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.verdict, self.condition)
    }
}

fn bound_evidence(nu: f64) -> Result<f64> {
    let grid: Vec<f64> = (0..=20_000).map(|i| i as f64 * 0.01).collect();
    let unit = ConjugatePrior { a: 1.0, b: 1.0, c: 1.0 };
    Ok(prior_bound_sup_ratio(&unit, 1, 1.0, nu, &grid)?.sup)
}

/// Verdict for a query. Robust when `|L| alpha` is strictly below the
/// moment threshold; NonRobust when `alpha > 0` and it is strictly above;
/// Inconclusive otherwise.
pub fn check_robustness(q: &RobustnessQuery) -> Result<RobustnessVerdict> {
    q.prior.validate()?;
    q.error.validate()?;
    if q.n_outliers == 0 {
        return Err(invalid("robustness query needs at least one outlier"));
    }
    let alpha = q.error.tail_alpha();
    let nu = q.nu.unwrap_or(alpha + 1.0);
    if !(nu > alpha) {
        return Err(invalid(format!("nu must exceed alpha ({alpha}), got {nu}")));
    }
    let prior_bound_m = bound_evidence(nu)?;
    let threshold = moment_threshold(&q.prior);
    let load = q.n_outliers as f64 * alpha;
    let sym = q.prior.threshold_symbol();
    let (verdict, condition) = if load < threshold {
        let c = if threshold.is_infinite() { "✓".to_string() } else { format!("{sym} > |L|α") };
        (Verdict::Robust, c)
    } else if alpha > 0.0 && load > threshold {
        (Verdict::NonRobust, format!("{sym} < |L|α"))
    } else {
        (Verdict::Inconclusive, format!("{sym} = |L|α"))
    };
    Ok(RobustnessVerdict { verdict, condition, threshold, load, nu, prior_bound_m })
}
