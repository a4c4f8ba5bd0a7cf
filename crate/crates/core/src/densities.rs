//! Log-densities for the contaminating error component and the conjugate
//! prior, plus numeric checks of the prior and error tail bounds.
//!
//! Everything is evaluated in log space. Linear-space values are only
//! available through the explicit `pdf`/`density` wrappers.

use rand::Rng;

use crate::error::{domain, invalid, Result};
use crate::math::{ln_gamma, LN_2PI};

/// Parameter-free error density `f1` of the contamination component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorDensity {
    /// `(alpha/2) (1+|y|)^(-1-alpha)`, polynomial (Student-t like) tails.
    ScaledBetaTails { alpha: f64 },
    /// `(gamma/2) (1+|y|)^(-1) {1+log(1+|y|)}^(-1-gamma)`, log-Pareto tails.
    LogPareto { gamma: f64 },
}

/// Tail exponents `(alpha, gamma)` of the lower bound a density satisfies
/// with equality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl ErrorDensity {
    pub fn scaled_beta_tails(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("alpha must be finite and > 0, got {alpha}")));
        }
        Ok(Self::ScaledBetaTails { alpha })
    }

    pub fn log_pareto(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("gamma must be finite and > 0, got {gamma}")));
        }
        Ok(Self::LogPareto { gamma })
    }

    /// Re-check the parameter invariant (useful after deserialization).
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::ScaledBetaTails { alpha } => Self::scaled_beta_tails(alpha).map(|_| ()),
            Self::LogPareto { gamma } => Self::log_pareto(gamma).map(|_| ()),
        }
    }

    /// Exponents reported to the robustness checker. Scaled-beta tails map to
    /// `(alpha, -1)`, log-Pareto to `(0, gamma)`.
    pub fn tail_params(&self) -> TailParams {
        match *self {
            Self::ScaledBetaTails { alpha } => TailParams { alpha, gamma: -1.0 },
            Self::LogPareto { gamma } => TailParams { alpha: 0.0, gamma },
        }
    }

    /// Polynomial tail exponent used by the robustness conditions.
    pub fn tail_alpha(&self) -> f64 {
        self.tail_params().alpha
    }

    pub fn log_pdf(&self, y: f64) -> Result<f64> {
        match *self {
            Self::ScaledBetaTails { alpha } => log_f1_light(y, alpha),
            Self::LogPareto { gamma } => log_f1_heavy(y, gamma),
        }
    }

    /// Linear-space density. May underflow to zero far in the tails.
    pub fn pdf(&self, y: f64) -> Result<f64> {
        self.log_pdf(y).map(f64::exp)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let upper = 0.5 * self.upper_tail(y.abs());
        if y >= 0.0 {
            1.0 - upper
        } else {
            upper
        }
    }

    /// `2 P(Y > t)` for `t >= 0`.
    fn upper_tail(&self, t: f64) -> f64 {
        match *self {
            Self::ScaledBetaTails { alpha } => (-alpha * t.ln_1p()).exp(),
            Self::LogPareto { gamma } => (-gamma * t.ln_1p().ln_1p()).exp(),
        }
    }

    /// Inverse-CDF draw. The log-Pareto variant can return `±inf` when the
    /// uniform lands within one ulp of the boundary.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // q in (0, 1] is the two-sided tail probability of |Y|
        let q = 1.0 - rng.random::<f64>();
        let magnitude = match *self {
            Self::ScaledBetaTails { alpha } => q.powf(-1.0 / alpha) - 1.0,
            Self::LogPareto { gamma } => (q.powf(-1.0 / gamma) - 1.0).exp_m1(),
        };
        if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    }
}

/// Exponents and constants of the prior-ratio and error lower bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSpec {
    pub kappa: f64,
    pub nu: f64,
    pub m: f64,
    pub m_prime: f64,
}

impl BoundSpec {
    pub fn new(kappa: f64, nu: f64, m: f64, m_prime: f64) -> Result<Self> {
        let spec = Self { kappa, nu, m, m_prime };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kappa", self.kappa), ("nu", self.nu), ("M", self.m), ("M'", self.m_prime)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.kappa > 1.0 {
            return Err(invalid(format!("kappa must be <= 1, got {}", self.kappa)));
        }
        Ok(())
    }
}

fn check_finite(y: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("y must be finite, got {y}")))
    }
}

/// `log[(alpha/2) (1+|y|)^(-1-alpha)]`.
pub fn log_f1_light(y: f64, alpha: f64) -> Result<f64> {
    check_finite(y)?;
    if !(alpha > 0.0) {
        return Err(domain(format!("alpha must be > 0, got {alpha}")));
    }
    Ok((alpha / 2.0).ln() - (1.0 + alpha) * y.abs().ln_1p())
}

/// `log[(gamma/2) (1+|y|)^(-1) {1+log(1+|y|)}^(-1-gamma)]`.
pub fn log_f1_heavy(y: f64, gamma: f64) -> Result<f64> {
    check_finite(y)?;
    if !(gamma > 0.0) {
        return Err(domain(format!("gamma must be > 0, got {gamma}")));
    }
    let l = y.abs().ln_1p();
    Ok((gamma / 2.0).ln() - l - (1.0 + gamma) * l.ln_1p())
}

/// Hyperparameters of the conjugate normal-inverse-gamma prior
/// `sigma^2 ~ IG(a, b)`, `beta | sigma ~ N(0, c^2 sigma^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugatePrior {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ConjugatePrior {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let p = Self { a, b, c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("A", self.a), ("B", self.b), ("C", self.c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("prior {name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn log_density(&self, beta: &[f64], sigma: f64) -> Result<f64> {
        log_prior_nig(beta, sigma, self.a, self.b, self.c)
    }

    /// Log of the conditional prior `pi(beta | sigma)`.
    pub fn log_conditional(&self, beta: &[f64], sigma: f64) -> f64 {
        let p = beta.len() as f64;
        let sq: f64 = beta.iter().map(|b| b * b).sum();
        -0.5 * p * LN_2PI - p * (self.c.ln() + sigma.ln()) - sq / (2.0 * self.c * self.c * sigma * sigma)
    }

    /// Log of the marginal prior density of `sigma` (inverse gamma on `sigma^2`
    /// pushed to `sigma`).
    pub fn log_sigma_marginal(&self, sigma: f64) -> f64 {
        std::f64::consts::LN_2 + self.a * self.b.ln() - ln_gamma(self.a)
            - (2.0 * self.a + 1.0) * sigma.ln()
            - self.b / (sigma * sigma)
    }
}

/// Joint log-density of the conjugate prior in `(beta, sigma)`. This is the
/// density with respect to `sigma`, not `sigma^2`.
pub fn log_prior_nig(beta: &[f64], sigma: f64, a: f64, b: f64, c: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(domain(format!("sigma must be finite and > 0, got {sigma}")));
    }
    let prior = ConjugatePrior { a, b, c };
    prior.validate()?;
    Ok(prior.log_sigma_marginal(sigma) + prior.log_conditional(beta, sigma))
}

/// Outcome of a lower-bound check over a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub holds: bool,
    /// Minimum over the grid of `f1(y) / bound(y)` (with `M'` folded in).
    pub worst_ratio: f64,
    pub worst_at: f64,
}

/// Relative slack allowed when deciding `ratio >= 1`, so that densities
/// meeting the bound with equality are not rejected by rounding.
pub const BOUND_RTOL: f64 = 1e-12;

/// Checks `f1(y) >= (1/M') (1+|y|)^(-1-alpha) {1+log(1+|y|)}^(-1-gamma)` at
/// every grid point.
pub fn check_error_lower_bound(
    f: &ErrorDensity,
    alpha: f64,
    gamma: f64,
    m_prime: f64,
    grid: &[f64],
) -> Result<BoundCheck> {
    if grid.is_empty() {
        return Err(invalid("bound grid must be nonempty"));
    }
    if !(alpha >= 0.0) || !(gamma >= -1.0) || !(m_prime > 0.0) {
        return Err(invalid(format!(
            "need alpha >= 0, gamma >= -1, M' > 0; got ({alpha}, {gamma}, {m_prime})"
        )));
    }
    let mut worst = f64::INFINITY;
    let mut worst_at = grid[0];
    for &y in grid {
        let l = y.abs().ln_1p();
        let log_ratio = f.log_pdf(y)? + m_prime.ln() + (1.0 + alpha) * l + (1.0 + gamma) * l.ln_1p();
        let ratio = log_ratio.exp();
        if ratio < worst {
            worst = ratio;
            worst_at = y;
        }
    }
    Ok(BoundCheck { holds: worst >= 1.0 - BOUND_RTOL, worst_ratio: worst, worst_at })
}

/// Default tail grid: `0` plus `±` 5000 logarithmically spaced points in
/// `[1e-6, 1e6]`.
pub fn default_bound_grid() -> Vec<f64> {
    log_spaced_symmetric(1e-6, 1e6, 5000)
}

pub(crate) fn log_spaced_symmetric(lo: f64, hi: f64, per_side: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    let pos: Vec<f64> = (0..per_side)
        .map(|i| (llo + (lhi - llo) * i as f64 / (per_side - 1) as f64).exp())
        .collect();
    let mut grid: Vec<f64> = pos.iter().rev().map(|v| -v).collect();
    grid.push(0.0);
    grid.extend(pos);
    grid
}

/// Grid supremum of the prior ratio against the product scaled-beta bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupRatio {
    /// Supremum over the p-dimensional product grid, i.e. an empirical `M`.
    pub sup: f64,
    /// Per-coordinate maximiser of the one-dimensional factor.
    pub argmax: f64,
}

/// Supremum over `t = beta/sigma` of
/// `pi(beta|sigma) / prod_k (1/sigma)(|t_k|)^(kappa-1) (1+|t_k|)^(-kappa-nu)`.
///
/// The normal conditional prior factorises over coordinates and the ratio is
/// scale free, so the supremum is the one-dimensional grid supremum raised to
/// the `p`-th power.
pub fn prior_bound_sup_ratio(prior: &ConjugatePrior, p: usize, kappa: f64, nu: f64, grid: &[f64]) -> Result<SupRatio> {
    if !(kappa > 0.0 && kappa <= 1.0) || !(nu > 0.0) {
        return Err(invalid(format!("need 0 < kappa <= 1 and nu > 0, got ({kappa}, {nu})")));
    }
    if grid.is_empty() {
        return Err(invalid("ratio grid must be nonempty"));
    }
    let c = prior.c;
    let mut best = f64::NEG_INFINITY;
    let mut argmax = grid[0];
    for &t in grid {
        let a = t.abs();
        let log_normal = -0.5 * LN_2PI - c.ln() - a * a / (2.0 * c * c);
        let log_bound = if kappa == 1.0 { 0.0 } else { (kappa - 1.0) * a.ln() } - (kappa + nu) * a.ln_1p();
        let lr = log_normal - log_bound;
        if lr > best {
            best = lr;
            argmax = t;
        }
    }
    Ok(SupRatio { sup: (p as f64 * best).exp(), argmax })
}

/// Tail ratio `f((y1 - xb)/sigma) / (sigma f(y1))` under the single-density
/// regression model with `f = (alpha/2)(1+|y|)^(-1-alpha)`. Tends to
/// `sigma^alpha` as `|y1|` grows.
pub fn model1_tail_ratio(y1: f64, xb: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(domain(format!("sigma must be > 0, got {sigma}")));
    }
    let num = log_f1_light((y1 - xb) / sigma, alpha)?;
    let den = log_f1_light(y1, alpha)? + sigma.ln();
    Ok((num - den).exp())
}
