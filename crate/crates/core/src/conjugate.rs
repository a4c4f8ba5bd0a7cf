//! Exact posterior of the contamination regression under the conjugate
//! normal-inverse-gamma prior.
//!
//! Expanding `prod_i [(1-s) N(y_i | x_i'b, s^2) + s f1(y_i)]` over the subsets
//! `S` of observations assigned to the Gaussian component turns the posterior
//! into a `2^n`-component mixture of NIG densities, each weighted by its
//! marginal likelihood and the `f1` values of the observations left out.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::densities::{ConjugatePrior, ErrorDensity};
use crate::error::{domain, invalid, Error, Result};
use crate::math::{ln_gamma, log_sum_exp, quantile_sorted, LN_2PI};
use crate::par;
use crate::rng::{chunks, stream_rng};

/// Largest number of active observations the subset expansion accepts.
pub const MAX_OBSERVATIONS: usize = 20;

/// Relative tolerance of the column-rank check on the design matrix.
pub const RANK_RTOL: f64 = 1e-10;

/// Relative pivot tolerance below which a precision matrix counts as singular.
pub const CHOLESKY_RTOL: f64 = 1e-12;

/// An observation that moves along `y_i = a + b * omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outlier {
    /// Zero-based observation index.
    pub index: usize,
    pub a: f64,
    pub b: f64,
}

/// Responses, design matrix and outlier schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    outliers: Vec<Outlier>,
}

impl RegressionData {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, outliers: Vec<Outlier>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(invalid("need at least one observation"));
        }
        if x.nrows() != n {
            return Err(invalid(format!("X has {} rows but y has {n} entries", x.nrows())));
        }
        if x.ncols() == 0 {
            return Err(invalid("X must have at least one column"));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("y and X must be finite"));
        }
        let mut seen = vec![false; n];
        for o in &outliers {
            if o.index >= n {
                return Err(invalid(format!("outlier index {} out of range for n = {n}", o.index + 1)));
            }
            if seen[o.index] {
                return Err(invalid(format!("outlier index {} listed twice", o.index + 1)));
            }
            seen[o.index] = true;
            if o.b == 0.0 || !o.b.is_finite() || !o.a.is_finite() {
                return Err(invalid(format!(
                    "outlier {} needs finite a and nonzero finite b, got a={}, b={}",
                    o.index + 1,
                    o.a,
                    o.b
                )));
            }
        }
        check_full_rank(&x)?;
        Ok(Self { y, x, outliers })
    }

    /// Build from row-major covariates.
    pub fn from_rows(y: Vec<f64>, rows: &[Vec<f64>], outliers: Vec<Outlier>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(invalid("all rows of X must have the same length"));
        }
        let x = DMatrix::from_row_iterator(rows.len(), p, rows.iter().flatten().copied());
        Self::new(DVector::from_vec(y), x, outliers)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn outliers(&self) -> &[Outlier] {
        &self.outliers
    }

    /// Indices in `L`, ascending.
    pub fn outlier_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.outliers.iter().map(|o| o.index).collect();
        v.sort_unstable();
        v
    }

    /// Indices in `K = {0..n} \ L`, ascending.
    pub fn clean_indices(&self) -> Vec<usize> {
        let l = self.outlier_indices();
        (0..self.n()).filter(|i| l.binary_search(i).is_err()).collect()
    }

    /// Same data with an empty outlier set.
    pub fn without_outliers(&self) -> Self {
        Self { outliers: Vec::new(), ..self.clone() }
    }

    /// Responses with `y_i = a_i + b_i * omega` substituted for every `i` in `L`.
    pub fn materialize_outliers(&self, omega: f64) -> Result<DVector<f64>> {
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(domain(format!("omega must be finite and > 0, got {omega}")));
        }
        let mut y = self.y.clone();
        for o in &self.outliers {
            y[o.index] = o.a + o.b * omega;
        }
        Ok(y)
    }
}

fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() < x.ncols() {
        return Err(invalid(format!("X is {}x{}; need at least as many rows as columns", x.nrows(), x.ncols())));
    }
    let sv = x.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= RANK_RTOL * max {
        return Err(invalid(format!(
            "X is rank deficient (singular values span [{min:e}, {max:e}])"
        )));
    }
    Ok(())
}

/// Normal-inverse-gamma parameters: `beta | sigma ~ N(mu, sigma^2 Lambda^-1)`
/// and `sigma^2 ~ IG(shape, scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NigParams {
    pub mu: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub shape: f64,
    pub scale: f64,
}

impl NigParams {
    /// `mu = 0`, `Lambda = I / C^2`, `shape = A`, `scale = B`.
    pub fn from_prior(prior: &ConjugatePrior, p: usize) -> Self {
        Self {
            mu: DVector::zeros(p),
            lambda: DMatrix::identity(p, p) / (prior.c * prior.c),
            shape: prior.a,
            scale: prior.b,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if self.lambda.shape() != (p, p) {
            return Err(invalid("Lambda must be p x p"));
        }
        if (&self.lambda - self.lambda.transpose()).amax() > 1e-12 * self.lambda.amax().max(1.0) {
            return Err(invalid("Lambda must be symmetric"));
        }
        if !(self.shape > 0.0 && self.scale > 0.0) || !self.shape.is_finite() || !self.scale.is_finite() {
            return Err(invalid(format!(
                "shape and scale must be finite and > 0, got ({}, {})",
                self.shape, self.scale
            )));
        }
        factor(&self.lambda).map(|_| ())
    }

    /// Log-density in `(beta, sigma)`, Jacobian of `sigma^2 -> sigma` included.
    pub fn log_density(&self, beta: &[f64], sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(domain(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(PreparedNig::new(self.clone())?.log_density(beta, sigma))
    }
}

fn factor(lambda: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = lambda.diagonal().amax();
    let chol = Cholesky::new(lambda.clone())
        .ok_or_else(|| Error::Factorization("precision matrix is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > CHOLESKY_RTOL * scale) {
        return Err(Error::Factorization(format!(
            "precision matrix numerically singular (pivot {min_pivot:e} vs diagonal scale {scale:e})"
        )));
    }
    Ok(chol)
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn check_rows(prior: &NigParams, xs: &DMatrix<f64>, ys: &DVector<f64>) -> Result<()> {
    if xs.nrows() != ys.len() {
        return Err(invalid(format!("Xs has {} rows, ys has {}", xs.nrows(), ys.len())));
    }
    if xs.nrows() > 0 && xs.ncols() != prior.dim() {
        return Err(invalid(format!("Xs has {} columns, prior has dimension {}", xs.ncols(), prior.dim())));
    }
    Ok(())
}

struct Update {
    params: NigParams,
    log_det_prior: f64,
    log_det_post: f64,
}

fn update_inner(prior: &NigParams, xs: &DMatrix<f64>, ys: &DVector<f64>) -> Result<Update> {
    check_rows(prior, xs, ys)?;
    let prior_chol = factor(&prior.lambda)?;
    let log_det_prior = log_det(&prior_chol);
    if ys.is_empty() {
        return Ok(Update { params: prior.clone(), log_det_prior, log_det_post: log_det_prior });
    }
    let lambda = &prior.lambda + xs.transpose() * xs;
    let chol = factor(&lambda)?;
    let rhs = &prior.lambda * &prior.mu + xs.transpose() * ys;
    let mu = chol.solve(&rhs);
    // ys'ys + mu0'L0 mu0 - mu'L mu rewritten as a sum of non-negative terms;
    // the direct form cancels catastrophically once outliers are large.
    let resid = ys - xs * &mu;
    let shift = &mu - &prior.mu;
    let quad = resid.norm_squared() + shift.dot(&(&prior.lambda * &shift));
    let params = NigParams {
        mu,
        lambda,
        shape: prior.shape + ys.len() as f64 / 2.0,
        scale: prior.scale + quad / 2.0,
    };
    let log_det_post = log_det(&chol);
    Ok(Update { params, log_det_prior, log_det_post })
}

/// Conjugate update of `prior` with the Gaussian observations `(Xs, ys)`.
pub fn nig_update(prior: &NigParams, xs: &DMatrix<f64>, ys: &DVector<f64>) -> Result<NigParams> {
    update_inner(prior, xs, ys).map(|u| u.params)
}

fn log_ml_from(prior: &NigParams, u: &Update, m: usize) -> f64 {
    let post = &u.params;
    -(m as f64) / 2.0 * LN_2PI + 0.5 * (u.log_det_prior - u.log_det_post) + prior.shape * prior.scale.ln()
        - post.shape * post.scale.ln()
        + ln_gamma(post.shape)
        - ln_gamma(prior.shape)
}

/// `log ∫ prod_i N(ys_i | xs_i' beta, sigma^2) dPi(beta, sigma)`.
pub fn log_marginal_likelihood(prior: &NigParams, xs: &DMatrix<f64>, ys: &DVector<f64>) -> Result<f64> {
    let u = update_inner(prior, xs, ys)?;
    Ok(log_ml_from(prior, &u, ys.len()))
}

/// NIG parameters with the Cholesky factor and normalising constants cached.
#[derive(Debug, Clone)]
pub struct PreparedNig {
    params: NigParams,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl PreparedNig {
    pub fn new(params: NigParams) -> Result<Self> {
        params.validate()?;
        let chol = factor(&params.lambda)?;
        let p = params.dim() as f64;
        let log_norm = -0.5 * p * LN_2PI
            + 0.5 * log_det(&chol)
            + std::f64::consts::LN_2
            + params.shape * params.scale.ln()
            - ln_gamma(params.shape);
        Ok(Self { chol_l: chol.l(), params, log_norm })
    }

    pub fn params(&self) -> &NigParams {
        &self.params
    }

    /// Log-density in `(beta, sigma)`; `sigma > 0` is the caller's job.
    pub fn log_density(&self, beta: &[f64], sigma: f64) -> f64 {
        let p = self.params.dim();
        let mu = &self.params.mu;
        let lam = &self.params.lambda;
        let mut quad = 0.0;
        for i in 0..p {
            let di = beta[i] - mu[i];
            let mut row = 0.0;
            for j in 0..p {
                row += lam[(i, j)] * (beta[j] - mu[j]);
            }
            quad += di * row;
        }
        let s2 = sigma * sigma;
        self.log_norm - (p as f64 + 2.0 * self.params.shape + 1.0) * sigma.ln()
            - (quad / 2.0 + self.params.scale) / s2
    }

    /// Draw `(beta, sigma)`: precision from `Gamma(shape, rate = scale)`, then
    /// `beta ~ N(mu, sigma^2 Lambda^-1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let gamma = Gamma::new(self.params.shape, 1.0 / self.params.scale).expect("validated shape/scale");
        let tau: f64 = gamma.sample(rng);
        let sigma = tau.sqrt().recip();
        let p = self.params.dim();
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
        // Lambda = L L', so L'^-1 z has covariance Lambda^-1
        let w = self
            .chol_l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        let beta = (0..p).map(|i| self.params.mu[i] + sigma * w[i]).collect();
        (beta, sigma)
    }
}

/// One term of the subset expansion.
#[derive(Debug, Clone)]
pub struct Component {
    /// Bit `i` set when observation `i` (zero-based) is assigned to the
    /// Gaussian component.
    pub subset: u32,
    pub log_weight: f64,
    nig: PreparedNig,
}

impl Component {
    pub fn params(&self) -> &NigParams {
        self.nig.params()
    }

    pub fn prepared(&self) -> &PreparedNig {
        &self.nig
    }
}

/// Single-pass log-sum-exp; the result depends on push order only through
/// rounding, and callers push in component order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StreamLse {
    max: f64,
    acc: f64,
}

impl Default for StreamLse {
    fn default() -> Self {
        Self { max: f64::NEG_INFINITY, acc: 0.0 }
    }
}

impl StreamLse {
    pub(crate) fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.acc = self.acc * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.acc += (x - self.max).exp();
        }
    }

    pub(crate) fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.acc.ln()
        }
    }
}

/// Normalised NIG mixture posterior.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    components: Vec<Component>,
    s: f64,
    error: ErrorDensity,
    dim: usize,
    active: Vec<usize>,
    cumulative: Vec<f64>,
    log_evidence: f64,
}

/// A posterior draw tagged with the component it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub component: usize,
    pub beta: Vec<f64>,
    pub sigma: f64,
}

fn check_s(s: f64) -> Result<()> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("contamination probability s must lie in (0, 1), got {s}")))
    }
}

impl MixturePosterior {
    /// Assemble a mixture from `(subset, unnormalised log-weight, params)`
    /// triples; the weights are normalised here.
    pub fn from_weighted(parts: Vec<(u32, f64, NigParams)>, s: f64, error: ErrorDensity) -> Result<Self> {
        check_s(s)?;
        if parts.is_empty() {
            return Err(invalid("a mixture needs at least one component"));
        }
        let dim = parts[0].2.dim();
        let mut raw = Vec::with_capacity(parts.len());
        for (subset, lw, params) in parts {
            if params.dim() != dim {
                return Err(invalid("all components must share the same dimension"));
            }
            raw.push((subset, lw, PreparedNig::new(params)?));
        }
        Self::normalize(raw, s, error, dim, Vec::new())
    }

    fn normalize(
        raw: Vec<(u32, f64, PreparedNig)>,
        s: f64,
        error: ErrorDensity,
        dim: usize,
        active: Vec<usize>,
    ) -> Result<Self> {
        let lws: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let total = log_sum_exp(&lws);
        if !total.is_finite() {
            return Err(Error::Domain(format!("mixture weights do not normalise (log total {total})")));
        }
        let components: Vec<Component> = raw
            .into_iter()
            .map(|(subset, lw, nig)| Component { subset, log_weight: lw - total, nig })
            .collect();
        let mut acc = 0.0;
        let cumulative = components
            .iter()
            .map(|c| {
                acc += c.log_weight.exp();
                acc
            })
            .collect();
        Ok(Self { components, s, error, dim, active, cumulative, log_evidence: total })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn error(&self) -> &ErrorDensity {
        &self.error
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Zero-based indices of the observations that entered the model.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Bitmask of [`Self::active`].
    pub fn active_mask(&self) -> u32 {
        self.active.iter().fold(0, |m, &i| m | 1 << i)
    }

    /// Log-sum-exp of the unnormalised component weights. For a mixture
    /// built from data this is the log marginal likelihood of the
    /// contamination model.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.log_weight).collect()
    }

    /// `sum_S w_S mu_S`.
    pub fn mean_beta(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + c.params().mu.clone() * c.log_weight.exp())
    }

    /// Log posterior density in `(beta, sigma)`.
    pub fn log_density(&self, beta: &[f64], sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(domain(format!("sigma must be > 0, got {sigma}")));
        }
        if beta.len() != self.dim {
            return Err(invalid(format!("beta has length {}, expected {}", beta.len(), self.dim)));
        }
        Ok(self.log_density_unchecked(beta, sigma))
    }

    pub(crate) fn log_density_unchecked(&self, beta: &[f64], sigma: f64) -> f64 {
        let mut lse = StreamLse::default();
        for c in &self.components {
            lse.push(c.log_weight + c.nig.log_density(beta, sigma));
        }
        lse.value()
    }

    /// Log of the mixture density split into components whose subset avoids
    /// `mask` and the rest: `(log sum_{S & mask = 0}, log sum_{S & mask != 0})`,
    /// each term weighted by its normalised weight.
    pub(crate) fn log_density_split(&self, beta: &[f64], sigma: f64, mask: u32) -> (f64, f64) {
        let mut keep = StreamLse::default();
        let mut rest = StreamLse::default();
        for c in &self.components {
            let x = c.log_weight + c.nig.log_density(beta, sigma);
            if c.subset & mask == 0 {
                keep.push(x);
            } else {
                rest.push(x);
            }
        }
        (keep.value(), rest.value())
    }

    fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("nonempty mixture");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.components.len() - 1)
    }

    pub(crate) fn draw_one(&self, rng: &mut ChaCha8Rng) -> Draw {
        let component = self.pick_component(rng);
        let (beta, sigma) = self.components[component].nig.sample(rng);
        Draw { component, beta, sigma }
    }

    /// `count` i.i.d. draws with their component labels. Chunks of fixed size
    /// each get their own `(seed, chunk)` stream.
    pub fn sample_labeled(&self, count: usize, seed: u64) -> Vec<Draw> {
        par::map_indexed(chunks(count).len(), |c| {
            let len = chunks(count)[c].1;
            let mut rng = stream_rng(seed, c as u64);
            (0..len).map(|_| self.draw_one(&mut rng)).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Subset expansion of the contamination likelihood at outlier magnitude
/// `omega`. With `restrict_to`, only those (zero-based) observations enter.
pub fn build_mixture_posterior(
    data: &RegressionData,
    omega: f64,
    prior: &NigParams,
    s: f64,
    err: &ErrorDensity,
    restrict_to: Option<&[usize]>,
) -> Result<MixturePosterior> {
    check_s(s)?;
    err.validate()?;
    prior.validate()?;
    if prior.dim() != data.p() {
        return Err(invalid(format!("prior dimension {} does not match p = {}", prior.dim(), data.p())));
    }
    let active: Vec<usize> = match restrict_to {
        Some(idx) => {
            let mut v = idx.to_vec();
            v.sort_unstable();
            v.dedup();
            if let Some(&bad) = v.iter().find(|&&i| i >= data.n()) {
                return Err(invalid(format!("restricted index {} out of range", bad + 1)));
            }
            v
        }
        None => (0..data.n()).collect(),
    };
    let n_active = active.len();
    if n_active > MAX_OBSERVATIONS {
        return Err(Error::TooManyObservations { active: n_active, cap: MAX_OBSERVATIONS });
    }
    let y = data.materialize_outliers(omega)?;
    let x = data.x();
    let p = data.p();
    let log_f1: Vec<f64> = active.iter().map(|&i| err.log_pdf(y[i])).collect::<Result<_>>()?;
    let (ln_clean, ln_contam) = ((1.0 - s).ln(), s.ln());

    let raw = par::map_indexed(1usize << n_active, |local| -> Result<(u32, f64, PreparedNig)> {
        let members: Vec<usize> = (0..n_active).filter(|k| local >> k & 1 == 1).collect();
        let xs = DMatrix::from_fn(members.len(), p, |r, c| x[(active[members[r]], c)]);
        let ys = DVector::from_fn(members.len(), |r, _| y[active[members[r]]]);
        let u = update_inner(prior, &xs, &ys)?;
        let in_s = members.len();
        let excluded: f64 = (0..n_active).filter(|k| local >> k & 1 == 0).map(|k| log_f1[k]).sum();
        let lw = in_s as f64 * ln_clean
            + (n_active - in_s) as f64 * ln_contam
            + excluded
            + log_ml_from(prior, &u, in_s);
        let subset = members.iter().fold(0u32, |m, &k| m | 1 << active[k]);
        Ok((subset, lw, PreparedNig::new(u.params)?))
    });
    let raw = raw.into_iter().collect::<Result<Vec<_>>>()?;
    MixturePosterior::normalize(raw, s, *err, p, active)
}

/// Log posterior density of the mixture at `(beta, sigma)`.
pub fn log_posterior_density(mix: &MixturePosterior, beta: &[f64], sigma: f64) -> Result<f64> {
    mix.log_density(beta, sigma)
}

/// `count` i.i.d. posterior draws, deterministic in `seed`.
pub fn sample_posterior(mix: &MixturePosterior, count: usize, seed: u64) -> Result<Vec<(Vec<f64>, f64)>> {
    if count == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    Ok(mix.sample_labeled(count, seed).into_iter().map(|d| (d.beta, d.sigma)).collect())
}

/// Default credible levels for predictive summaries.
pub const DEFAULT_LEVELS: [f64; 3] = [0.025, 0.5, 0.975];

/// Empirical quantiles of the linear predictor and the predictive response.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveQuantiles {
    pub levels: Vec<f64>,
    pub linpred: Vec<f64>,
    pub predictive: Vec<f64>,
}

/// Quantiles of `xt' beta` and of `y~ ~ (1-s) N(xt' beta, sigma^2) + s f1`
/// under posterior draws.
pub fn predictive_quantiles(
    mix: &MixturePosterior,
    xt: &[f64],
    s: f64,
    err: &ErrorDensity,
    levels: &[f64],
    count: usize,
    seed: u64,
) -> Result<PredictiveQuantiles> {
    check_s(s)?;
    if xt.len() != mix.dim() {
        return Err(invalid(format!("xt has length {}, expected {}", xt.len(), mix.dim())));
    }
    if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(invalid("quantile levels must be nonempty and lie in (0, 1)"));
    }
    if count == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    let pieces = par::map_indexed(chunks(count).len(), |c| {
        let len = chunks(count)[c].1;
        let mut rng = stream_rng(seed, c as u64);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let d = mix.draw_one(&mut rng);
            let lin: f64 = d.beta.iter().zip(xt).map(|(b, x)| b * x).sum();
            let y = if rng.random::<f64>() < s {
                err.sample(&mut rng)
            } else {
                let z: f64 = StandardNormal.sample(&mut rng);
                lin + d.sigma * z
            };
            out.push((lin, y));
        }
        out
    });
    let (mut lin, mut pred): (Vec<f64>, Vec<f64>) = pieces.into_iter().flatten().unzip();
    lin.sort_by(f64::total_cmp);
    pred.sort_by(f64::total_cmp);
    Ok(PredictiveQuantiles {
        levels: levels.to_vec(),
        linpred: levels.iter().map(|&l| quantile_sorted(&lin, l)).collect(),
        predictive: levels.iter().map(|&l| quantile_sorted(&pred, l)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_prior_1d() -> NigParams {
        NigParams { mu: DVector::from_vec(vec![0.0]), lambda: DMatrix::identity(1, 1), shape: 1.0, scale: 1.0 }
    }

    pub(crate) fn demo_data() -> RegressionData {
        let rows: Vec<Vec<f64>> = (3..=7).map(|k| vec![1.0, 2.0 - 1.0 / k as f64]).collect();
        RegressionData::from_rows(vec![1.0, 2.0, 3.0, 4.0, 5.0], &rows, vec![Outlier { index: 4, a: 0.0, b: 1.0 }])
            .unwrap()
    }

    #[test]
    fn materialize() {
        let d = demo_data();
        let y = d.materialize_outliers(100.0).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0, 4.0, 100.0]);
        let y = d.without_outliers().materialize_outliers(1e5).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let d2 = RegressionData::from_rows(
            vec![0.0, 1.0],
            &[vec![1.0], vec![2.0]],
            vec![Outlier { index: 0, a: 1.0, b: -2.0 }],
        )
        .unwrap();
        assert_eq!(d2.materialize_outliers(10.0).unwrap()[0], -19.0);
        assert!(d.materialize_outliers(0.0).is_err());
    }

    #[test]
    fn data_validation() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        assert!(RegressionData::from_rows(vec![1.0, 2.0, 3.0], &rows, vec![]).is_err());
        let rows = vec![vec![1.0], vec![2.0]];
        assert!(RegressionData::from_rows(vec![1.0], &rows, vec![]).is_err());
        let bad = vec![Outlier { index: 0, a: 0.0, b: 0.0 }];
        assert!(RegressionData::from_rows(vec![1.0, 2.0], &rows, bad).is_err());
        let oob = vec![Outlier { index: 2, a: 0.0, b: 1.0 }];
        assert!(RegressionData::from_rows(vec![1.0, 2.0], &rows, oob).is_err());
        let d = demo_data();
        assert_eq!(d.clean_indices(), vec![0, 1, 2, 3]);
        assert_eq!(d.outlier_indices(), vec![4]);
    }

    #[test]
    fn update_empty_is_identity() {
        let prior = NigParams::from_prior(&ConjugatePrior::new(0.7, 1.3, 2.0).unwrap(), 2);
        let post = nig_update(&prior, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        assert_eq!(post, prior);
        let lml = log_marginal_likelihood(&prior, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        assert_eq!(lml, 0.0);
    }

    #[test]
    fn update_hand_arithmetic() {
        let prior = unit_prior_1d();
        let xs = DMatrix::from_element(1, 1, 1.0);
        let ys = DVector::from_element(1, 2.0);
        let post = nig_update(&prior, &xs, &ys).unwrap();
        assert!((post.lambda[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((post.mu[0] - 1.0).abs() < 1e-15);
        assert!((post.shape - 1.5).abs() < 1e-15);
        assert!((post.scale - 2.0).abs() < 1e-15);
        let lml = log_marginal_likelihood(&prior, &xs, &ys).unwrap();
        let expected = -0.5 * LN_2PI + 0.5 * 0.5f64.ln() - 1.5 * 2f64.ln() + ln_gamma(1.5);
        assert!((lml - expected).abs() < 1e-14);
    }

    #[test]
    fn singular_precision_rejected() {
        let prior = NigParams {
            mu: DVector::zeros(2),
            lambda: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            shape: 1.0,
            scale: 1.0,
        };
        let r = nig_update(&prior, &DMatrix::zeros(0, 2), &DVector::zeros(0));
        assert!(matches!(r, Err(Error::Factorization(_))));
    }

    #[test]
    fn two_term_weights_for_single_observation() {
        let d = RegressionData::from_rows(vec![2.0], &[vec![1.0]], vec![]).unwrap();
        let prior = unit_prior_1d();
        let err = ErrorDensity::scaled_beta_tails(3.0).unwrap();
        let s = 0.3;
        let mix = build_mixture_posterior(&d, 1.0, &prior, s, &err, None).unwrap();
        assert_eq!(mix.components().len(), 2);
        let ml = log_marginal_likelihood(&prior, &DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 2.0))
            .unwrap()
            .exp();
        let f1 = err.pdf(2.0).unwrap();
        let w_in = (1.0 - s) * ml / ((1.0 - s) * ml + s * f1);
        let c_in = mix.components().iter().find(|c| c.subset == 1).unwrap();
        let c_out = mix.components().iter().find(|c| c.subset == 0).unwrap();
        assert!((c_in.log_weight.exp() - w_in).abs() < 1e-14);
        assert!((c_out.log_weight.exp() - (1.0 - w_in)).abs() < 1e-14);
        assert_eq!(c_out.params(), &prior);
    }

    #[test]
    fn demo_has_32_normalised_components() {
        let d = demo_data();
        for a in [0.1, 2.0] {
            let prior = NigParams::from_prior(&ConjugatePrior::new(a, 1.0, 1.0).unwrap(), 2);
            for err in [ErrorDensity::scaled_beta_tails(3.0).unwrap(), ErrorDensity::log_pareto(1.5).unwrap()] {
                for omega in [10.0, 1e5, 1e8] {
                    let mix = build_mixture_posterior(&d, omega, &prior, 0.1, &err, None).unwrap();
                    assert_eq!(mix.components().len(), 32);
                    assert!(log_sum_exp(&mix.log_weights()).abs() < 1e-10);
                    let clean = build_mixture_posterior(&d, omega, &prior, 0.1, &err, Some(&d.clean_indices())).unwrap();
                    assert_eq!(clean.components().len(), 16);
                    assert!(clean.components().iter().all(|c| c.subset & 0b10000 == 0));
                }
            }
        }
    }

    #[test]
    fn too_many_observations() {
        let n = 21;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, i as f64]).collect();
        let d = RegressionData::from_rows((0..n).map(|i| i as f64).collect(), &rows, vec![]).unwrap();
        let prior = NigParams::from_prior(&ConjugatePrior::new(1.0, 1.0, 1.0).unwrap(), 2);
        let err = ErrorDensity::scaled_beta_tails(3.0).unwrap();
        let r = build_mixture_posterior(&d, 1.0, &prior, 0.1, &err, None);
        assert!(matches!(r, Err(Error::TooManyObservations { active: 21, cap: 20 })));
        let sub: Vec<usize> = (0..5).collect();
        assert!(build_mixture_posterior(&d, 1.0, &prior, 0.1, &err, Some(&sub)).is_ok());
    }

    #[test]
    fn single_component_reduces_to_nig() {
        let params = NigParams {
            mu: DVector::from_vec(vec![0.5, -1.0]),
            lambda: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            shape: 2.5,
            scale: 1.7,
        };
        let err = ErrorDensity::log_pareto(1.5).unwrap();
        let mix = MixturePosterior::from_weighted(vec![(0, -123.0, params.clone())], 0.1, err).unwrap();
        for (b, s) in [([0.0, 0.0], 1.0), ([1.0, -2.0], 0.4), ([3.0, 1.0], 2.5)] {
            let a = mix.log_density(&b, s).unwrap();
            let e = params.log_density(&b, s).unwrap();
            assert!((a - e).abs() < 1e-13);
        }
        assert!(mix.log_density(&[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = demo_data();
        let prior = NigParams::from_prior(&ConjugatePrior::new(2.0, 1.0, 1.0).unwrap(), 2);
        let err = ErrorDensity::log_pareto(1.5).unwrap();
        let mix = build_mixture_posterior(&d, 100.0, &prior, 0.1, &err, None).unwrap();
        let a = sample_posterior(&mix, 1000, 42).unwrap();
        let b = sample_posterior(&mix, 1000, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_posterior(&mix, 1000, 43).unwrap();
        assert_ne!(a, c);
        assert!(sample_posterior(&mix, 0, 1).is_err());
    }

    #[test]
    fn quantile_levels_validated() {
        let d = demo_data();
        let prior = NigParams::from_prior(&ConjugatePrior::new(2.0, 1.0, 1.0).unwrap(), 2);
        let err = ErrorDensity::log_pareto(1.5).unwrap();
        let mix = build_mixture_posterior(&d, 100.0, &prior, 0.1, &err, None).unwrap();
        assert!(predictive_quantiles(&mix, &[1.0, 1.5], 0.1, &err, &[0.0], 100, 1).is_err());
        assert!(predictive_quantiles(&mix, &[1.0], 0.1, &err, &[0.5], 100, 1).is_err());
        let q = predictive_quantiles(&mix, &[1.0, 1.5], 0.1, &err, &DEFAULT_LEVELS, 2000, 1).unwrap();
        assert!(q.linpred.windows(2).all(|w| w[0] <= w[1]));
        assert!(q.predictive.windows(2).all(|w| w[0] <= w[1]));
    }
}
