//! Brute-force quadrature over `(beta, sigma)` for `p <= 2`.
//!
//! These routines are deliberately independent of the subset expansion in
//! [`crate::conjugate`]: kernels are evaluated pointwise from the prior and
//! the contamination likelihood and integrated with a composite trapezoid
//! rule. They serve as the reference the exact posterior is checked against.

use crate::conjugate::RegressionData;
use crate::densities::{ConjugatePrior, ErrorDensity};
use crate::error::{invalid, Result};
use crate::math::LN_2PI;
use crate::par;

/// Minimum number of nodes per axis.
pub const MIN_POINTS: usize = 16;

/// A boundary node whose integrand is at least this fraction of the interior
/// maximum raises the boundary warning.
pub const BOUNDARY_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Logarithmic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, points: usize) -> Self {
        Self { lo, hi, points }
    }

    fn scaled(&self, factor: usize) -> Self {
        Self { points: (self.points - 1) * factor + 1, ..*self }
    }
}

/// Tensor-product grid over `beta` (one axis per coordinate) and `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub beta: Vec<Axis>,
    pub sigma: Axis,
    pub sigma_spacing: Spacing,
}

impl GridSpec {
    pub fn new(beta: Vec<Axis>, sigma: Axis, sigma_spacing: Spacing) -> Result<Self> {
        let g = Self { beta, sigma, sigma_spacing };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() || self.beta.len() > 2 {
            return Err(invalid(format!("quadrature supports 1 <= p <= 2, got p = {}", self.beta.len())));
        }
        for ax in self.beta.iter().chain(std::iter::once(&self.sigma)) {
            if ax.points < MIN_POINTS {
                return Err(invalid(format!("each axis needs at least {MIN_POINTS} points, got {}", ax.points)));
            }
            if !(ax.hi > ax.lo) || !ax.lo.is_finite() || !ax.hi.is_finite() {
                return Err(invalid(format!("axis range [{}, {}] is empty or not finite", ax.lo, ax.hi)));
            }
        }
        if !(self.sigma.lo > 0.0) {
            return Err(invalid(format!("sigma range must start above 0, got {}", self.sigma.lo)));
        }
        Ok(())
    }

    /// The same ranges with `(points - 1) * factor + 1` nodes per axis, so
    /// every old node is kept.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            beta: self.beta.iter().map(|a| a.scaled(factor)).collect(),
            sigma: self.sigma.scaled(factor),
            sigma_spacing: self.sigma_spacing,
        }
    }

    /// Beta axes centred at the least-squares fit of the clean observations
    /// with half-width `10 * C * sqrt(B / A)` (ten prior scale units).
    pub fn around_clean_fit(
        data: &RegressionData,
        prior: &ConjugatePrior,
        beta_points: usize,
        sigma: Axis,
        sigma_spacing: Spacing,
    ) -> Result<Self> {
        let center = clean_least_squares(data);
        let half = 10.0 * prior.c * (prior.b / prior.a).sqrt();
        let beta = center.iter().map(|&c| Axis::new(c - half, c + half, beta_points)).collect();
        Self::new(beta, sigma, sigma_spacing)
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }
}

fn clean_least_squares(data: &RegressionData) -> Vec<f64> {
    let k = data.clean_indices();
    let p = data.p();
    if k.len() < p {
        return vec![0.0; p];
    }
    let x = nalgebra::DMatrix::from_fn(k.len(), p, |r, c| data.x()[(k[r], c)]);
    let y = nalgebra::DVector::from_fn(k.len(), |r, _| data.y()[k[r]]);
    match (x.transpose() * &x).cholesky() {
        Some(ch) => ch.solve(&(x.transpose() * y)).iter().copied().collect(),
        None => vec![0.0; p],
    }
}

/// Nodes and log quadrature weights of one axis. For the logarithmic
/// `sigma` axis the rule is trapezoid in `log sigma` with the Jacobian
/// `sigma` folded into the weight.
fn axis_rule(ax: &Axis, spacing: Spacing) -> (Vec<f64>, Vec<f64>) {
    let n = ax.points;
    let end = |i: usize| if i == 0 || i == n - 1 { 0.5f64.ln() } else { 0.0 };
    match spacing {
        Spacing::Linear => {
            let h = (ax.hi - ax.lo) / (n - 1) as f64;
            let nodes = (0..n).map(|i| ax.lo + h * i as f64).collect();
            let w = (0..n).map(|i| h.ln() + end(i)).collect();
            (nodes, w)
        }
        Spacing::Logarithmic => {
            let (ulo, uhi) = (ax.lo.ln(), ax.hi.ln());
            let h = (uhi - ulo) / (n - 1) as f64;
            let us: Vec<f64> = (0..n).map(|i| ulo + h * i as f64).collect();
            let w = us.iter().enumerate().map(|(i, u)| h.ln() + end(i) + u).collect();
            (us.into_iter().map(f64::exp).collect(), w)
        }
    }
}

/// Log of a quadrature integral, with a flag when the integrand has not
/// decayed at the grid boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogIntegral {
    pub log_value: f64,
    pub boundary_warning: bool,
    /// `log(max boundary integrand / max interior integrand)`.
    pub boundary_log_ratio: f64,
}

#[derive(Debug, Clone, Copy)]
struct TileSum {
    max: f64,
    acc: f64,
    boundary_max: f64,
    interior_max: f64,
}

impl TileSum {
    fn empty() -> Self {
        Self { max: f64::NEG_INFINITY, acc: 0.0, boundary_max: f64::NEG_INFINITY, interior_max: f64::NEG_INFINITY }
    }

    fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY || x.is_nan() {
            return;
        }
        if x > self.max {
            self.acc = self.acc * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.acc += (x - self.max).exp();
        }
    }

    fn merge(mut self, o: Self) -> Self {
        if o.max != f64::NEG_INFINITY {
            if o.max > self.max {
                self.acc = self.acc * (self.max - o.max).exp() + o.acc;
                self.max = o.max;
            } else {
                self.acc += o.acc * (o.max - self.max).exp();
            }
        }
        self.boundary_max = self.boundary_max.max(o.boundary_max);
        self.interior_max = self.interior_max.max(o.interior_max);
        self
    }

    fn log_value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.acc.ln()
        }
    }
}

struct Rules {
    beta: Vec<(Vec<f64>, Vec<f64>)>,
    sigma: (Vec<f64>, Vec<f64>),
    sigma_jac: Vec<f64>,
}

impl Rules {
    fn new(grid: &GridSpec) -> Self {
        let sigma = axis_rule(&grid.sigma, grid.sigma_spacing);
        let sigma_jac = match grid.sigma_spacing {
            Spacing::Linear => vec![0.0; grid.sigma.points],
            Spacing::Logarithmic => sigma.0.iter().map(|s| s.ln()).collect(),
        };
        Self { beta: grid.beta.iter().map(|a| axis_rule(a, Spacing::Linear)).collect(), sigma, sigma_jac }
    }

    /// Visit every node of tile `i0` (first beta index fixed) with
    /// `(beta, sigma, log weight, log jacobian, on_boundary)`.
    fn for_tile(&self, i0: usize, mut visit: impl FnMut(&[f64], f64, f64, f64, bool)) {
        let (b0, w0) = &self.beta[0];
        let n0 = b0.len();
        let edge0 = i0 == 0 || i0 == n0 - 1;
        let (sn, sw) = &self.sigma;
        let ns = sn.len();
        let mut beta = vec![b0[i0]; self.beta.len()];
        let inner = if self.beta.len() == 2 { self.beta[1].0.len() } else { 1 };
        for i1 in 0..inner {
            let (wb, edge1) = if self.beta.len() == 2 {
                let (b1, w1) = &self.beta[1];
                beta[1] = b1[i1];
                (w0[i0] + w1[i1], i1 == 0 || i1 == b1.len() - 1)
            } else {
                (w0[i0], false)
            };
            for j in 0..ns {
                let edge = edge0 || edge1 || j == 0 || j == ns - 1;
                visit(&beta, sn[j], wb + sw[j], self.sigma_jac[j], edge);
            }
        }
    }
}

/// `log ∫ exp(kernel(beta, sigma)) d(beta, sigma)` by composite trapezoid,
/// accumulated in log space. Tiles along the first beta axis run in
/// parallel and are merged in index order.
pub fn quadrature_normalizer<K>(kernel: K, grid: &GridSpec) -> Result<LogIntegral>
where
    K: Fn(&[f64], f64) -> f64 + Sync + Send,
{
    grid.validate()?;
    let rules = Rules::new(grid);
    let tiles = par::map_indexed(grid.beta[0].points, |i0| {
        let mut t = TileSum::empty();
        rules.for_tile(i0, |beta, sigma, lw, jac, edge| {
            let k = kernel(beta, sigma);
            let native = k + jac;
            if edge {
                t.boundary_max = t.boundary_max.max(native);
            } else {
                t.interior_max = t.interior_max.max(native);
            }
            t.push(k + lw);
        });
        t
    });
    let total = tiles.into_iter().fold(TileSum::empty(), TileSum::merge);
    let boundary_log_ratio = total.boundary_max - total.interior_max;
    Ok(LogIntegral {
        log_value: total.log_value(),
        boundary_warning: boundary_log_ratio >= BOUNDARY_FRACTION.ln(),
        boundary_log_ratio,
    })
}

/// Quadrature KL divergence between two normalised log-densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlQuadrature {
    pub value: f64,
    pub boundary_warning: bool,
}

/// `∫ exp(log_p) (log_p - log_q)`; both inputs must already be normalised on
/// this grid.
pub fn quadrature_kl<P, Q>(log_p: P, log_q: Q, grid: &GridSpec) -> Result<KlQuadrature>
where
    P: Fn(&[f64], f64) -> f64 + Sync + Send,
    Q: Fn(&[f64], f64) -> f64 + Sync + Send,
{
    grid.validate()?;
    let rules = Rules::new(grid);
    let tiles = par::map_indexed(grid.beta[0].points, |i0| {
        let mut sum = 0.0;
        let mut boundary = f64::NEG_INFINITY;
        let mut interior = f64::NEG_INFINITY;
        rules.for_tile(i0, |beta, sigma, lw, jac, edge| {
            let lp = log_p(beta, sigma);
            if lp == f64::NEG_INFINITY {
                return;
            }
            let lq = log_q(beta, sigma);
            if edge {
                boundary = boundary.max(lp + jac);
            } else {
                interior = interior.max(lp + jac);
            }
            sum += (lp + lw).exp() * (lp - lq);
        });
        (sum, boundary, interior)
    });
    let mut value = 0.0;
    let mut boundary = f64::NEG_INFINITY;
    let mut interior = f64::NEG_INFINITY;
    for (s, b, i) in tiles {
        value += s;
        boundary = boundary.max(b);
        interior = interior.max(i);
    }
    Ok(KlQuadrature { value, boundary_warning: boundary - interior >= BOUNDARY_FRACTION.ln() })
}

/// Unnormalised log-posterior of the contamination model written directly as
/// prior times the product of two-term likelihoods.
#[derive(Debug, Clone)]
pub struct ContaminationKernel {
    prior: ConjugatePrior,
    s: f64,
    rows: Vec<(Vec<f64>, f64, f64)>,
}

impl ContaminationKernel {
    /// Observations in `restrict_to` (all when `None`), outliers placed at
    /// `omega`.
    pub fn new(
        data: &RegressionData,
        omega: f64,
        prior: &ConjugatePrior,
        s: f64,
        err: &ErrorDensity,
        restrict_to: Option<&[usize]>,
    ) -> Result<Self> {
        let y = data.materialize_outliers(omega)?;
        let idx: Vec<usize> = restrict_to.map_or_else(|| (0..data.n()).collect(), <[usize]>::to_vec);
        let rows = idx
            .iter()
            .map(|&i| {
                let xi: Vec<f64> = data.x().row(i).iter().copied().collect();
                Ok((xi, y[i], err.log_pdf(y[i])?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { prior: *prior, s, rows })
    }

    pub fn log_value(&self, beta: &[f64], sigma: f64) -> f64 {
        let mut v = self.prior.log_sigma_marginal(sigma) + self.prior.log_conditional(beta, sigma);
        let (lc, ls) = ((1.0 - self.s).ln(), self.s.ln());
        for (xi, yi, lf1) in &self.rows {
            let mean: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
            let z = (yi - mean) / sigma;
            let ln_norm = -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z;
            let (a, b) = (lc + ln_norm, ls + lf1);
            let m = a.max(b);
            v += m + ((a - m).exp() + (b - m).exp()).ln();
        }
        v
    }
}

/// Log of `∫ pi(beta, sigma) prod_{i in L} [(1-s)/s N(y_i | x_i'beta, sigma^2) / f1(y_i)]`
/// at each `omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthRow {
    pub omega: f64,
    pub log_normalizer: f64,
    pub boundary_warning: bool,
}

/// Resolution of the `(t = beta/sigma, sigma)` grid used by
/// [`normalizer_growth`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthGrid {
    pub t_points: usize,
    pub sigma_points: usize,
    pub sigma_lo: f64,
    /// Upper end of the sigma grid as a multiple of `omega`.
    pub sigma_hi_factor: f64,
}

impl Default for GrowthGrid {
    fn default() -> Self {
        Self { t_points: 161, sigma_points: 401, sigma_lo: 1e-2, sigma_hi_factor: 10.0 }
    }
}

/// Growth of the outlier-only normalising integral along the schedule.
pub fn normalizer_growth(
    data: &RegressionData,
    prior: &ConjugatePrior,
    s: f64,
    err: &ErrorDensity,
    omegas: &[f64],
) -> Result<Vec<GrowthRow>> {
    normalizer_growth_with(data, prior, s, err, omegas, &GrowthGrid::default())
}

/// [`normalizer_growth`] with an explicit grid resolution.
///
/// The integral is taken in `(t, sigma)` with `beta = sigma t`, under which
/// the conditional prior becomes `N(t | 0, C^2 I)` and does not move with
/// `sigma`; `t` spans `±10 C` and `sigma` is log spaced over
/// `[sigma_lo, sigma_hi_factor * omega]`.
pub fn normalizer_growth_with(
    data: &RegressionData,
    prior: &ConjugatePrior,
    s: f64,
    err: &ErrorDensity,
    omegas: &[f64],
    res: &GrowthGrid,
) -> Result<Vec<GrowthRow>> {
    if data.p() > 2 {
        return Err(invalid(format!("quadrature supports p <= 2, got p = {}", data.p())));
    }
    if err.tail_alpha() <= 0.0 && matches!(err, ErrorDensity::ScaledBetaTails { .. }) {
        return Err(invalid("error density needs a positive tail exponent"));
    }
    let l_idx = data.outlier_indices();
    let ln_odds = ((1.0 - s) / s).ln();
    let p = data.p();
    let c = prior.c;
    let mut out = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        let y = data.materialize_outliers(omega)?;
        let terms: Vec<(Vec<f64>, f64, f64)> = l_idx
            .iter()
            .map(|&i| Ok((data.x().row(i).iter().copied().collect(), y[i], err.log_pdf(y[i])?)))
            .collect::<Result<_>>()?;
        let t_axis = Axis::new(-10.0 * c, 10.0 * c, res.t_points);
        let grid = GridSpec::new(
            vec![t_axis; p],
            Axis::new(res.sigma_lo, res.sigma_hi_factor * omega, res.sigma_points),
            Spacing::Logarithmic,
        )?;
        let kernel = |t: &[f64], sigma: f64| {
            let tt: f64 = t.iter().map(|v| v * v).sum();
            let mut v = -0.5 * p as f64 * LN_2PI - p as f64 * c.ln() - tt / (2.0 * c * c)
                + prior.log_sigma_marginal(sigma);
            for (xi, yi, lf1) in &terms {
                let mean: f64 = sigma * xi.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
                let z = (yi - mean) / sigma;
                v += ln_odds - 0.5 * LN_2PI - sigma.ln() - 0.5 * z * z - lf1;
            }
            v
        };
        let r = quadrature_normalizer(kernel, &grid)?;
        out.push(GrowthRow { omega, log_normalizer: r.log_value, boundary_warning: r.boundary_warning });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1d(blo: f64, bhi: f64, slo: f64, shi: f64, n: usize) -> GridSpec {
        GridSpec::new(vec![Axis::new(blo, bhi, n)], Axis::new(slo, shi, n), Spacing::Logarithmic).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(vec![Axis::new(0.0, 1.0, 8)], Axis::new(0.1, 1.0, 32), Spacing::Linear).is_err());
        assert!(GridSpec::new(vec![Axis::new(0.0, 1.0, 32)], Axis::new(0.0, 1.0, 32), Spacing::Linear).is_err());
        assert!(GridSpec::new(vec![], Axis::new(0.1, 1.0, 32), Spacing::Linear).is_err());
        let three = vec![Axis::new(0.0, 1.0, 16); 3];
        assert!(GridSpec::new(three, Axis::new(0.1, 1.0, 32), Spacing::Linear).is_err());
    }

    #[test]
    fn normalised_product_integrates_to_one() {
        // standard normal in beta times a log-normal density in sigma
        let kernel = |b: &[f64], s: f64| {
            let u = s.ln();
            -0.5 * LN_2PI - 0.5 * b[0] * b[0] + (-0.5 * LN_2PI - u - 0.5 * u * u)
        };
        let g = grid_1d(-12.0, 12.0, (-9.0f64).exp(), 9.0f64.exp(), 241);
        let r = quadrature_normalizer(kernel, &g).unwrap();
        assert!(r.log_value.abs() < 1e-6, "{}", r.log_value);
        assert!(!r.boundary_warning);
        let lin = GridSpec::new(vec![Axis::new(-12.0, 12.0, 241)], Axis::new(1e-4, 200.0, 20001), Spacing::Linear).unwrap();
        let r = quadrature_normalizer(kernel, &lin).unwrap();
        assert!(r.log_value.abs() < 1e-4, "{}", r.log_value);
    }

    #[test]
    fn prior_is_normalised() {
        let prior = ConjugatePrior::new(1.0, 1.0, 1.0).unwrap();
        // sigma up to 100 and |beta| up to 8 * 100 leave only the sigma tail,
        // whose mass 1 - exp(-1/100^2) is added back analytically
        let g = GridSpec::new(vec![Axis::new(-800.0, 800.0, 16_001)], Axis::new(0.05, 100.0, 801), Spacing::Logarithmic)
            .unwrap();
        let r = quadrature_normalizer(|b, s| prior.log_density(b, s).unwrap(), &g).unwrap();
        let tail = -(-1e-4f64).exp_m1();
        assert!((r.log_value.exp() + tail - 1.0).abs() < 1e-4, "{}", r.log_value);
    }

    #[test]
    fn narrow_grid_warns() {
        let kernel = |b: &[f64], s: f64| -0.5 * b[0] * b[0] - 0.5 * (s - 1.0).powi(2);
        let g = grid_1d(-1.0, 1.0, 0.5, 2.0, 64);
        assert!(quadrature_normalizer(kernel, &g).unwrap().boundary_warning);
    }

    #[test]
    fn kl_of_identical_and_shifted_gaussians() {
        // slice at fixed sigma: a tight log-normal factor stands in for a point mass
        let base = |m: f64| {
            move |b: &[f64], s: f64| {
                let u = s.ln() / 0.01;
                -0.5 * LN_2PI - 0.5 * (b[0] - m).powi(2) + (-0.5 * LN_2PI - (0.01f64).ln() - s.ln() - 0.5 * u * u)
            }
        };
        let g = grid_1d(-12.0, 13.0, 0.9, 1.1, 401);
        let same = quadrature_kl(base(0.0), base(0.0), &g).unwrap();
        assert!(same.value.abs() < 1e-10);
        let shifted = quadrature_kl(base(0.0), base(1.0), &g).unwrap();
        assert!((shifted.value - 0.5).abs() < 1e-6, "{}", shifted.value);
    }

    #[test]
    fn parallel_and_serial_tiles_agree() {
        let kernel = |b: &[f64], s: f64| -0.5 * b[0] * b[0] - b[1].abs() - s;
        let g = GridSpec::new(
            vec![Axis::new(-5.0, 5.0, 33), Axis::new(-5.0, 5.0, 17)],
            Axis::new(0.01, 10.0, 65),
            Spacing::Logarithmic,
        )
        .unwrap();
        let a = quadrature_normalizer(kernel, &g).unwrap();
        let b = quadrature_normalizer(kernel, &g).unwrap();
        assert_eq!(a, b);
    }
}
