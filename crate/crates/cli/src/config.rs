//! JSON experiment configuration.
//!
//! Outlier indices are 1-based here and converted to the engine's 0-based
//! indices by [`ExperimentConfig::data`].

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use contam::conjugate::DEFAULT_LEVELS;
use contam::{ConjugatePrior, ErrorDensity, NigParams, Outlier, PriorFamily, RegressionData, RobustnessQuery};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub indices: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Light,
    Heavy,
}

/// `alpha` is read for `light`, `gamma` for `heavy`; the other may be
/// present so one file can switch between the two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSpec {
    #[serde(rename = "type")]
    pub kind: ErrorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

fn default_levels() -> Vec<f64> {
    DEFAULT_LEVELS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub y: Vec<f64>,
    /// Row-major design matrix.
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    pub outliers: OutlierSpec,
    pub omegas: Vec<f64>,
    pub prior: PriorSpec,
    pub s: f64,
    pub error: ErrorSpec,
    pub mc_samples: usize,
    pub seed: u64,
    #[serde(default = "default_levels")]
    pub quantile_levels: Vec<f64>,
    #[serde(default)]
    pub xt_grid: Vec<Vec<f64>>,
}

/// Config problem tied to a field path.
#[derive(Debug)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for FieldError {}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> anyhow::Error {
    FieldError { field: field.into(), message: message.into() }.into()
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = match serde_path_to_error::deserialize(de) {
            Ok(c) => c,
            Err(e) => {
                let path = e.path().to_string();
                let inner = e.into_inner();
                if path == "." {
                    bail!("{inner}");
                }
                return Err(field_err(path, inner.to_string()));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(field_err("y", "must be nonempty"));
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(field_err(format!("y[{i}]"), "must be finite"));
        }
        if self.x.len() != n {
            return Err(field_err("X", format!("has {} rows but y has {n} entries", self.x.len())));
        }
        let p = self.p();
        if p == 0 {
            return Err(field_err("X", "rows must be nonempty"));
        }
        for (r, row) in self.x.iter().enumerate() {
            if row.len() != p {
                return Err(field_err(format!("X[{r}]"), format!("has {} columns, expected {p}", row.len())));
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(field_err(format!("X[{r}][{c}]"), "must be finite"));
            }
        }
        let o = &self.outliers;
        if o.a.len() != o.indices.len() || o.b.len() != o.indices.len() {
            return Err(field_err(
                "outliers",
                format!("indices, a and b must have equal length ({}, {}, {})", o.indices.len(), o.a.len(), o.b.len()),
            ));
        }
        for (k, &i) in o.indices.iter().enumerate() {
            if i == 0 || i > n {
                return Err(field_err(format!("outliers.indices[{k}]"), format!("{i} is outside 1..={n}")));
            }
            if o.indices[..k].contains(&i) {
                return Err(field_err(format!("outliers.indices[{k}]"), format!("{i} is repeated")));
            }
            if !o.a[k].is_finite() {
                return Err(field_err(format!("outliers.a[{k}]"), "must be finite"));
            }
            if !(o.b[k].is_finite() && o.b[k] != 0.0) {
                return Err(field_err(format!("outliers.b[{k}]"), "must be finite and nonzero"));
            }
        }
        for (k, &w) in self.omegas.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(field_err(format!("omegas[{k}]"), format!("must be finite and > 0, got {w}")));
            }
            if k > 0 && !(w > self.omegas[k - 1]) {
                return Err(field_err(format!("omegas[{k}]"), "omegas must be strictly increasing"));
            }
        }
        for (name, v) in [("prior.A", self.prior.a), ("prior.B", self.prior.b), ("prior.C", self.prior.c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field_err(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(field_err("s", format!("must lie in (0, 1), got {}", self.s)));
        }
        let (field, value) = match self.error.kind {
            ErrorKind::Light => ("error.alpha", self.error.alpha),
            ErrorKind::Heavy => ("error.gamma", self.error.gamma),
        };
        match value {
            None => return Err(field_err(field, "required for this error type")),
            Some(v) if !(v > 0.0 && v.is_finite()) => {
                return Err(field_err(field, format!("must be finite and > 0, got {v}")))
            }
            _ => {}
        }
        if self.mc_samples < 2 {
            return Err(field_err("mc_samples", "must be at least 2"));
        }
        if let Some(k) = self.quantile_levels.iter().position(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(field_err(format!("quantile_levels[{k}]"), "must lie in (0, 1)"));
        }
        for (k, xt) in self.xt_grid.iter().enumerate() {
            if xt.len() != p {
                return Err(field_err(format!("xt_grid[{k}]"), format!("has length {}, expected {p}", xt.len())));
            }
            if xt.iter().any(|v| !v.is_finite()) {
                return Err(field_err(format!("xt_grid[{k}]"), "must be finite"));
            }
        }
        // rank and size checks live in the engine
        self.data().context("field `X`")?;
        Ok(())
    }

    pub fn data(&self) -> Result<RegressionData> {
        let o = &self.outliers;
        let outliers =
            o.indices.iter().zip(o.a.iter().zip(&o.b)).map(|(&i, (&a, &b))| Outlier { index: i - 1, a, b }).collect();
        Ok(RegressionData::from_rows(self.y.clone(), &self.x, outliers)?)
    }

    pub fn conjugate_prior(&self) -> Result<ConjugatePrior> {
        Ok(ConjugatePrior::new(self.prior.a, self.prior.b, self.prior.c)?)
    }

    pub fn prior_params(&self) -> Result<NigParams> {
        Ok(NigParams::from_prior(&self.conjugate_prior()?, self.p()))
    }

    pub fn error_density(&self) -> Result<ErrorDensity> {
        Ok(match self.error.kind {
            ErrorKind::Light => ErrorDensity::scaled_beta_tails(self.error.alpha.unwrap_or(f64::NAN))?,
            ErrorKind::Heavy => ErrorDensity::log_pareto(self.error.gamma.unwrap_or(f64::NAN))?,
        })
    }

    /// The conjugate prior puts an inverse gamma on `sigma^2`.
    pub fn robustness_query(&self) -> Result<RobustnessQuery> {
        Ok(RobustnessQuery {
            prior: PriorFamily::InverseGamma { a: self.prior.a, b: self.prior.b },
            error: self.error_density()?,
            n_outliers: self.outliers.indices.len(),
            nu: None,
        })
    }
}
