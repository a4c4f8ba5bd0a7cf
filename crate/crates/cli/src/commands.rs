use std::fmt::Write as _;

use anyhow::{bail, Result};
use contam::rng::derive_seed;
use contam::{build_mixture_posterior, check_robustness, kl_sweep, predictive_quantiles, RobustnessVerdict};
use serde_json::json;

use crate::config::ExperimentConfig;

/// Outlier magnitude used by `predict` and `posterior` unless overridden.
pub const DEFAULT_OMEGA: f64 = 100.0;

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub struct CheckReport {
    pub verdict: RobustnessVerdict,
    pub json: String,
}

pub fn check(cfg: &ExperimentConfig) -> Result<CheckReport> {
    if cfg.outliers.indices.is_empty() {
        bail!("field `outliers.indices`: the robustness check needs at least one outlier");
    }
    let q = cfg.robustness_query()?;
    let v = check_robustness(&q)?;
    let finite = |x: f64| if x.is_finite() { json!(x) } else { json!(x.to_string()) };
    let doc = json!({
        "verdict": v.verdict.to_string(),
        "condition": v.condition,
        "threshold": finite(v.threshold),
        "load": finite(v.load),
        "n_outliers": q.n_outliers,
        "alpha": q.error.tail_alpha(),
        "nu": v.nu,
        "prior_bound_m": v.prior_bound_m,
    });
    Ok(CheckReport { verdict: v, json: serde_json::to_string_pretty(&doc)? })
}

/// Sweep table plus one message per failed row.
pub struct SweepReport {
    pub csv: String,
    pub failures: Vec<String>,
}

pub fn kl_sweep_csv(cfg: &ExperimentConfig) -> Result<SweepReport> {
    if cfg.omegas.is_empty() {
        bail!("field `omegas`: must be nonempty for kl-sweep");
    }
    let data = cfg.data()?;
    let rows = kl_sweep(&data, &cfg.prior_params()?, cfg.s, &cfg.error_density()?, &cfg.omegas, cfg.mc_samples, cfg.seed)?;
    let mut csv = String::from("omega,kl_estimate,kl_se,log10_kl\n");
    let mut failures = Vec::new();
    for row in rows {
        let (value, se) = match &row.estimate {
            Ok(e) => (e.value, e.std_error),
            Err(e) => {
                failures.push(format!("omega {}: {e}", fmt_f64(row.omega)));
                (f64::NAN, f64::NAN)
            }
        };
        let log10 = if value > 0.0 { value.log10() } else { f64::NAN };
        writeln!(csv, "{},{},{},{}", fmt_f64(row.omega), fmt_f64(value), fmt_f64(se), fmt_f64(log10))?;
    }
    Ok(SweepReport { csv, failures })
}

/// The `xt2` column is the second covariate (the first when `p = 1`).
pub fn predict_csv(cfg: &ExperimentConfig, omega: f64) -> Result<String> {
    if cfg.xt_grid.is_empty() {
        bail!("field `xt_grid`: must be nonempty for predict");
    }
    let data = cfg.data()?;
    let err = cfg.error_density()?;
    let mix = build_mixture_posterior(&data, omega, &cfg.prior_params()?, cfg.s, &err, None)?;
    let mut csv = String::from("xt2,quantity,level,value\n");
    for (i, xt) in cfg.xt_grid.iter().enumerate() {
        let seed = derive_seed(cfg.seed, i as u64);
        let q = predictive_quantiles(&mix, xt, cfg.s, &err, &cfg.quantile_levels, cfg.mc_samples, seed)?;
        let xt2 = fmt_f64(xt[1.min(xt.len() - 1)]);
        for (name, values) in [("linpred", &q.linpred), ("predictive", &q.predictive)] {
            for (level, v) in q.levels.iter().zip(values) {
                writeln!(csv, "{xt2},{name},{},{}", fmt_f64(*level), fmt_f64(*v))?;
            }
        }
    }
    Ok(csv)
}

/// Bit `k` of `subset_bitmask` is observation `k + 1`.
pub fn posterior_csv(cfg: &ExperimentConfig, omega: f64) -> Result<String> {
    let data = cfg.data()?;
    let mix = build_mixture_posterior(&data, omega, &cfg.prior_params()?, cfg.s, &cfg.error_density()?, None)?;
    let mut comps: Vec<_> = mix.components().iter().collect();
    comps.sort_by(|a, b| b.log_weight.total_cmp(&a.log_weight).then(a.subset.cmp(&b.subset)));
    let mut csv = String::from("subset_bitmask,log_weight,shape,scale");
    for k in 1..=cfg.p() {
        write!(csv, ",mu_{k}")?;
    }
    csv.push('\n');
    for c in comps {
        let nig = c.params();
        write!(csv, "{},{},{},{}", c.subset, fmt_f64(c.log_weight), fmt_f64(nig.shape), fmt_f64(nig.scale))?;
        for m in nig.mu.iter() {
            write!(csv, ",{}", fmt_f64(*m))?;
        }
        csv.push('\n');
    }
    Ok(csv)
}
