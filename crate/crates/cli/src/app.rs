//! Argument parsing and dispatch for the `contam` binary.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use contam::Verdict;

use crate::commands::{self, DEFAULT_OMEGA};
use crate::{write_atomic, ExperimentConfig};

#[derive(Parser)]
#[command(name = "contam", version, about = "Robustness diagnostics for contamination-model Bayesian regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Robustness verdict for the configured prior, error density and outlier count
    Check(Common),
    /// KL(clean posterior || full posterior) along the omega grid, as CSV
    KlSweep(Common),
    /// Posterior quantiles of the linear predictor and predictive response, as CSV
    Predict {
        #[command(flatten)]
        common: Common,
        /// Outlier magnitude
        #[arg(long, default_value_t = DEFAULT_OMEGA)]
        omega: f64,
    },
    /// Mixture components of the posterior, as CSV
    Posterior {
        #[command(flatten)]
        common: Common,
        /// Outlier magnitude
        #[arg(long, default_value_t = DEFAULT_OMEGA)]
        omega: f64,
    },
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn put(out: &mut dyn Write, text: &str) -> Result<()> {
    match out.write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(common: &Common, out: &mut dyn Write, text: &str) -> Result<()> {
    match &common.out {
        Some(path) => write_atomic(path, text),
        None => put(out, text),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Check(common) => {
            let cfg = load(&common)?;
            let report = commands::check(&cfg)?;
            put(out, &format!("{}\n", report.verdict))?;
            match &common.out {
                Some(path) => write_atomic(path, &format!("{}\n", report.json))?,
                None => put(out, &format!("{}\n", report.json))?,
            }
            Ok(match report.verdict.verdict {
                Verdict::Robust => 0,
                Verdict::NonRobust => 2,
                Verdict::Inconclusive => 3,
            })
        }
        Command::KlSweep(common) => {
            let cfg = load(&common)?;
            let report = commands::kl_sweep_csv(&cfg)?;
            for f in &report.failures {
                put(err, &format!("warning: estimator failed at {f}\n"))?;
            }
            emit(&common, out, &report.csv)?;
            Ok(0)
        }
        Command::Predict { common, omega } => {
            let cfg = load(&common)?;
            emit(&common, out, &commands::predict_csv(&cfg, omega)?)?;
            Ok(0)
        }
        Command::Posterior { common, omega } => {
            let cfg = load(&common)?;
            emit(&common, out, &commands::posterior_csv(&cfg, omega)?)?;
            Ok(0)
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 on success or a robust verdict, 2 for non-robust, 3 for
/// inconclusive, 1 on any error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = put(if e.use_stderr() { err } else { out }, &e.render().to_string());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = put(err, &format!("error: {e:#}\n"));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::path::Path;

    const LIGHT_A2: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/light_a2.json");

    fn call(args: &[&str]) -> (u8, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let mut full = vec!["contam"];
        full.extend_from_slice(args);
        let code = run(full, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn edited(dir: &Path, name: &str, f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(LIGHT_A2).unwrap()).unwrap();
        f(&mut v);
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
        path.to_str().unwrap().to_string()
    }

    #[test]
    fn check_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let (code, out, _) = call(&["check", "--config", LIGHT_A2]);
        assert_eq!(code, 0);
        assert!(out.starts_with("Robust (2A > |L|α)\n"), "{out}");
        let json: serde_json::Value = serde_json::from_str(out.split_once('\n').unwrap().1).unwrap();
        assert_eq!(json["verdict"], "Robust");
        assert_eq!(json["threshold"], 4.0);

        let small = edited(dir.path(), "small.json", |v| v["prior"]["A"] = 0.1.into());
        let (code, out, _) = call(&["check", "--config", &small]);
        assert_eq!((code, out.lines().next().unwrap()), (2, "NonRobust (2A < |L|α)"));

        let edge = edited(dir.path(), "edge.json", |v| v["prior"]["A"] = 1.5.into());
        let (code, out, _) = call(&["check", "--config", &edge]);
        assert_eq!(code, 3);
        assert!(out.starts_with("Inconclusive"));

        let heavy = edited(dir.path(), "heavy.json", |v| {
            v["prior"]["A"] = 0.1.into();
            v["error"]["type"] = "heavy".into();
        });
        assert_eq!(call(&["check", "--config", &heavy]).0, 0);

        let out_path = dir.path().join("verdict.json");
        let (code, out, _) = call(&["check", "--config", &small, "--out", out_path.to_str().unwrap()]);
        assert_eq!((code, out.as_str()), (2, "NonRobust (2A < |L|α)\n"));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_path).unwrap()).unwrap();
        assert_eq!(json["condition"], "2A < |L|α");
    }

    #[test]
    fn malformed_config_reports_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let typo = edited(dir.path(), "typo.json", |v| {
            v.as_object_mut().unwrap().insert("omega".into(), 1.0.into());
        });
        let (code, _, err) = call(&["check", "--config", &typo]);
        assert_eq!(code, 1);
        assert!(err.contains("field `omega`") && err.contains("unknown field") && err.contains("line"), "{err}");

        let bad_type = dir.path().join("bad_type.json");
        let text = fs::read_to_string(LIGHT_A2).unwrap().replace("\"B\": 1.0", "\"B\": \"one\"");
        fs::write(&bad_type, text).unwrap();
        let (code, _, err) = call(&["kl-sweep", "--config", bad_type.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(err.contains("field `prior.B`") && err.contains("line 6"), "{err}");

        let range = edited(dir.path(), "range.json", |v| v["outliers"]["indices"] = serde_json::json!([6]));
        let (code, _, err) = call(&["posterior", "--config", &range]);
        assert_eq!(code, 1);
        assert!(err.contains("outliers.indices[0]"), "{err}");

        let (code, _, err) = call(&["check", "--config", "/nonexistent/cfg.json"]);
        assert_eq!(code, 1);
        assert!(err.contains("reading"), "{err}");

        let (code, _, _) = call(&["frobnicate"]);
        assert_eq!(code, 1);
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("kl-sweep"));
    }

    #[test]
    fn failed_run_leaves_no_output_file() {
        let dir = tempfile::tempdir().unwrap();
        let no_grid = edited(dir.path(), "nogrid.json", |v| v["xt_grid"] = serde_json::json!([]));
        let target = dir.path().join("pred.csv");
        let (code, _, err) = call(&["predict", "--config", &no_grid, "--out", target.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(err.contains("xt_grid"), "{err}");
        assert!(!target.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

        let (code, _, _) = call(&["posterior", "--config", LIGHT_A2, "--out", "/nonexistent/dir/post.csv"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn seed_override_changes_sampling_only() {
        let dir = tempfile::tempdir().unwrap();
        let short = edited(dir.path(), "short.json", |v| v["omegas"] = serde_json::json!([10.0, 100.0]));
        let a = call(&["kl-sweep", "--config", &short]).1;
        let b = call(&["kl-sweep", "--config", &short, "--seed", "20240601"]).1;
        let c = call(&["kl-sweep", "--config", &short, "--seed", "7"]).1;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.lines().next(), Some("omega,kl_estimate,kl_se,log10_kl"));
        assert_eq!(c.lines().count(), 3);
        assert_eq!(call(&["posterior", "--config", &short, "--seed", "7"]).1, call(&["posterior", "--config", &short]).1);
    }

    #[test]
    fn sweep_without_outliers_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let clean = edited(dir.path(), "clean.json", |v| {
            v["outliers"] = serde_json::json!({"indices": [], "a": [], "b": []});
            v["omegas"] = serde_json::json!([100.0]);
        });
        let (code, out, _) = call(&["kl-sweep", "--config", &clean]);
        assert_eq!(code, 0);
        let rows: Vec<&str> = out.lines().collect();
        assert_eq!(rows.len(), 2);
        let kl: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();
        assert!(kl.abs() < 1e-12, "{out}");
        // no outliers means nothing to check
        assert_eq!(call(&["check", "--config", &clean]).0, 1);
    }

    #[test]
    fn posterior_table() {
        let (code, out, _) = call(&["posterior", "--config", LIGHT_A2, "--omega", "1e5"]);
        assert_eq!(code, 0);
        let mut lines = out.lines();
        assert_eq!(lines.next(), Some("subset_bitmask,log_weight,shape,scale,mu_1,mu_2"));
        let rows: Vec<Vec<f64>> =
            lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 32);
        let total: f64 = rows.iter().map(|r| r[1].exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(rows.windows(2).all(|w| w[0][1] >= w[1][1]));
        // the top component leaves observation 5 to the contamination term
        assert_eq!(rows[0][0] as u32 & 1 << 4, 0);

        let dir = tempfile::tempdir().unwrap();
        let single = edited(dir.path(), "single.json", |v| {
            v["y"] = serde_json::json!([0.5]);
            v["X"] = serde_json::json!([[1.0]]);
            v["outliers"] = serde_json::json!({"indices": [1], "a": [0.0], "b": [1.0]});
            v["xt_grid"] = serde_json::json!([[1.0]]);
        });
        let (code, out, _) = call(&["posterior", "--config", &single]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 3);
    }

    #[test]
    fn predict_table() {
        let (code, out, _) = call(&["predict", "--config", LIGHT_A2]);
        assert_eq!(code, 0);
        let mut lines = out.lines();
        assert_eq!(lines.next(), Some("xt2,quantity,level,value"));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 6 * 2 * 3);
        assert_eq!(rows[0][..3], ["1.5", "linpred", "0.025"]);
        assert_eq!(rows[3][..3], ["1.5", "predictive", "0.025"]);
        assert_eq!(rows[35][..3], ["2.0", "predictive", "0.975"]);
    }
}
