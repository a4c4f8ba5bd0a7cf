//! Prints the KL sweep for the four prior/error combinations of the
//! five-observation demo (`cargo run --release --example demo_sweep`).

use contam::{kl_sweep, ConjugatePrior, ErrorDensity, NigParams, Outlier, RegressionData};

fn main() -> contam::Result<()> {
    let rows: Vec<Vec<f64>> = (3..=7).map(|k| vec![1.0, 2.0 - 1.0 / k as f64]).collect();
    let data = RegressionData::from_rows(vec![1.0, 2.0, 3.0, 4.0, 5.0], &rows, vec![Outlier {
        index: 4,
        a: 0.0,
        b: 1.0,
    }])?;
    let omegas = [1e1, 1e2, 1e3, 1e4, 1e5];
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    for (name, err) in [("light", ErrorDensity::scaled_beta_tails(3.0)?), ("heavy", ErrorDensity::log_pareto(1.5)?)] {
        for a in [0.1, 2.0] {
            let prior = NigParams::from_prior(&ConjugatePrior::new(a, 1.0, 1.0)?, 2);
            for seed in 0..3 {
                let sweep = kl_sweep(&data, &prior, 0.1, &err, &omegas, count, seed)?;
                let cells: Vec<String> = sweep
                    .iter()
                    .map(|r| match &r.estimate {
                        Ok(e) => format!("{:>10.3e}±{:.1e}", e.value, e.std_error),
                        Err(e) => format!("ERR {e}"),
                    })
                    .collect();
                println!("{name:5} A={a:<4} seed={seed}  {}", cells.join("  "));
            }
        }
    }
    Ok(())
}
