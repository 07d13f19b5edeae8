//! Runs every stage on synthetic data and writes the reports to a directory
//! (first argument, default ./tasc-example-out).

use std::path::PathBuf;

use tasc::{run_pipeline, RunConfig};

fn main() -> tasc::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "tasc-example-out".into());
    let mut cfg = RunConfig::default().with_seed(3);
    cfg.out_dir = out;
    cfg.search.k0 = 60;
    cfg.search.n_outer = 5;
    cfg.search.n_candidates = 100;
    let result = run_pipeline(&cfg)?;
    println!("K = {}", result.search.counts.k);
    println!(
        "threshold {:.4} ({:?})",
        result.fit.threshold.gamma, result.fit.threshold.mode
    );
    println!("{}", serde_json::to_string_pretty(&result.eval).unwrap());
    println!("reports in {}", cfg.out_dir.display());
    Ok(())
}
