//! Compares the unknown-score variants by AUROC on one synthetic instance.

use tasc::eval::auroc;
use tasc::pipeline::{active_centers, stage_search, Inputs, RunConfig};
use tasc::synth::generate;
use tasc::unims::{entropy_vectors, score, ScoreVariant};

fn main() -> tasc::Result<()> {
    let mut cfg = RunConfig::default().with_seed(2);
    cfg.synth.cluster_spread = 1.5;
    cfg.synth.shift_noise = 1.5;
    cfg.search.k0 = 60;
    cfg.search.n_candidates = 100;
    cfg.search.n_outer = 5;
    let inputs = Inputs::from_bundle(&generate(&cfg.synth)?);
    let report = stage_search(&cfg, &inputs)?;
    let centers = active_centers(&inputs, &report)?;
    let ev = entropy_vectors(&inputs.source_names, &centers, cfg.prediction.tau)?;
    let z = inputs.targets_normalized()?;
    let split = inputs.split()?;
    let known: Vec<bool> = inputs
        .target_labels
        .as_ref()
        .unwrap()
        .iter()
        .map(|&l| !split.is_private(l))
        .collect();
    for v in ScoreVariant::ALL {
        let s = score(&z, &inputs.source_names, &centers, &ev, v)?;
        println!("{:>14}: AUROC {:.2}", v.name(), auroc(&s.scores, &known)?);
    }
    Ok(())
}
