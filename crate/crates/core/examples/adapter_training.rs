//! Trains the linear adapter on a synthetic bundle using the searched
//! centers, printing the loss per epoch.

use tasc::pipeline::{active_centers, stage_search, Inputs, RunConfig};
use tasc::refine::{Adapter, RefineProblem, TrainConfig};
use tasc::synth::generate;

fn main() -> tasc::Result<()> {
    let mut cfg = RunConfig::default().with_seed(1);
    cfg.synth.cluster_spread = 1.5;
    cfg.synth.shift_noise = 1.5;
    cfg.search.k0 = 60;
    cfg.search.n_candidates = 100;
    cfg.search.n_outer = 5;
    let inputs = Inputs::from_bundle(&generate(&cfg.synth)?);
    let report = stage_search(&cfg, &inputs)?;
    let centers = active_centers(&inputs, &report)?;

    let problem = RefineProblem::new(&inputs.source_names, &centers, cfg.prediction)?;
    let train = TrainConfig {
        eta0: 0.1,
        epochs: 10,
        ..cfg.train
    };
    let out = problem.train(
        &Adapter::identity(inputs.source_names.dims()),
        &inputs.source_images,
        &inputs.source_labels,
        &inputs.target_images,
        &train,
    )?;
    for (e, l) in out.epoch_loss.iter().enumerate() {
        println!("epoch {e}: {l:.5}");
    }
    let w = out.adapter.weights();
    let d = out.adapter.dims();
    let drift: f32 = (0..d * d)
        .map(|i| (w[i] - if i % (d + 1) == 0 { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f32::max);
    println!("largest change from identity: {drift:.4}");
    Ok(())
}
