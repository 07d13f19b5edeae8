//! Greedy search over the noun vocabulary for target centers, with the
//! estimated class counts and the per-sweep loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tasc::search::{SearchConfig, SearchProblem, SearchReport};
use tasc::synth::{generate, SynthConfig};
use tasc::{build_similarity_cache, l2_normalize, PredictionConfig, TextBank};

fn main() -> tasc::Result<()> {
    let b = generate(&SynthConfig::default())?;
    let bank = TextBank::new(&b.source_names, &b.nouns)?;
    let targets = l2_normalize(&b.target_images)?;
    let cache = build_similarity_cache(&targets, &bank.matrix)?;
    let cfg = SearchConfig {
        k0: 60,
        n_candidates: 100,
        n_outer: 5,
        ..SearchConfig::default()
    };
    let problem = SearchProblem::new(&cache, &bank, &targets, PredictionConfig::default(), cfg)?;
    let out = problem.run(&mut ChaCha8Rng::seed_from_u64(0))?;
    for (i, (loss, k)) in out
        .trace
        .outer_loss
        .iter()
        .zip(&out.trace.outer_k)
        .enumerate()
    {
        println!("sweep {i}: loss {loss:.4}, K {k}");
    }
    println!(
        "K = {} ({} common, {} private); truth is 25 (10 common, 15 private)",
        out.counts.k, out.counts.k_com, out.counts.k_pri
    );
    let report = SearchReport::new(&out, &b.source_class_names, &b.noun_names);
    println!("first active centers: {:?}", &report.active_names()[..12]);
    Ok(())
}
