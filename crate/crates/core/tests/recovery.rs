use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tasc::embedding_store::{build_similarity_cache, l2_normalize, TextBank};
use tasc::math::PredictionConfig;
use tasc::search::{SearchConfig, SearchProblem, StepDecision};
use tasc::synth::{generate, SynthConfig};

// With no noise every target sits on its anchor. Common names, private
// anchors and K_pri come back exactly; a source-private name can still be
// held on by the protected rule when one anchor is much closer to it than
// the rest, and that is the only way one survives.
#[test]
fn noiseless_data_recovers_the_ground_truth() {
    for seed in 0..8u64 {
        let synth = SynthConfig {
            dims: 128,
            vocab_size: 150,
            n_common: 6,
            n_source_private: 3,
            n_target_private: 8,
            samples_per_class: 10,
            cluster_spread: 0.0,
            shift_angle: 0.0,
            shift_noise: 0.0,
            seed,
            ..SynthConfig::default()
        };
        let b = generate(&synth).unwrap();
        let bank = TextBank::new(&b.source_names, &b.nouns).unwrap();
        let targets = l2_normalize(&b.target_images).unwrap();
        let cache = build_similarity_cache(&targets, &bank.matrix).unwrap();
        let cfg = SearchConfig {
            k0: 40,
            n_candidates: bank.n_nouns(),
            n_outer: 5,
            seed,
            ..SearchConfig::default()
        };
        let problem =
            SearchProblem::new(&cache, &bank, &targets, PredictionConfig::default(), cfg).unwrap();
        let out = problem.run(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();

        for i in 0..synth.n_common {
            assert!(
                out.state.retained[i],
                "seed {seed}: common class {i} dropped"
            );
        }
        let last = cfg.n_outer - 1;
        for i in synth.n_common..bank.n_source {
            if out.state.retained[i] {
                let step = out
                    .trace
                    .steps
                    .iter()
                    .find(|s| s.outer == last && s.position == i)
                    .unwrap();
                assert_eq!(
                    step.decision,
                    StepDecision::Protected,
                    "seed {seed}: slot {i}"
                );
            }
        }
        assert_eq!(out.counts.k_pri, synth.n_target_private, "seed {seed}");

        let active = out.state.active_columns();
        for c in synth.split().n_source()..synth.n_classes() {
            let anchor = b.vocab.row(b.class_vocab[c]);
            let found = active.iter().any(|&col| {
                col >= bank.n_source
                    && bank
                        .matrix
                        .row(col)
                        .iter()
                        .zip(anchor)
                        .all(|(x, y)| (x - y).abs() < 1e-6)
            });
            assert!(found, "seed {seed}: private class {c} has no center");
        }
    }
}
