//! Generates a synthetic open-partial bundle and checks that nearest-anchor
//! classification recovers the labels.

use tasc::synth::{generate, SynthConfig};

fn main() -> tasc::Result<()> {
    let cfg = SynthConfig::default();
    let b = generate(&cfg)?;
    println!(
        "source {}x{}, target {}x{}, {} source names, {} nouns",
        b.source_images.rows(),
        b.source_images.dims(),
        b.target_images.rows(),
        b.target_images.dims(),
        b.source_names.rows(),
        b.nouns.rows()
    );
    let mut hits = 0;
    for (row, &label) in b.target_images.iter_rows().zip(&b.target_labels) {
        let nearest = (0..b.vocab.rows())
            .max_by(|&x, &y| {
                let s = |i: usize| {
                    row.iter()
                        .zip(b.vocab.row(i))
                        .map(|(a, c)| a * c)
                        .sum::<f32>()
                };
                s(x).total_cmp(&s(y))
            })
            .unwrap();
        hits += usize::from(nearest == b.class_vocab[label as usize]);
    }
    println!(
        "nearest vocabulary entry matches the anchor for {hits}/{} targets",
        b.target_labels.len()
    );

    let dir = std::env::temp_dir().join("tasc-synth-example");
    b.write(&dir)?;
    println!("bundle written to {}", dir.display());
    Ok(())
}
