//! H-score, H3-score, AUROC and NMI on hand-made predictions.

use tasc::eval::{auroc, evaluate, h3_score, h_score, nmi, EvalInputs, ScenarioSplit};

fn main() -> tasc::Result<()> {
    println!("H(97.33, 95.43) = {:.2}", h_score(97.33, 95.43));
    println!(
        "H3(98.68, 98.86, 89.66) = {:.2}",
        h3_score(98.68, 98.86, 89.66)
    );
    println!(
        "AUROC = {:.2}",
        auroc(
            &[0.9, 0.8, 0.4, 0.3, 0.8],
            &[true, true, false, false, false]
        )?
    );
    println!(
        "NMI = {:.3}",
        nmi(&[0, 0, 1, 1, 2, 2], &[1, 1, 0, 0, 0, 2])?
    );

    // two common classes, one source-private, one target-private (label 3)
    let split = ScenarioSplit::new(2, 1, 1);
    let gt = [0, 0, 1, 1, 3, 3];
    let preds = [0, 1, 1, 1, 2, 0];
    let known = [true, true, true, false, false, false];
    let report = evaluate(&EvalInputs {
        preds: &preds,
        gt: &gt,
        known: &known,
        scores: Some(&[0.9, 0.7, 0.8, 0.2, 0.1, 0.3]),
        embeddings: None,
        split,
        seed: 0,
    })?;
    print!("{}", report.to_csv());
    Ok(())
}
