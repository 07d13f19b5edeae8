//! Fits the fixed-weight two-component mixture to scores drawn from two
//! Gaussians and derives the known/unknown threshold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tasc::gmm::{fit_gmm, intersection_threshold, predict_known};

fn main() -> tasc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let known = Normal::new(1.0, 0.2).unwrap();
    let unknown = Normal::new(0.0, 0.3).unwrap();
    let mut scores: Vec<f64> = (0..700).map(|_| known.sample(&mut rng)).collect();
    scores.extend((0..300).map(|_| unknown.sample(&mut rng)));

    let fit = fit_gmm(&scores, 0.7, 0.3)?;
    let p = fit.params;
    println!(
        "known N({:.3}, {:.3}), unknown N({:.3}, {:.3}) after {} updates, converged {}",
        p.mu_k,
        p.sigma_k,
        p.mu_u,
        p.sigma_u,
        fit.loglik.len() - 1,
        fit.converged
    );
    let t = intersection_threshold(&p);
    let flags = predict_known(&scores, &t);
    let tpr = flags[..700].iter().filter(|&&k| k).count() as f64 / 700.0;
    let fpr = flags[700..].iter().filter(|&&k| k).count() as f64 / 300.0;
    println!(
        "threshold {:.4} ({:?}); known kept {tpr:.3}, unknown accepted {fpr:.3}",
        t.gamma, t.mode
    );
    Ok(())
}
