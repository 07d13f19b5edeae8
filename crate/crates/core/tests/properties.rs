use std::path::Path;

use proptest::prelude::*;

use tasc::embedding_store::{l2_normalize, read_embx, write_embx, EmbeddingMatrix};
use tasc::eval::{auroc, h_score, nmi};
use tasc::gmm::{intersection_threshold, predict_known, GmmParams, Threshold, ThresholdMode};
use tasc::math::{entropy, im_loss, normalized_entropy, softmax_scaled, PredictionConfig};

fn matrix() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..12, 1usize..16).prop_flat_map(|(rows, dims)| {
        prop::collection::vec(-5.0f32..5.0, rows * dims)
            .prop_map(move |data| EmbeddingMatrix::new(rows, dims, data).unwrap())
    })
}

fn sims(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, k)
}

proptest! {
    #[test]
    fn embx_round_trip_is_bit_exact(m in matrix()) {
        let mut buf = Vec::new();
        write_embx(&mut buf, &m).unwrap();
        prop_assert_eq!(buf.len(), 24 + 4 * m.rows() * m.dims());
        let back = read_embx(buf.as_slice(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.rows(), m.rows());
        let same = back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn truncated_embx_is_rejected(m in matrix(), cut in 1usize..8) {
        let mut buf = Vec::new();
        write_embx(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - cut.min(buf.len() - 24).max(1));
        prop_assert!(read_embx(buf.as_slice(), Path::new("mem")).is_err());
    }

    #[test]
    fn normalized_rows_have_unit_norm(m in matrix()) {
        prop_assume!(m.row_norms().iter().all(|&n| n > 1e-3));
        let n = l2_normalize(&m).unwrap();
        for norm in n.row_norms() {
            prop_assert!((norm - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_is_a_distribution(s in (1usize..30).prop_flat_map(sims), tau in 0.005f64..1.0) {
        let p = softmax_scaled(&s, tau).unwrap();
        let total: f64 = p.as_slice().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let h = entropy(&p);
        prop_assert!(h >= -1e-12 && h <= (s.len() as f64).ln() + 1e-12);
        let nh = normalized_entropy(&p);
        prop_assert!((0.0..=1.0).contains(&nh));
    }

    #[test]
    fn im_loss_is_bounded(
        rows in (2usize..8).prop_flat_map(|k| prop::collection::vec(sims(k), 1..20)),
        lambda in 0.0f64..2.0,
    ) {
        let cfg = PredictionConfig { tau: 0.05, lambda_div: lambda };
        let preds: Vec<_> = rows.iter().map(|s| softmax_scaled(s, cfg.tau).unwrap()).collect();
        let k = rows[0].len() as f64;
        let l = im_loss(&preds, &cfg).unwrap();
        prop_assert!(l >= -lambda * k.ln() - 1e-9);
        prop_assert!(l <= k.ln() + 1e-9);
    }

    #[test]
    fn auroc_flips_with_the_scores(
        pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..200),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|&(s, _)| f64::from(s)).collect();
        let known: Vec<bool> = pairs.iter().map(|&(_, k)| k).collect();
        prop_assume!(known.iter().any(|&k| k) && known.iter().any(|&k| !k));
        let a = auroc(&scores, &known).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = auroc(&neg, &known).unwrap();
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert!((a + b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn h_score_lies_between_its_inputs(a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let h = h_score(a, b);
        prop_assert!(h >= a.min(b) - 1e-9 && h <= a.max(b) + 1e-9);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 2..100),
    ) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let ab = nmi(&a, &b).unwrap();
        let ba = nmi(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        let relabeled: Vec<usize> = a.iter().map(|&x| 4 - x).collect();
        prop_assert!((nmi(&a, &relabeled).unwrap() - nmi(&a, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn threshold_sits_between_the_means(
        mu_u in -1.0f64..1.0,
        gap in 0.01f64..2.0,
        sigma_k in 0.01f64..1.0,
        sigma_u in 0.01f64..1.0,
    ) {
        let params = GmmParams { p_k: 0.5, p_u: 0.5, mu_k: mu_u + gap, mu_u, sigma_k, sigma_u };
        let t = intersection_threshold(&params);
        if t.mode == ThresholdMode::Intersection {
            prop_assert!(t.gamma >= mu_u && t.gamma <= mu_u + gap);
        } else {
            prop_assert_eq!(t.mode, ThresholdMode::MidpointFallback);
            prop_assert!((t.gamma - (mu_u + 0.5 * gap)).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_known(
        scores in prop::collection::vec(-2.0f64..2.0, 1..100),
        lo in -2.0f64..2.0,
        step in 0.0f64..1.0,
    ) {
        let a = predict_known(&scores, &Threshold::fixed(lo));
        let b = predict_known(&scores, &Threshold::fixed(lo + step));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| *x || !*y));
    }
}
