//! Two-component 1-D Gaussian mixture over known/unknown scores.
//!
//! Mixture weights are fixed to the class proportions estimated by the
//! search; EM only moves means and variances. The decision threshold is the
//! point where the two components cross once their weights are reset to
//! one half each, which balances the error on known and unknown samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::ClassCountEstimate;

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const MIN_SCORES: usize = 10;
const TOL: f64 = 1e-8;
const MAX_ITER: usize = 500;
const P_UNKNOWN_CLAMP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub p_k: f64,
    pub p_u: f64,
    pub mu_k: f64,
    pub mu_u: f64,
    pub sigma_k: f64,
    pub sigma_u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Intersection,
    /// The weighted densities do not cross between the means.
    MidpointFallback,
    /// No private classes estimated: everything is known.
    Disabled,
    /// No common classes estimated: everything is unknown.
    RejectAll,
    /// Supplied by the caller rather than fitted.
    Fixed,
}

/// `gamma` is meaningless for the `Disabled` and `RejectAll` modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub gamma: f64,
    pub mode: ThresholdMode,
}

impl Threshold {
    pub fn fixed(gamma: f64) -> Self {
        Threshold {
            gamma,
            mode: ThresholdMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Log-likelihood of the initial parameters and after every update.
    pub loglik: Vec<f64>,
    pub converged: bool,
}

fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(SIGMA_FLOOR))
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.len() < MIN_SCORES {
        return Err(Error::Domain(format!(
            "need at least {MIN_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores contain non-finite values".into()));
    }
    let first = scores[0];
    if scores.iter().all(|&s| s == first) {
        return Err(Error::Degenerate(format!("all scores equal {first}")));
    }
    Ok(())
}

/// EM with weights `(p_k, p_u)` held fixed. Initial components are the
/// moments of the lower `p_u` and upper `p_k` blocks of the sorted scores.
pub fn fit_gmm(scores: &[f64], p_k: f64, p_u: f64) -> Result<GmmFit> {
    check_scores(scores)?;
    if !(p_k > 0.0 && p_u > 0.0 && ((p_k + p_u) - 1.0).abs() < 1e-9) {
        return Err(Error::Domain(format!(
            "mixture weights must be positive and sum to 1, got ({p_k}, {p_u})"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let n_u = ((p_u * n as f64).round() as usize).clamp(1, n - 1);
    let (mut mu_u, mut sigma_u) = mean_std(&sorted[..n_u]);
    let (mut mu_k, mut sigma_k) = mean_std(&sorted[n_u..]);
    let (lp_k, lp_u) = (p_k.ln(), p_u.ln());

    let mut loglik = Vec::new();
    let mut converged = false;
    let mut resp = vec![0f64; n];
    for _ in 0..MAX_ITER {
        let mut ll = 0f64;
        for (r, &x) in resp.iter_mut().zip(scores) {
            let a = lp_k + log_normal(x, mu_k, sigma_k);
            let b = lp_u + log_normal(x, mu_u, sigma_u);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            *r = (a - lse).exp();
            ll += lse;
        }
        if let Some(&prev) = loglik.last() {
            if ll - prev < TOL {
                loglik.push(ll);
                converged = true;
                break;
            }
        }
        loglik.push(ll);
        let (mut wk, mut wu, mut sk, mut su) = (0f64, 0f64, 0f64, 0f64);
        for (&r, &x) in resp.iter().zip(scores) {
            wk += r;
            wu += 1.0 - r;
            sk += r * x;
            su += (1.0 - r) * x;
        }
        if wk > 1e-12 {
            mu_k = sk / wk;
            let v: f64 = resp
                .iter()
                .zip(scores)
                .map(|(&r, &x)| r * (x - mu_k).powi(2))
                .sum::<f64>()
                / wk;
            sigma_k = v.sqrt().max(SIGMA_FLOOR);
        }
        if wu > 1e-12 {
            mu_u = su / wu;
            let v: f64 = resp
                .iter()
                .zip(scores)
                .map(|(&r, &x)| (1.0 - r) * (x - mu_u).powi(2))
                .sum::<f64>()
                / wu;
            sigma_u = v.sqrt().max(SIGMA_FLOOR);
        }
    }
    if mu_k < mu_u {
        log::warn!("known component fitted below unknown component; swapping");
        std::mem::swap(&mut mu_k, &mut mu_u);
        std::mem::swap(&mut sigma_k, &mut sigma_u);
    }
    Ok(GmmFit {
        params: GmmParams {
            p_k,
            p_u,
            mu_k,
            mu_u,
            sigma_k,
            sigma_u,
        },
        loglik,
        converged,
    })
}

/// Crossing point of the two components with equal weights, searched
/// between the means.
pub fn intersection_threshold(params: &GmmParams) -> Threshold {
    let GmmParams {
        mu_k,
        mu_u,
        sigma_k,
        sigma_u,
        ..
    } = *params;
    let mid = 0.5 * (mu_k + mu_u);
    if sigma_k == sigma_u {
        return Threshold {
            gamma: mid,
            mode: ThresholdMode::Intersection,
        };
    }
    let (vk, vu) = (sigma_k * sigma_k, sigma_u * sigma_u);
    let a = 0.5 / vu - 0.5 / vk;
    let b = -mu_u / vu + mu_k / vk;
    let c = mu_u * mu_u / (2.0 * vu) - mu_k * mu_k / (2.0 * vk) + (sigma_u / sigma_k).ln();
    let disc = b * b - 4.0 * a * c;
    let (lo, hi) = (mu_u.min(mu_k), mu_u.max(mu_k));
    let slack = 1e-12 * (1.0 + hi.abs() + lo.abs());
    let mut roots = Vec::with_capacity(2);
    if disc >= 0.0 {
        // cancellation-free pair of roots
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        if q != 0.0 {
            roots.push(c / q);
        }
        if a != 0.0 {
            roots.push(q / a);
        }
    }
    let best = roots
        .into_iter()
        .filter(|r| r.is_finite() && *r >= lo - slack && *r <= hi + slack)
        .min_by(|x, y| (x - mid).abs().total_cmp(&(y - mid).abs()));
    match best {
        Some(g) => Threshold {
            gamma: g.clamp(lo, hi),
            mode: ThresholdMode::Intersection,
        },
        None => Threshold {
            gamma: mid,
            mode: ThresholdMode::MidpointFallback,
        },
    }
}

/// `true` means known; a score exactly at the threshold is known.
pub fn predict_known(scores: &[f64], threshold: &Threshold) -> Vec<bool> {
    match threshold.mode {
        ThresholdMode::Disabled => vec![true; scores.len()],
        ThresholdMode::RejectAll => vec![false; scores.len()],
        ThresholdMode::Intersection | ThresholdMode::MidpointFallback | ThresholdMode::Fixed => {
            scores.iter().map(|&s| s >= threshold.gamma).collect()
        }
    }
}

/// Fixed mixture weights derived from the estimated class counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub p_k: f64,
    pub p_u: f64,
}

impl MixtureWeights {
    /// `None` when one side has no classes. The unknown weight is clamped
    /// to `[0.01, 0.99]`.
    pub fn from_counts(counts: &ClassCountEstimate) -> Option<Self> {
        if counts.k_com == 0 || counts.k_pri == 0 {
            return None;
        }
        let p_u = (counts.k_pri as f64 / (counts.k_com + counts.k_pri) as f64)
            .clamp(P_UNKNOWN_CLAMP.0, P_UNKNOWN_CLAMP.1);
        Some(MixtureWeights {
            p_k: 1.0 - p_u,
            p_u,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub counts: ClassCountEstimate,
    pub weights: Option<MixtureWeights>,
    pub params: Option<GmmParams>,
    pub threshold: Threshold,
    pub loglik: Vec<f64>,
    pub converged: bool,
}

/// Chooses the threshold for a score vector given the search's class
/// counts: disabled without private classes, reject-all without common
/// classes, otherwise a fixed-weight GMM fit.
pub fn fit_threshold(scores: &[f64], counts: &ClassCountEstimate) -> Result<FitReport> {
    let (mode, weights) = if counts.k_pri == 0 {
        (Some(ThresholdMode::Disabled), None)
    } else if counts.k_com == 0 {
        (Some(ThresholdMode::RejectAll), None)
    } else {
        (None, MixtureWeights::from_counts(counts))
    };
    if let Some(mode) = mode {
        return Ok(FitReport {
            counts: *counts,
            weights,
            params: None,
            threshold: Threshold { gamma: 0.0, mode },
            loglik: Vec::new(),
            converged: true,
        });
    }
    let w = weights.expect("both counts positive");
    let fit = fit_gmm(scores, w.p_k, w.p_u)?;
    Ok(FitReport {
        counts: *counts,
        weights,
        threshold: intersection_threshold(&fit.params),
        params: Some(fit.params),
        loglik: fit.loglik,
        converged: fit.converged,
    })
}
