//! Metrics: per-class accuracies, H-score, H³-score, AUROC, NMI of the
//! target-private samples and overall accuracy for closed/partial settings.
//!
//! Label convention: source classes are `0..n_source`, with the common
//! classes first. Target labels below `n_source` are common, the rest are
//! target-private. All metrics are reported in percent.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scenario {
    Opda,
    Oda,
    Pda,
    Cda,
}

impl Scenario {
    pub fn has_target_private(self) -> bool {
        matches!(self, Scenario::Opda | Scenario::Oda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSplit {
    pub n_common: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
    pub scenario: Scenario,
}

impl ScenarioSplit {
    pub fn new(n_common: usize, n_source_private: usize, n_target_private: usize) -> Self {
        let scenario = match (n_source_private > 0, n_target_private > 0) {
            (true, true) => Scenario::Opda,
            (false, true) => Scenario::Oda,
            (true, false) => Scenario::Pda,
            (false, false) => Scenario::Cda,
        };
        ScenarioSplit {
            n_common,
            n_source_private,
            n_target_private,
            scenario,
        }
    }

    pub fn n_source(&self) -> usize {
        self.n_common + self.n_source_private
    }

    pub fn is_private(&self, label: usize) -> bool {
        label >= self.n_source()
    }

    /// Reads the split off the ground-truth labels. Common classes must be
    /// a prefix of the source classes.
    pub fn infer(n_source: usize, target_labels: &[usize]) -> Result<Self> {
        let common: BTreeSet<usize> = target_labels
            .iter()
            .copied()
            .filter(|&l| l < n_source)
            .collect();
        let private: BTreeSet<usize> = target_labels
            .iter()
            .copied()
            .filter(|&l| l >= n_source)
            .collect();
        let n_common = common.last().map_or(0, |&l| l + 1);
        Ok(ScenarioSplit::new(
            n_common,
            n_source - n_common,
            private.len(),
        ))
    }
}

/// H-score: harmonic mean of common and private accuracy.
pub fn h_score(a_c: f64, a_priv: f64) -> f64 {
    if a_c <= 0.0 || a_priv <= 0.0 {
        return 0.0;
    }
    2.0 / (1.0 / a_c + 1.0 / a_priv)
}

/// H³-score: harmonic mean of common accuracy, private accuracy and NMI.
pub fn h3_score(a_c: f64, a_priv: f64, nmi: f64) -> f64 {
    if a_c <= 0.0 || a_priv <= 0.0 || nmi <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / a_c + 1.0 / a_priv + 1.0 / nmi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub a_c: f64,
    pub a_c_no_unk: f64,
    /// `None` without target-private samples.
    pub a_priv: Option<f64>,
    /// Common classes that had at least one sample.
    pub n_common_evaluated: usize,
}

fn check_lengths(n: usize, others: &[(&str, usize)]) -> Result<()> {
    for (what, len) in others {
        if *len != n {
            return Err(Error::Shape(format!("{n} labels but {len} {what}")));
        }
    }
    Ok(())
}

/// Macro accuracy over common classes (a sample counts only if it is both
/// accepted as known and correctly classified), the same ignoring the
/// mask, and the fraction of private samples rejected.
pub fn per_class_accuracy(
    preds: &[usize],
    gt: &[usize],
    known: &[bool],
    split: &ScenarioSplit,
) -> Result<ClassAccuracy> {
    check_lengths(
        gt.len(),
        &[("predictions", preds.len()), ("mask entries", known.len())],
    )?;
    let n_source = split.n_source();
    if let Some(&p) = preds.iter().find(|&&p| p >= n_source) {
        return Err(Error::Domain(format!(
            "prediction {p} outside [0, {n_source})"
        )));
    }
    let mut per_class: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let (mut priv_total, mut priv_rejected) = (0usize, 0usize);
    for ((&p, &y), &k) in preds.iter().zip(gt).zip(known) {
        if split.is_private(y) {
            priv_total += 1;
            priv_rejected += usize::from(!k);
        } else {
            let e = per_class.entry(y).or_default();
            e.0 += 1;
            e.1 += usize::from(k && p == y);
            e.2 += usize::from(p == y);
        }
    }
    for c in 0..split.n_common {
        if !per_class.contains_key(&c) {
            log::warn!("common class {c} has no target samples; excluded from a_C");
        }
    }
    let n_eval = per_class.len();
    let macro_avg = |f: fn(&(usize, usize, usize)) -> usize| {
        if n_eval == 0 {
            return 0.0;
        }
        100.0
            * per_class
                .values()
                .map(|e| f(e) as f64 / e.0 as f64)
                .sum::<f64>()
            / n_eval as f64
    };
    Ok(ClassAccuracy {
        a_c: macro_avg(|e| e.1),
        a_c_no_unk: macro_avg(|e| e.2),
        a_priv: (priv_total > 0).then(|| 100.0 * priv_rejected as f64 / priv_total as f64),
        n_common_evaluated: n_eval,
    })
}

/// Mann-Whitney AUROC of `scores` separating known (`true`) from unknown
/// samples, ties counting one half. Rank sums are kept as doubled
/// integers so the result is exact.
pub fn auroc(scores: &[f64], is_known: &[bool]) -> Result<f64> {
    check_lengths(is_known.len(), &[("scores", scores.len())])?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores contain non-finite values".into()));
    }
    let n_k = is_known.iter().filter(|&&k| k).count() as u128;
    let n_u = is_known.len() as u128 - n_k;
    if n_k == 0 || n_u == 0 {
        return Err(Error::Domain(
            "AUROC is undefined with a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank2_known = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // doubled mean of the 1-based ranks i+1..=j
        let r2 = (i + 1 + j) as u128;
        let known_in_group = order[i..j].iter().filter(|&&x| is_known[x]).count() as u128;
        rank2_known += r2 * known_in_group;
        i = j;
    }
    let u2 = rank2_known - n_k * (n_k + 1);
    Ok(100.0 * u2 as f64 / (2 * n_k * n_u) as f64)
}

/// Normalized mutual information with the arithmetic mean of the two
/// entropies as denominator, in `[0, 1]`.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a.len(), &[("assignments", b.len())])?;
    if a.is_empty() {
        return Err(Error::Domain("NMI of an empty labelling".into()));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ent = |m: &BTreeMap<usize, usize>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (ent(&ca), ent(&cb));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| (f64::from(x) - c).powi(2))
        .sum()
}

fn kmeans_once(data: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = data.rows();
    let d = data.dims();
    let row64 = |i: usize| -> Vec<f64> { data.row(i).iter().map(|&v| f64::from(v)).collect() };
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![row64(rng.random_range(0..n))];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(row64(next));
        let c = centers.last().unwrap();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(data.row(i), c));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&x, &y| {
                    sq_dist(data.row(i), &centers[x]).total_cmp(&sq_dist(data.row(i), &centers[y]))
                })
                .unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(data.row(i)) {
                *s += f64::from(v);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assign
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(data.row(i), &centers[a]))
        .sum();
    KMeansResult {
        assignments: assign,
        inertia,
    }
}

/// Lloyd's k-means with k-means++ seeding; the restart with the lowest
/// inertia wins (earliest on ties).
pub fn kmeans(
    data: &EmbeddingMatrix,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<KMeansResult> {
    if k == 0 || k > data.rows() {
        return Err(Error::Domain(format!(
            "cannot form {k} clusters from {} points",
            data.rows()
        )));
    }
    let runs: Vec<KMeansResult> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            kmeans_once(data, k, &mut rng)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart"))
}

/// NMI (percent) between k-means clusters of the private samples and their
/// labels, with `k` equal to the number of distinct labels. `None` when
/// fewer than two private classes are present.
pub fn nmi_private(
    embeddings: &EmbeddingMatrix,
    labels: &[usize],
    seed: u64,
) -> Result<Option<f64>> {
    check_lengths(labels.len(), &[("embeddings", embeddings.rows())])?;
    let k = labels.iter().collect::<BTreeSet<_>>().len();
    if k < 2 {
        return Ok(None);
    }
    let clusters = kmeans(embeddings, k, 10, seed)?;
    Ok(Some(100.0 * nmi(&clusters.assignments, labels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub a_c: f64,
    pub a_c_no_unk: f64,
    pub a_priv: Option<f64>,
    pub h_score: Option<f64>,
    pub h3_score: Option<f64>,
    pub auroc: Option<f64>,
    pub nmi: Option<f64>,
    pub overall_acc: Option<f64>,
    pub n_common_evaluated: usize,
}

pub struct EvalInputs<'a> {
    /// Source-class prediction per target sample.
    pub preds: &'a [usize],
    pub gt: &'a [usize],
    pub known: &'a [bool],
    /// Known/unknown score per target sample, for AUROC.
    pub scores: Option<&'a [f64]>,
    /// Target embeddings used for the private-sample clustering.
    pub embeddings: Option<&'a EmbeddingMatrix>,
    pub split: ScenarioSplit,
    pub seed: u64,
}

pub fn evaluate(inp: &EvalInputs<'_>) -> Result<EvalReport> {
    let split = &inp.split;
    let acc = per_class_accuracy(inp.preds, inp.gt, inp.known, split)?;
    let gt_known: Vec<bool> = inp.gt.iter().map(|&y| !split.is_private(y)).collect();
    let auroc = match inp.scores {
        Some(s) if gt_known.iter().any(|&k| k) && gt_known.iter().any(|&k| !k) => {
            Some(auroc(s, &gt_known)?)
        }
        _ => None,
    };
    let nmi = match inp.embeddings {
        Some(e) => {
            check_lengths(inp.gt.len(), &[("embeddings", e.rows())])?;
            let idx: Vec<usize> = (0..inp.gt.len())
                .filter(|&i| split.is_private(inp.gt[i]))
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| inp.gt[i]).collect();
            nmi_private(&e.select_rows(&idx), &labels, inp.seed)?
        }
        None => None,
    };
    let h = acc.a_priv.map(|p| h_score(acc.a_c, p));
    let h3 = match (acc.a_priv, nmi) {
        (Some(p), Some(m)) => Some(h3_score(acc.a_c, p, m)),
        _ => None,
    };
    let overall = (!split.scenario.has_target_private() && !inp.gt.is_empty()).then(|| {
        let hits = inp
            .preds
            .iter()
            .zip(inp.gt)
            .zip(inp.known)
            .filter(|((p, y), k)| **k && p == y)
            .count();
        100.0 * hits as f64 / inp.gt.len() as f64
    });
    Ok(EvalReport {
        scenario: split.scenario,
        a_c: acc.a_c,
        a_c_no_unk: acc.a_c_no_unk,
        a_priv: acc.a_priv,
        h_score: h,
        h3_score: h3,
        auroc,
        nmi,
        overall_acc: overall,
        n_common_evaluated: acc.n_common_evaluated,
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "scenario,a_c,a_c_no_unk,a_priv,h_score,h3_score,auroc,nmi,overall_acc,n_common_evaluated";

    /// Header line plus one data row; missing metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let scenario = serde_json::to_value(self.scenario)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        format!(
            "{}\n{},{},{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            scenario,
            self.a_c,
            self.a_c_no_unk,
            opt(self.a_priv),
            opt(self.h_score),
            opt(self.h3_score),
            opt(self.auroc),
            opt(self.nmi),
            opt(self.overall_acc),
            self.n_common_evaluated
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}
