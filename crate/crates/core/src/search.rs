//! Greedy coordinate search over text centers (stage 1).
//!
//! The search state is a tuple of `K0` column indices into the
//! [`SimilarityCache`] column space plus a retain bit per slot. The first
//! `n_source` slots hold the source class names and never change; the rest
//! hold nouns. Each step revisits one slot, tries `n_c` replacement nouns and
//! the "discard" option, and keeps whichever gives the lowest
//! information-maximization loss over the whole target set.
//!
//! Candidate losses are evaluated incrementally: for slot `i`, the softmax
//! partition terms of every other active center are computed once per step,
//! after which each candidate costs one column gather plus one pass to form
//! the mean prediction.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingMatrix, SimilarityCache, TextBank};
use crate::error::{Error, Result};
use crate::math::{
    self, entropy_of, im_loss, normalized_entropy, softmax_scaled, PredictionConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Upper bound on the number of centers.
    pub k0: usize,
    /// Candidate nouns tried per noun slot, incumbent included.
    pub n_candidates: usize,
    /// Normalized-entropy threshold under which a source slot is forced on.
    pub gamma_ent: f64,
    pub n_outer: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k0: 100,
            n_candidates: 300,
            gamma_ent: 0.3,
            n_outer: 20,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, n_source: usize, n_nouns: usize) -> Result<()> {
        if self.k0 < n_source {
            return Err(Error::Config(format!(
                "k0 = {} is below the {n_source} source classes",
                self.k0
            )));
        }
        if self.k0 - n_source > n_nouns {
            return Err(Error::Config(format!(
                "vocabulary of {n_nouns} nouns cannot fill {} noun slots",
                self.k0 - n_source
            )));
        }
        if self.n_candidates == 0 || self.n_candidates > n_nouns.max(1) {
            return Err(Error::Config(format!(
                "n_candidates must lie in [1, {n_nouns}], got {}",
                self.n_candidates
            )));
        }
        if !(self.gamma_ent > 0.0 && self.gamma_ent < 1.0) {
            return Err(Error::Config(format!(
                "gamma_ent must lie in (0, 1), got {}",
                self.gamma_ent
            )));
        }
        if self.n_outer == 0 {
            return Err(Error::Config("n_outer must be >= 1".into()));
        }
        Ok(())
    }
}

/// Estimated class counts read off the retain bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCountEstimate {
    pub k: usize,
    pub k_com: usize,
    pub k_pri: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchState {
    /// Column of each slot in the cache column space.
    pub columns: Vec<usize>,
    pub retained: Vec<bool>,
    pub n_source: usize,
}

impl SearchState {
    pub fn k0(&self) -> usize {
        self.columns.len()
    }

    /// Number of active centers.
    pub fn k(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }

    pub fn active_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .zip(&self.retained)
            .filter(|(_, &r)| r)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn counts(&self) -> ClassCountEstimate {
        let k_com = self.retained[..self.n_source]
            .iter()
            .filter(|&&r| r)
            .count();
        let k_pri = self.retained[self.n_source..]
            .iter()
            .filter(|&&r| r)
            .count();
        ClassCountEstimate {
            k: k_com + k_pri,
            k_com,
            k_pri,
        }
    }

    /// Checks the structural invariants: source slots point at their own
    /// columns, noun slots at noun columns, active nouns are distinct.
    pub fn check(&self, n_columns: usize) -> Result<()> {
        if self.retained.len() != self.columns.len() || self.n_source > self.columns.len() {
            return Err(Error::DegenerateState("inconsistent slot counts".into()));
        }
        for (i, &c) in self.columns.iter().enumerate() {
            let ok = if i < self.n_source {
                c == i
            } else {
                c >= self.n_source && c < n_columns
            };
            if !ok {
                return Err(Error::DegenerateState(format!(
                    "slot {i} holds invalid column {c}"
                )));
            }
        }
        let mut seen = HashSet::new();
        for c in self.active_columns() {
            if !seen.insert(c) {
                return Err(Error::DegenerateState(format!(
                    "column {c} is active in two slots"
                )));
            }
        }
        Ok(())
    }
}

/// Source columns first, then `k0 - n_source` distinct random nouns; every
/// slot starts retained.
pub fn init_state<R: Rng + ?Sized>(
    n_source: usize,
    n_nouns: usize,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<SearchState> {
    if cfg.k0 < n_source {
        return Err(Error::Config(format!(
            "k0 = {} is below the {n_source} source classes",
            cfg.k0
        )));
    }
    let n_noun_slots = cfg.k0 - n_source;
    if n_nouns < n_noun_slots {
        return Err(Error::Config(format!(
            "vocabulary of {n_nouns} nouns cannot fill {n_noun_slots} noun slots"
        )));
    }
    let mut columns: Vec<usize> = (0..n_source).collect();
    columns.extend(
        index::sample(rng, n_nouns, n_noun_slots)
            .into_iter()
            .map(|j| n_source + j),
    );
    Ok(SearchState {
        retained: vec![true; columns.len()],
        columns,
        n_source,
    })
}

/// Information-maximization loss of the active centers over every target
/// sample, computed directly from per-sample softmax vectors.
pub fn loss_for(
    state: &SearchState,
    cache: &SimilarityCache,
    cfg: &PredictionConfig,
) -> Result<f64> {
    let active = state.active_columns();
    if active.is_empty() {
        return Err(Error::DegenerateState("no active centers".into()));
    }
    if cache.n_targets() == 0 {
        return Err(Error::Domain("no target samples".into()));
    }
    let preds = (0..cache.n_targets())
        .map(|x| {
            let sims: Vec<f64> = active.iter().map(|&c| f64::from(cache.get(x, c))).collect();
            softmax_scaled(&sims, cfg.tau)
        })
        .collect::<Result<Vec<_>>>()?;
    im_loss(&preds, cfg)
}

/// How a step settled its slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDecision {
    /// Chosen by comparing losses; never increases the loss.
    Greedy,
    /// Source slot forced on by the protected-source rule.
    Protected,
    /// Only active center; discarding it would leave nothing to cluster with.
    Guarded,
}

impl StepDecision {
    /// Whether the step went through the loss comparison.
    pub fn is_loss_driven(self) -> bool {
        !matches!(self, StepDecision::Protected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub outer: usize,
    pub position: usize,
    pub decision: StepDecision,
    pub loss_before: f64,
    pub loss_after: f64,
    pub column: usize,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    /// Loss after each outer iteration.
    pub outer_loss: Vec<f64>,
    /// Active centers after each outer iteration.
    pub outer_k: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub state: SearchState,
    pub counts: ClassCountEstimate,
    pub trace: SearchTrace,
}

/// Everything a search needs: the cache, the text bank it was built from,
/// the normalized target embeddings (for prototypes) and configs.
pub struct SearchProblem<'a> {
    pub cache: &'a SimilarityCache,
    pub texts: &'a TextBank,
    pub targets: &'a EmbeddingMatrix,
    pub prediction: PredictionConfig,
    pub search: SearchConfig,
}

impl<'a> SearchProblem<'a> {
    pub fn new(
        cache: &'a SimilarityCache,
        texts: &'a TextBank,
        targets: &'a EmbeddingMatrix,
        prediction: PredictionConfig,
        search: SearchConfig,
    ) -> Result<Self> {
        prediction.validate()?;
        search.validate(texts.n_source, texts.n_nouns())?;
        if cache.n_columns() != texts.matrix.rows() || cache.n_targets() != targets.rows() {
            return Err(Error::Shape(format!(
                "cache is {}x{}, expected {}x{}",
                cache.n_targets(),
                cache.n_columns(),
                targets.rows(),
                texts.matrix.rows()
            )));
        }
        if cache.n_targets() == 0 {
            return Err(Error::Domain("no target samples".into()));
        }
        Ok(SearchProblem {
            cache,
            texts,
            targets,
            prediction,
            search,
        })
    }

    pub fn init_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SearchState> {
        init_state(self.texts.n_source, self.texts.n_nouns(), &self.search, rng)
    }

    pub fn loss(&self, state: &SearchState) -> Result<f64> {
        loss_for(state, self.cache, &self.prediction)
    }

    /// Normalized entropy of source name `position` classified against the
    /// current target prototypes, and whether it falls under `gamma_ent`.
    ///
    /// Prototypes are the normalized means of the target samples whose
    /// nearest active center is each center. Empty clusters have no
    /// prototype, otherwise an active name would match itself.
    pub fn protected_source_rule(
        &self,
        state: &SearchState,
        position: usize,
    ) -> Result<(bool, f64)> {
        if position >= state.n_source {
            return Err(Error::Domain(format!(
                "slot {position} is not a source slot"
            )));
        }
        let active = state.active_columns();
        if active.is_empty() {
            return Err(Error::DegenerateState("no active centers".into()));
        }
        let dims = self.targets.dims();
        let mut sums = vec![0f64; active.len() * dims];
        let mut counts = vec![0usize; active.len()];
        for x in 0..self.cache.n_targets() {
            let row = self.cache.target_row(x);
            let mut best = 0;
            for (j, &c) in active.iter().enumerate() {
                if row[c] > row[active[best]] {
                    best = j;
                }
            }
            counts[best] += 1;
            for (s, &v) in sums[best * dims..(best + 1) * dims]
                .iter_mut()
                .zip(self.targets.row(x))
            {
                *s += f64::from(v);
            }
        }
        let source = self.texts.matrix.row(position);
        let mut sims = Vec::with_capacity(active.len());
        for j in 0..active.len() {
            let sum = &sums[j * dims..(j + 1) * dims];
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if counts[j] == 0 || norm < 1e-12 {
                continue;
            }
            sims.push(
                sum.iter()
                    .zip(source)
                    .map(|(s, &w)| s / norm * f64::from(w))
                    .sum(),
            );
        }
        if sims.is_empty() {
            return Ok((false, 1.0));
        }
        let p = softmax_scaled(&sims, self.prediction.tau)?;
        let ent = normalized_entropy(&p);
        Ok((ent < self.search.gamma_ent, ent))
    }

    /// Optimizes slot `position` with every other slot held fixed.
    pub fn greedy_step<R: Rng + ?Sized>(
        &self,
        state: &mut SearchState,
        position: usize,
        rng: &mut R,
    ) -> Result<StepRecord> {
        if position >= state.k0() {
            return Err(Error::Domain(format!(
                "slot {position} outside [0, {})",
                state.k0()
            )));
        }
        if state.k() == 0 {
            return Err(Error::DegenerateState("no active centers".into()));
        }
        let incumbent = state.columns[position];
        let was_retained = state.retained[position];
        let others: Vec<usize> = state
            .columns
            .iter()
            .zip(&state.retained)
            .enumerate()
            .filter(|&(j, (_, &r))| r && j != position)
            .map(|(_, (&c, _))| c)
            .collect();
        let eval = StepEvaluator::new(self.cache, &others, &self.prediction);
        let loss_discard = eval.loss(None);

        if position < state.n_source {
            let loss_keep = eval.loss(Some(incumbent));
            let loss_before = if was_retained {
                loss_keep
            } else {
                loss_discard
            };
            let (forced, _) = self.protected_source_rule(state, position)?;
            let (retain, decision) = if forced {
                (true, StepDecision::Protected)
            } else if others.is_empty() {
                (true, StepDecision::Guarded)
            } else {
                (loss_keep < loss_discard, StepDecision::Greedy)
            };
            state.retained[position] = retain;
            return Ok(StepRecord {
                outer: 0,
                position,
                decision,
                loss_before,
                loss_after: if retain { loss_keep } else { loss_discard },
                column: incumbent,
                retained: retain,
            });
        }

        let candidates = self.sample_candidates(state, position, &others, rng);
        let losses: Vec<f64> = candidates.par_iter().map(|&c| eval.loss(Some(c))).collect();
        let loss_before = if was_retained {
            // the incumbent is always first when it is retained
            losses[0]
        } else {
            loss_discard
        };
        let best = losses
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |acc, (i, &l)| match acc {
                Some((_, bl)) if bl <= l => acc,
                _ => Some((i, l)),
            });
        let (column, loss_min) = match best {
            Some((i, l)) => (candidates[i], l),
            None => (incumbent, f64::INFINITY),
        };
        let retain = loss_min < loss_discard;
        let decision = if others.is_empty() {
            StepDecision::Guarded
        } else {
            StepDecision::Greedy
        };
        state.columns[position] = column;
        state.retained[position] = retain;
        Ok(StepRecord {
            outer: 0,
            position,
            decision,
            loss_before,
            loss_after: if retain { loss_min } else { loss_discard },
            column,
            retained: retain,
        })
    }

    /// The incumbent (when it does not collide with another active center)
    /// followed by uniform draws without replacement from the unused nouns,
    /// `n_candidates` in total or as many as exist.
    fn sample_candidates<R: Rng + ?Sized>(
        &self,
        state: &SearchState,
        position: usize,
        others: &[usize],
        rng: &mut R,
    ) -> Vec<usize> {
        let incumbent = state.columns[position];
        let taken: HashSet<usize> = others.iter().copied().collect();
        let incumbent_ok = !taken.contains(&incumbent);
        let n_source = self.texts.n_source;
        let pool: Vec<usize> = (n_source..self.texts.matrix.rows())
            .filter(|c| *c != incumbent && !taken.contains(c))
            .collect();
        let want = self
            .search
            .n_candidates
            .saturating_sub(usize::from(incumbent_ok))
            .min(pool.len());
        let mut out = Vec::with_capacity(want + 1);
        if incumbent_ok {
            out.push(incumbent);
        }
        out.extend(
            index::sample(rng, pool.len(), want)
                .into_iter()
                .map(|i| pool[i]),
        );
        out
    }

    /// Runs `n_outer` sweeps over all slots from a fresh initial state.
    pub fn run<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SearchOutcome> {
        let state = self.init_state(rng)?;
        self.run_from(state, rng)
    }

    pub fn run_from<R: Rng + ?Sized>(
        &self,
        mut state: SearchState,
        rng: &mut R,
    ) -> Result<SearchOutcome> {
        state.check(self.cache.n_columns())?;
        let mut trace = SearchTrace {
            outer_loss: Vec::with_capacity(self.search.n_outer),
            outer_k: Vec::with_capacity(self.search.n_outer),
            steps: Vec::with_capacity(self.search.n_outer * state.k0()),
        };
        for outer in 0..self.search.n_outer {
            let mut last = None;
            for position in 0..state.k0() {
                let mut rec = self.greedy_step(&mut state, position, rng)?;
                rec.outer = outer;
                last = Some(rec.loss_after);
                trace.steps.push(rec);
            }
            let loss = match last {
                Some(l) => l,
                None => self.loss(&state)?,
            };
            log::debug!("outer {outer}: loss {loss:.6}, K = {}", state.k());
            trace.outer_loss.push(loss);
            trace.outer_k.push(state.k());
        }
        Ok(SearchOutcome {
            counts: state.counts(),
            state,
            trace,
        })
    }
}

/// Incremental loss evaluation for one slot: everything about the other
/// active centers is precomputed.
struct StepEvaluator<'a> {
    cache: &'a SimilarityCache,
    others: &'a [usize],
    inv_tau: f64,
    lambda_div: f64,
    /// Per-sample max logit over `others`.
    shift: Vec<f64>,
    /// `exp(logit - shift)`, samples × others.
    exps: Vec<f64>,
    /// Per-sample partition sum over `others`.
    part: Vec<f64>,
    /// Per-sample `Σ exp(u) u` with `u = logit - shift`.
    moment: Vec<f64>,
}

impl<'a> StepEvaluator<'a> {
    fn new(cache: &'a SimilarityCache, others: &'a [usize], cfg: &PredictionConfig) -> Self {
        let n = cache.n_targets();
        let k = others.len();
        let inv_tau = 1.0 / cfg.tau;
        let mut shift = vec![f64::NEG_INFINITY; n];
        let mut exps = vec![0f64; n * k];
        let mut part = vec![0f64; n];
        let mut moment = vec![0f64; n];
        for x in 0..n {
            let row = cache.target_row(x);
            let m = others
                .iter()
                .map(|&c| f64::from(row[c]) * inv_tau)
                .fold(f64::NEG_INFINITY, f64::max);
            shift[x] = m;
            for (j, &c) in others.iter().enumerate() {
                let u = f64::from(row[c]) * inv_tau - m;
                let e = u.exp();
                exps[x * k + j] = e;
                part[x] += e;
                moment[x] += e * u;
            }
        }
        StepEvaluator {
            cache,
            others,
            inv_tau,
            lambda_div: cfg.lambda_div,
            shift,
            exps,
            part,
            moment,
        }
    }

    /// Loss with the slot set to `candidate`, or discarded for `None`.
    fn loss(&self, candidate: Option<usize>) -> f64 {
        let k = self.others.len();
        if candidate.is_none() && k == 0 {
            return f64::INFINITY;
        }
        let n = self.cache.n_targets();
        let mut ent_sum = 0f64;
        let mut mean = vec![0f64; k];
        let mut mean_c = 0f64;
        for x in 0..n {
            // (partition, moment, scale applied to the precomputed exps, candidate mass)
            let (z, s, scale, e_c) = match candidate {
                None => (self.part[x], self.moment[x], 1.0, 0.0),
                Some(c) => {
                    let lc = f64::from(self.cache.get(x, c)) * self.inv_tau;
                    let m = self.shift[x];
                    if k == 0 {
                        (1.0, 0.0, 0.0, 1.0)
                    } else if lc <= m {
                        let uc = lc - m;
                        let e = uc.exp();
                        (self.part[x] + e, self.moment[x] + e * uc, 1.0, e)
                    } else {
                        // rebase on the candidate's logit
                        let d = m - lc;
                        let f = d.exp();
                        (
                            self.part[x] * f + 1.0,
                            f * (self.moment[x] + self.part[x] * d),
                            f,
                            1.0,
                        )
                    }
                }
            };
            ent_sum += z.ln() - s / z;
            let w = scale / z;
            for (mj, &e) in mean.iter_mut().zip(&self.exps[x * k..(x + 1) * k]) {
                *mj += e * w;
            }
            mean_c += e_c / z;
        }
        let nf = n as f64;
        for mj in &mut mean {
            *mj /= nf;
        }
        let mut div = entropy_of(&mean);
        if candidate.is_some() {
            div -= math::xlogx(mean_c / nf);
        }
        ent_sum / nf - self.lambda_div * div
    }
}

/// Machine-readable summary of a finished search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub n_source: usize,
    pub columns: Vec<usize>,
    /// Class name or noun behind each slot.
    pub names: Vec<String>,
    pub retained: Vec<bool>,
    pub counts: ClassCountEstimate,
    pub outer_loss: Vec<f64>,
    pub outer_k: Vec<usize>,
}

impl SearchReport {
    pub fn new(outcome: &SearchOutcome, source_names: &[String], noun_names: &[String]) -> Self {
        let n_source = outcome.state.n_source;
        let names = outcome
            .state
            .columns
            .iter()
            .map(|&c| {
                if c < n_source {
                    source_names.get(c).cloned().unwrap_or_default()
                } else {
                    noun_names.get(c - n_source).cloned().unwrap_or_default()
                }
            })
            .collect();
        SearchReport {
            n_source,
            columns: outcome.state.columns.clone(),
            names,
            retained: outcome.state.retained.clone(),
            counts: outcome.counts,
            outer_loss: outcome.trace.outer_loss.clone(),
            outer_k: outcome.trace.outer_k.clone(),
        }
    }

    pub fn state(&self) -> SearchState {
        SearchState {
            columns: self.columns.clone(),
            retained: self.retained.clone(),
            n_source: self.n_source,
        }
    }

    /// Names of the retained slots, in slot order.
    pub fn active_names(&self) -> Vec<&str> {
        self.names
            .iter()
            .zip(&self.retained)
            .filter(|(_, &r)| r)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::{build_similarity_cache, l2_normalize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Orthonormal basis vectors as anchors: within-cluster similarity 1,
    /// cross-cluster 0.
    fn basis(dims: usize, idx: &[usize]) -> EmbeddingMatrix {
        let rows: Vec<Vec<f32>> = idx
            .iter()
            .map(|&i| {
                let mut v = vec![0f32; dims];
                v[i] = 1.0;
                v
            })
            .collect();
        l2_normalize(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap()
    }

    struct Fixture {
        targets: EmbeddingMatrix,
        texts: TextBank,
        cache: SimilarityCache,
    }

    /// `per` target samples on each of `clusters`; source names on
    /// `source`, nouns on `nouns` (all basis indices).
    fn fixture(
        dims: usize,
        clusters: &[usize],
        per: usize,
        source: &[usize],
        nouns: &[usize],
    ) -> Fixture {
        let idx: Vec<usize> = clusters.iter().flat_map(|&c| vec![c; per]).collect();
        let targets = basis(dims, &idx);
        let texts = TextBank::new(&basis(dims, source), &basis(dims, nouns)).unwrap();
        let cache = build_similarity_cache(&targets, &texts.matrix).unwrap();
        Fixture {
            targets,
            texts,
            cache,
        }
    }

    fn problem<'a>(f: &'a Fixture, search: SearchConfig) -> SearchProblem<'a> {
        SearchProblem::new(
            &f.cache,
            &f.texts,
            &f.targets,
            PredictionConfig::default(),
            search,
        )
        .unwrap()
    }

    fn cfg(k0: usize, n_candidates: usize) -> SearchConfig {
        SearchConfig {
            k0,
            n_candidates,
            n_outer: 3,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn init_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = init_state(10, 500, &cfg(100, 300), &mut rng).unwrap();
        assert_eq!(&s.columns[..10], &(0..10).collect::<Vec<_>>()[..]);
        let nouns: HashSet<usize> = s.columns[10..].iter().copied().collect();
        assert_eq!(nouns.len(), 90);
        assert!(nouns.iter().all(|&c| (10..510).contains(&c)));
        assert!(s.retained.iter().all(|&r| r));
        s.check(510).unwrap();

        let only = init_state(10, 500, &cfg(10, 300), &mut rng).unwrap();
        assert_eq!(only.columns, (0..10).collect::<Vec<_>>());

        assert!(matches!(
            init_state(10, 50, &cfg(100, 10), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_is_seeded() {
        let a = init_state(5, 200, &cfg(40, 10), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_state(5, 200, &cfg(40, 10), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_center_has_zero_loss() {
        let f = fixture(6, &[0, 1, 2], 4, &[0], &[3, 4]);
        let state = SearchState {
            columns: vec![0, 1, 2],
            retained: vec![true, false, false],
            n_source: 1,
        };
        assert_eq!(
            loss_for(&state, &f.cache, &PredictionConfig::default()).unwrap(),
            0.0
        );
        let empty = SearchState {
            retained: vec![false; 3],
            ..state
        };
        assert!(matches!(
            loss_for(&empty, &f.cache, &PredictionConfig::default()),
            Err(Error::DegenerateState(_))
        ));
    }

    #[test]
    fn two_clusters_reach_diversity_bound() {
        let f = fixture(4, &[0, 1], 10, &[2], &[0, 1, 3]);
        let state = SearchState {
            columns: vec![0, 1, 2],
            retained: vec![false, true, true],
            n_source: 1,
        };
        let l = loss_for(&state, &f.cache, &PredictionConfig::default()).unwrap();
        assert!((l + 0.6 * 2f64.ln()).abs() < 0.05, "{l}");
    }

    #[test]
    fn incremental_evaluator_matches_direct_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f32> = (0..40 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = l2_normalize(&EmbeddingMatrix::new(40, 12, raw).unwrap()).unwrap();
        let raw: Vec<f32> = (0..30 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let all = l2_normalize(&EmbeddingMatrix::new(30, 12, raw).unwrap()).unwrap();
        let texts = TextBank::new(
            &all.select_rows(&(0..4).collect::<Vec<_>>()),
            &all.select_rows(&(4..30).collect::<Vec<_>>()),
        )
        .unwrap();
        let cache = build_similarity_cache(&targets, &texts.matrix).unwrap();
        for tau in [0.02, 0.1, 1.0] {
            let pred = PredictionConfig {
                tau,
                lambda_div: 0.6,
            };
            let state = SearchState {
                columns: vec![0, 1, 2, 3, 7, 9, 20, 25],
                retained: vec![true, false, true, true, true, false, true, true],
                n_source: 4,
            };
            for pos in 0..state.k0() {
                let others: Vec<usize> = state
                    .columns
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != pos && state.retained[j])
                    .map(|(_, &c)| c)
                    .collect();
                let eval = StepEvaluator::new(&cache, &others, &pred);
                let mut dis = state.clone();
                dis.retained[pos] = false;
                let direct = loss_for(&dis, &cache, &pred).unwrap();
                assert!((eval.loss(None) - direct).abs() < 1e-9);
                for cand in [state.columns[pos], 5, 11, 29] {
                    if others.contains(&cand) {
                        continue;
                    }
                    let mut s = state.clone();
                    s.columns[pos] = cand;
                    s.retained[pos] = true;
                    let direct = loss_for(&s, &cache, &pred).unwrap();
                    assert!(
                        (eval.loss(Some(cand)) - direct).abs() < 1e-9,
                        "tau={tau} pos={pos} cand={cand}"
                    );
                }
            }
        }
    }

    #[test]
    fn step_keeps_incumbent_when_it_is_the_only_candidate() {
        // clusters 0,1; slot 2 holds noun on basis 1 but discarded
        let f = fixture(4, &[0, 1], 5, &[0], &[1, 2, 3]);
        let p = problem(&f, cfg(2, 1));
        let mut state = SearchState {
            columns: vec![0, 1],
            retained: vec![true, false],
            n_source: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = p.greedy_step(&mut state, 1, &mut rng).unwrap();
        assert_eq!(state.columns, vec![0, 1]);
        assert!(state.retained[1]);
        assert_eq!(rec.decision, StepDecision::Greedy);
        assert!(rec.loss_after < rec.loss_before);
    }

    #[test]
    fn step_finds_missing_anchor() {
        // 4 clusters; source names for 0,1,2; nouns include anchor 3 plus junk
        let f = fixture(8, &[0, 1, 2, 3], 6, &[0, 1, 2], &[4, 5, 3, 6, 7]);
        let n_nouns = 5;
        let p = problem(&f, cfg(4, n_nouns));
        // slot 3 starts on junk noun column 3 (basis 4)
        let start = SearchState {
            columns: vec![0, 1, 2, 3],
            retained: vec![true; 4],
            n_source: 3,
        };
        // exhaustive oracle over every noun
        let pred = PredictionConfig::default();
        let best = (3..3 + n_nouns)
            .min_by(|&a, &b| {
                let mut sa = start.clone();
                sa.columns[3] = a;
                let mut sb = start.clone();
                sb.columns[3] = b;
                loss_for(&sa, &f.cache, &pred)
                    .unwrap()
                    .total_cmp(&loss_for(&sb, &f.cache, &pred).unwrap())
            })
            .unwrap();
        assert_eq!(best, 5);
        let mut state = start.clone();
        p.greedy_step(&mut state, 3, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(state.columns[3], best);
        assert!(state.retained[3]);
    }

    #[test]
    fn step_discards_duplicate_semantics() {
        // noun column 2 carries the same embedding as source 0
        let f = fixture(4, &[0, 1], 8, &[0, 1], &[0, 2]);
        let p = problem(&f, cfg(3, 1));
        let mut state = SearchState {
            columns: vec![0, 1, 2],
            retained: vec![true; 3],
            n_source: 2,
        };
        let pred = PredictionConfig::default();
        let mut dis = state.clone();
        dis.retained[2] = false;
        assert!(
            loss_for(&dis, &f.cache, &pred).unwrap() < loss_for(&state, &f.cache, &pred).unwrap()
        );
        p.greedy_step(&mut state, 2, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(!state.retained[2]);
    }

    #[test]
    fn protected_rule_on_common_and_private() {
        // target clusters 0,1,2; source names 0 (common), 5 (private)
        let f = fixture(8, &[0, 1, 2], 6, &[0, 5], &[1, 2, 3, 4]);
        let p = problem(&f, cfg(4, 2));
        let state = SearchState {
            columns: vec![0, 1, 2, 3],
            retained: vec![true, true, true, true],
            n_source: 2,
        };
        let (forced, ent) = p.protected_source_rule(&state, 0).unwrap();
        assert!(forced && ent < 1e-6, "{ent}");
        let (forced, ent) = p.protected_source_rule(&state, 1).unwrap();
        assert!(!forced && ent > 0.9, "{ent}");

        let single = SearchState {
            retained: vec![false, true, false, false],
            ..state
        };
        let (forced, ent) = p.protected_source_rule(&single, 1).unwrap();
        assert!(forced);
        assert_eq!(ent, 0.0);
    }

    #[test]
    fn lone_center_cannot_be_discarded() {
        let f = fixture(4, &[0, 1], 4, &[2], &[0, 1, 3]);
        let p = problem(&f, cfg(2, 3));
        let mut state = SearchState {
            columns: vec![0, 2],
            retained: vec![false, true],
            n_source: 1,
        };
        let rec = p
            .greedy_step(&mut state, 1, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(rec.decision, StepDecision::Guarded);
        assert_eq!(state.k(), 1);
    }

    #[test]
    fn step_rejects_bad_position() {
        let f = fixture(4, &[0], 2, &[0], &[1, 2]);
        let p = problem(&f, cfg(2, 1));
        let mut state = SearchState {
            columns: vec![0, 1],
            retained: vec![true, true],
            n_source: 1,
        };
        assert!(matches!(
            p.greedy_step(&mut state, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn search_recovers_orthogonal_clusters() {
        // 3 common (0,1,2), 1 source-private (3), 2 target-private (4,5)
        let nouns: Vec<usize> = (0..12).collect();
        let f = fixture(12, &[0, 1, 2, 4, 5], 5, &[0, 1, 2, 3], &nouns);
        let p = problem(
            &f,
            SearchConfig {
                k0: 9,
                n_candidates: 6,
                n_outer: 5,
                ..SearchConfig::default()
            },
        );
        let out = p.run(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out.state.retained[..4], [true, true, true, false]);
        assert_eq!(out.counts.k_pri, 2);
        assert_eq!(out.counts.k, 5);
        out.state.check(f.cache.n_columns()).unwrap();
        let mut found: Vec<usize> = out
            .state
            .columns
            .iter()
            .zip(&out.state.retained)
            .skip(4)
            .filter(|(_, &r)| r)
            .map(|(&c, _)| c - 4)
            .collect();
        found.sort();
        assert_eq!(found, vec![4, 5]);
    }
}
