//! Linear-adapter refinement (stage 2).
//!
//! Image embeddings pass through `normalize(W z)`; text centers stay frozen.
//! The objective is cross-entropy of source samples against the source class
//! names plus the information-maximization loss of each target batch against
//! the searched centers. Gradients are analytic and accumulated in `f64`.
//!
//! Weights are handled as `f64` slices during optimization and rounded to
//! `f32` only when an [`Adapter`] is materialized.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{load_embeddings, save_embeddings, EmbeddingMatrix, Manifest, Role};
use crate::error::{Error, Result};
use crate::math::{
    cross_entropy, im_loss, softmax_scaled, PredictionConfig, ProbVector, PROB_FLOOR,
};

const MIN_OUTPUT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    dims: usize,
    w: Vec<f32>,
}

impl Adapter {
    pub fn identity(dims: usize) -> Self {
        let mut w = vec![0f32; dims * dims];
        for i in 0..dims {
            w[i * dims + i] = 1.0;
        }
        Adapter { dims, w }
    }

    pub fn from_matrix(m: &EmbeddingMatrix) -> Result<Self> {
        if m.rows() != m.dims() {
            return Err(Error::Shape(format!(
                "adapter must be square, got {}x{}",
                m.rows(),
                m.dims()
            )));
        }
        m.check_finite()?;
        Ok(Adapter {
            dims: m.dims(),
            w: m.as_slice().to_vec(),
        })
    }

    pub fn from_f64(dims: usize, w: &[f64]) -> Result<Self> {
        if w.len() != dims * dims {
            return Err(Error::Shape(format!(
                "{} weights for a {dims}x{dims} adapter",
                w.len()
            )));
        }
        let w: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("adapter weights are not finite".into()));
        }
        Ok(Adapter { dims, w })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Row-major `W`.
    pub fn weights(&self) -> &[f32] {
        &self.w
    }

    pub fn weights_f64(&self) -> Vec<f64> {
        self.w.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_matrix(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(self.dims, self.dims, self.w.clone()).expect("square by construction")
    }

    /// `normalize(W z)`.
    pub fn forward(&self, z: &[f32]) -> Result<Vec<f32>> {
        let (y, _) = forward64(&self.weights_f64(), self.dims, z)?;
        Ok(y.into_iter().map(|v| v as f32).collect())
    }

    /// Applies [`Adapter::forward`] to every row.
    pub fn forward_all(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if m.dims() != self.dims {
            return Err(Error::Shape(format!(
                "embeddings have {} dims, adapter expects {}",
                m.dims(),
                self.dims
            )));
        }
        let w = self.weights_f64();
        let rows = (0..m.rows())
            .into_par_iter()
            .map(|i| {
                forward64(&w, self.dims, m.row(i))
                    .map(|(y, _)| y.into_iter().map(|v| v as f32).collect::<Vec<f32>>())
                    .map_err(|e| match e {
                        Error::Degenerate(msg) => Error::Degenerate(format!("row {i}: {msg}")),
                        e => e,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let data = rows.concat();
        let out = EmbeddingMatrix::new(m.rows(), self.dims, data)?;
        crate::embedding_store::l2_normalize(&out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_embeddings(
            path,
            &self.to_matrix(),
            &Manifest::images(Role::Adapter, None, self.dims),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, manifest) = load_embeddings(path)?;
        if manifest.role != Role::Adapter {
            return Err(Error::Consistency(format!(
                "{} has role {:?}, expected adapter",
                path.display(),
                manifest.role
            )));
        }
        Adapter::from_matrix(&m)
    }
}

/// `W z` normalized, plus the pre-normalization norm.
fn forward64(w: &[f64], dims: usize, z: &[f32]) -> Result<(Vec<f64>, f64)> {
    if z.len() != dims {
        return Err(Error::Shape(format!(
            "embedding has {} dims, adapter expects {dims}",
            z.len()
        )));
    }
    let mut u: Vec<f64> = w
        .chunks_exact(dims)
        .map(|row| row.iter().zip(z).map(|(a, &b)| a * f64::from(b)).sum())
        .collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm < MIN_OUTPUT_NORM {
        return Err(Error::Degenerate(format!(
            "adapter output has norm {norm:e}"
        )));
    }
    for v in &mut u {
        *v /= norm;
    }
    Ok((u, norm))
}

fn sims64(y: &[f64], centers: &EmbeddingMatrix) -> Vec<f64> {
    centers
        .iter_rows()
        .map(|c| y.iter().zip(c).map(|(a, &b)| a * f64::from(b)).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 1e-4,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!(
                "eta0 must be > 0, got {}",
                self.eta0
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// `eta0 (1 + 10 p)^-0.75` at progress `p` in `[0, 1]`.
    pub fn learning_rate(&self, progress: f64) -> f64 {
        self.eta0 * (1.0 + 10.0 * progress).powf(-0.75)
    }
}

/// Frozen centers the adapter is trained against.
pub struct RefineProblem<'a> {
    /// Source class-name embeddings, one row per source class.
    pub source_centers: &'a EmbeddingMatrix,
    /// Active searched centers.
    pub target_centers: &'a EmbeddingMatrix,
    pub prediction: PredictionConfig,
}

impl<'a> RefineProblem<'a> {
    pub fn new(
        source_centers: &'a EmbeddingMatrix,
        target_centers: &'a EmbeddingMatrix,
        prediction: PredictionConfig,
    ) -> Result<Self> {
        prediction.validate()?;
        for (what, m) in [("source", source_centers), ("target", target_centers)] {
            if m.is_empty() {
                return Err(Error::Domain(format!("no {what} centers")));
            }
            if !m.is_normalized() {
                return Err(Error::Domain(format!("{what} centers are not normalized")));
            }
        }
        if source_centers.dims() != target_centers.dims() {
            return Err(Error::Shape(format!(
                "source centers have {} dims, target centers {}",
                source_centers.dims(),
                target_centers.dims()
            )));
        }
        Ok(RefineProblem {
            source_centers,
            target_centers,
            prediction,
        })
    }

    pub fn dims(&self) -> usize {
        self.source_centers.dims()
    }

    fn predictions(
        &self,
        w: &[f64],
        z: &EmbeddingMatrix,
        centers: &EmbeddingMatrix,
    ) -> Result<Vec<(Vec<f64>, f64, ProbVector)>> {
        let d = self.dims();
        if w.len() != d * d {
            return Err(Error::Shape(format!("{} weights for dims {d}", w.len())));
        }
        (0..z.rows())
            .into_par_iter()
            .map(|i| {
                let (y, norm) = forward64(w, d, z.row(i))?;
                let p = softmax_scaled(&sims64(&y, centers), self.prediction.tau)?;
                Ok((y, norm, p))
            })
            .collect()
    }

    fn check_target(&self, target: &EmbeddingMatrix) -> Result<()> {
        if target.is_empty() {
            return Err(Error::Config("empty target batch".into()));
        }
        Ok(())
    }

    /// Cross-entropy of the adapted source batch against the source centers
    /// plus the IM loss of the adapted target batch against the searched
    /// centers.
    pub fn loss_all(
        &self,
        w: &[f64],
        source: &EmbeddingMatrix,
        labels: &[usize],
        target: &EmbeddingMatrix,
    ) -> Result<f64> {
        self.check_target(target)?;
        let src: Vec<ProbVector> = self
            .predictions(w, source, self.source_centers)?
            .into_iter()
            .map(|(_, _, p)| p)
            .collect();
        let tgt: Vec<ProbVector> = self
            .predictions(w, target, self.target_centers)?
            .into_iter()
            .map(|(_, _, p)| p)
            .collect();
        Ok(cross_entropy(&src, labels)? + im_loss(&tgt, &self.prediction)?)
    }

    /// Loss and gradient of the cross-entropy term.
    pub fn ce_grad(
        &self,
        w: &[f64],
        source: &EmbeddingMatrix,
        labels: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        let preds = self.predictions(w, source, self.source_centers)?;
        let probs: Vec<ProbVector> = preds.iter().map(|(_, _, p)| p.clone()).collect();
        let loss = cross_entropy(&probs, labels)?;
        let n = preds.len() as f64;
        let dlogits: Vec<Vec<f64>> = preds
            .iter()
            .zip(labels)
            .map(|((_, _, p), &y)| {
                let p = p.as_slice();
                if p[y] < PROB_FLOOR {
                    // the floor is active: locally constant
                    return vec![0.0; p.len()];
                }
                p.iter()
                    .enumerate()
                    .map(|(j, &pj)| (pj - if j == y { 1.0 } else { 0.0 }) / n)
                    .collect()
            })
            .collect();
        let grad = self.backward(&preds, &dlogits, source, self.source_centers);
        Ok((loss, grad))
    }

    /// Loss and gradient of the IM term over one target batch.
    pub fn im_grad(&self, w: &[f64], target: &EmbeddingMatrix) -> Result<(f64, Vec<f64>)> {
        self.check_target(target)?;
        let preds = self.predictions(w, target, self.target_centers)?;
        let probs: Vec<ProbVector> = preds.iter().map(|(_, _, p)| p.clone()).collect();
        let loss = im_loss(&probs, &self.prediction)?;
        let n = preds.len() as f64;
        let k = self.target_centers.rows();
        let mut mean = vec![0f64; k];
        for p in &probs {
            for (m, &v) in mean.iter_mut().zip(p.as_slice()) {
                *m += v / n;
            }
        }
        let log_mean: Vec<f64> = mean
            .iter()
            .map(|&m| if m > 0.0 { m.ln() } else { 0.0 })
            .collect();
        let lambda = self.prediction.lambda_div;
        let dlogits: Vec<Vec<f64>> = probs
            .iter()
            .map(|p| {
                let p = p.as_slice();
                let logp: Vec<f64> = p
                    .iter()
                    .map(|&v| if v > 0.0 { v.ln() } else { 0.0 })
                    .collect();
                let h: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
                let cross: f64 = p.iter().zip(&log_mean).map(|(a, b)| a * b).sum();
                p.iter()
                    .enumerate()
                    .map(|(j, &pj)| {
                        let ent = -pj * (logp[j] + h);
                        let div = lambda * pj * (log_mean[j] - cross);
                        (ent + div) / n
                    })
                    .collect()
            })
            .collect();
        let grad = self.backward(&preds, &dlogits, target, self.target_centers);
        Ok((loss, grad))
    }

    /// Loss and gradient of [`RefineProblem::loss_all`] with respect to `W`.
    pub fn grad_loss_all(
        &self,
        w: &[f64],
        source: &EmbeddingMatrix,
        labels: &[usize],
        target: &EmbeddingMatrix,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_target(target)?;
        let (l_ce, mut g) = self.ce_grad(w, source, labels)?;
        let (l_im, g_im) = self.im_grad(w, target)?;
        for (a, b) in g.iter_mut().zip(&g_im) {
            *a += b;
        }
        Ok((l_ce + l_im, g))
    }

    /// Chains per-sample logit gradients back to `W`. Row `a` of the result
    /// is summed over samples in order, so it does not depend on threading.
    fn backward(
        &self,
        preds: &[(Vec<f64>, f64, ProbVector)],
        dlogits: &[Vec<f64>],
        z: &EmbeddingMatrix,
        centers: &EmbeddingMatrix,
    ) -> Vec<f64> {
        let d = self.dims();
        let inv_tau = 1.0 / self.prediction.tau;
        let du: Vec<Vec<f64>> = preds
            .par_iter()
            .zip(dlogits)
            .map(|((y, norm, _), dl)| {
                let mut dy = vec![0f64; d];
                for (c, &g) in centers.iter_rows().zip(dl) {
                    if g == 0.0 {
                        continue;
                    }
                    let g = g * inv_tau;
                    for (a, &cv) in dy.iter_mut().zip(c) {
                        *a += g * f64::from(cv);
                    }
                }
                let proj: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                dy.iter()
                    .zip(y)
                    .map(|(a, b)| (a - b * proj) / norm)
                    .collect()
            })
            .collect();
        let mut grad = vec![0f64; d * d];
        grad.par_chunks_mut(d).enumerate().for_each(|(a, row)| {
            for (x, dux) in du.iter().enumerate() {
                let g = dux[a];
                if g == 0.0 {
                    continue;
                }
                for (r, &zb) in row.iter_mut().zip(z.row(x)) {
                    *r += g * f64::from(zb);
                }
            }
        });
        grad
    }

    /// Mini-batch gradient descent from `adapter`. Each step pairs one
    /// shuffled target batch with the next source batch (source order is
    /// reshuffled when exhausted). Returns the adapter and the mean loss of
    /// each epoch.
    pub fn train(
        &self,
        adapter: &Adapter,
        source: &EmbeddingMatrix,
        labels: &[usize],
        targets: &EmbeddingMatrix,
        cfg: &TrainConfig,
    ) -> Result<TrainOutcome> {
        cfg.validate()?;
        if adapter.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "adapter has {} dims, centers {}",
                adapter.dims(),
                self.dims()
            )));
        }
        if source.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} source rows for {} labels",
                source.rows(),
                labels.len()
            )));
        }
        if source.is_empty() {
            return Err(Error::Domain("no source samples".into()));
        }
        self.check_target(targets)?;
        let mut w = adapter.weights_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let steps_per_epoch = targets.rows().div_ceil(cfg.batch_size);
        let total = (cfg.epochs * steps_per_epoch).max(1) as f64;
        let mut source_order: Vec<usize> = (0..source.rows()).collect();
        source_order.shuffle(&mut rng);
        let mut source_pos = 0;
        let mut epoch_loss = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..targets.rows()).collect();
            order.shuffle(&mut rng);
            let mut sum = 0f64;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let tb = targets.select_rows(chunk);
                let mut sidx = Vec::with_capacity(cfg.batch_size);
                while sidx.len() < cfg.batch_size.min(source.rows()) {
                    if source_pos == source_order.len() {
                        source_order.shuffle(&mut rng);
                        source_pos = 0;
                    }
                    sidx.push(source_order[source_pos]);
                    source_pos += 1;
                }
                let sb = source.select_rows(&sidx);
                let sl: Vec<usize> = sidx.iter().map(|&i| labels[i]).collect();
                let (loss, grad) = self.grad_loss_all(&w, &sb, &sl, &tb)?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        epoch,
                        step: b,
                        detail: format!("loss {loss}"),
                    });
                }
                let eta = cfg.learning_rate(step as f64 / total);
                for (wv, g) in w.iter_mut().zip(&grad) {
                    *wv -= eta * g;
                }
                sum += loss;
                step += 1;
            }
            let mean = sum / steps_per_epoch as f64;
            log::debug!("epoch {epoch}: mean loss {mean:.6}");
            epoch_loss.push(mean);
        }
        Ok(TrainOutcome {
            adapter: Adapter::from_f64(self.dims(), &w)?,
            epoch_loss,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: Adapter,
    pub epoch_loss: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::l2_normalize;
    use crate::math::predict;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dims: usize) -> EmbeddingMatrix {
        let data = (0..rows * dims)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f32>>();
        EmbeddingMatrix::new(rows, dims, data).unwrap()
    }

    fn instance(
        seed: u64,
    ) -> (
        EmbeddingMatrix,
        EmbeddingMatrix,
        EmbeddingMatrix,
        Vec<usize>,
        EmbeddingMatrix,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ws = l2_normalize(&random_matrix(&mut rng, 3, 8)).unwrap();
        let st = l2_normalize(&random_matrix(&mut rng, 2, 8)).unwrap();
        let src = random_matrix(&mut rng, 16, 8);
        let labels = (0..16).map(|_| rng.random_range(0..3)).collect();
        let tgt = random_matrix(&mut rng, 16, 8);
        (ws, st, src, labels, tgt)
    }

    fn perturbed_identity(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
        let mut w = Adapter::identity(d).weights_f64();
        for v in &mut w {
            *v += scale * rng.random_range(-1.0..1.0);
        }
        w
    }

    #[test]
    fn forward_identity_and_scale() {
        let z = [3.0f32, 0.0, 4.0];
        let id = Adapter::identity(3);
        let y = id.forward(&z).unwrap();
        assert_eq!(y, vec![0.6, 0.0, 0.8]);
        let twice = Adapter::from_f64(
            3,
            &id.weights_f64().iter().map(|v| 2.0 * v).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(twice.forward(&z).unwrap(), y);
    }

    #[test]
    fn forward_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Adapter::from_matrix(&random_matrix(&mut rng, 16, 16)).unwrap();
        for _ in 0..20 {
            let z = random_matrix(&mut rng, 1, 16);
            let y = a.forward(z.row(0)).unwrap();
            let n: f64 = y
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_rejects_zero_output() {
        let a = Adapter::from_f64(2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(a.forward(&[0.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identity_loss_matches_raw_losses() {
        let (ws, st, src, labels, tgt) = instance(1);
        let p = RefineProblem::new(&ws, &st, PredictionConfig::default()).unwrap();
        let w = Adapter::identity(8).weights_f64();
        let got = p.loss_all(&w, &src, &labels, &tgt).unwrap();
        let cfg = PredictionConfig::default();
        let sn = l2_normalize(&src).unwrap();
        let tn = l2_normalize(&tgt).unwrap();
        let sp: Vec<_> = sn
            .iter_rows()
            .map(|z| predict(z, &ws, &cfg).unwrap())
            .collect();
        let tp: Vec<_> = tn
            .iter_rows()
            .map(|z| predict(z, &st, &cfg).unwrap())
            .collect();
        let want = cross_entropy(&sp, &labels).unwrap() + im_loss(&tp, &cfg).unwrap();
        assert!(
            (got - want).abs() < 1e-4 * want.abs().max(1.0),
            "{got} vs {want}"
        );
    }

    #[test]
    fn empty_target_batch_is_config_error() {
        let (ws, st, src, labels, _) = instance(2);
        let p = RefineProblem::new(&ws, &st, PredictionConfig::default()).unwrap();
        let w = Adapter::identity(8).weights_f64();
        let empty = EmbeddingMatrix::zeros(0, 8);
        assert!(matches!(
            p.loss_all(&w, &src, &labels, &empty),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            p.grad_loss_all(&w, &src, &labels, &empty),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_is_scale_invariant() {
        let (ws, st, src, labels, tgt) = instance(3);
        let p = RefineProblem::new(&ws, &st, PredictionConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = perturbed_identity(&mut rng, 8, 0.3);
        let w3: Vec<f64> = w.iter().map(|v| 3.0 * v).collect();
        let a = p.loss_all(&w, &src, &labels, &tgt).unwrap();
        let b = p.loss_all(&w3, &src, &labels, &tgt).unwrap();
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn gradient_orthogonal_to_scaling() {
        let (ws, st, src, labels, tgt) = instance(5);
        let p = RefineProblem::new(&ws, &st, PredictionConfig::default()).unwrap();
        let w = Adapter::identity(8).weights_f64();
        let (_, g) = p.grad_loss_all(&w, &src, &labels, &tgt).unwrap();
        let dir: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!(dir.abs() < 1e-6, "{dir}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ws, st, src, labels, tgt) = instance(6);
        let pred = PredictionConfig {
            tau: 0.1,
            lambda_div: 0.6,
        };
        let p = RefineProblem::new(&ws, &st, pred).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = perturbed_identity(&mut rng, 8, 0.2);
        let (_, g) = p.grad_loss_all(&w, &src, &labels, &tgt).unwrap();
        let h = 1e-5;
        let scale = g.iter().fold(0f64, |m, v| m.max(v.abs()));
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (p.loss_all(&wp, &src, &labels, &tgt).unwrap()
                - p.loss_all(&wm, &src, &labels, &tgt).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-5 * scale,
                "entry {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn ce_gradient_is_linear_in_batches() {
        let (ws, st, src, labels, _) = instance(7);
        let p = RefineProblem::new(&ws, &st, PredictionConfig::default()).unwrap();
        let w = Adapter::identity(8).weights_f64();
        let first: Vec<usize> = (0..10).collect();
        let second: Vec<usize> = (10..16).collect();
        let (_, g) = p.ce_grad(&w, &src, &labels).unwrap();
        let (_, g1) = p
            .ce_grad(&w, &src.select_rows(&first), &labels[..10])
            .unwrap();
        let (_, g2) = p
            .ce_grad(&w, &src.select_rows(&second), &labels[10..])
            .unwrap();
        for i in 0..g.len() {
            let combined = (10.0 * g1[i] + 6.0 * g2[i]) / 16.0;
            assert!((g[i] - combined).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_decays() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0.0), 1e-4);
        assert!((cfg.learning_rate(1.0) - 1e-4 * 11f64.powf(-0.75)).abs() < 1e-18);
        assert!(matches!(
            TrainConfig {
                batch_size: 1,
                ..cfg
            }
            .validate(),
            Err(Error::Config(_))
        ));
    }

    /// Noisy copies of the centers, so the adapter has something to fit.
    fn clustered(
        rng: &mut ChaCha8Rng,
        centers: &EmbeddingMatrix,
        per: usize,
        noise: f32,
    ) -> (EmbeddingMatrix, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (k, c) in centers.iter_rows().enumerate() {
            for _ in 0..per {
                let row: Vec<f32> = c
                    .iter()
                    .map(|&v| {
                        let e: f32 = StandardNormal.sample(&mut *rng);
                        v + noise * e
                    })
                    .collect();
                rows.push(row);
                labels.push(k);
            }
        }
        (EmbeddingMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let centers = l2_normalize(&random_matrix(&mut rng, 5, 16)).unwrap();
        let ws = centers.select_rows(&[0, 1, 2]);
        let st = centers.select_rows(&[0, 1, 3, 4]);
        let (src, labels) = clustered(&mut rng, &ws, 20, 0.15);
        let (tgt, _) = clustered(&mut rng, &st, 20, 0.15);
        let p = RefineProblem::new(&ws, &st, PredictionConfig::default()).unwrap();
        let cfg = TrainConfig {
            eta0: 1e-3,
            epochs: 20,
            batch_size: 16,
            seed: 3,
        };
        let a = p
            .train(&Adapter::identity(16), &src, &labels, &tgt, &cfg)
            .unwrap();
        assert_eq!(a.epoch_loss.len(), 20);
        assert!(a.epoch_loss[19] < a.epoch_loss[0], "{:?}", a.epoch_loss);
        let b = p
            .train(&Adapter::identity(16), &src, &labels, &tgt, &cfg)
            .unwrap();
        assert_eq!(a.adapter, b.adapter);

        let none = p
            .train(
                &Adapter::identity(16),
                &src,
                &labels,
                &tgt,
                &TrainConfig { epochs: 0, ..cfg },
            )
            .unwrap();
        assert_eq!(none.adapter, Adapter::identity(16));
        assert!(none.epoch_loss.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.embx");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Adapter::from_matrix(&random_matrix(&mut rng, 6, 6)).unwrap();
        a.save(&path).unwrap();
        assert_eq!(Adapter::load(&path).unwrap(), a);
    }
}
