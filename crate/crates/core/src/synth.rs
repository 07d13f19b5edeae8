//! Synthetic instances with known ground truth.
//!
//! Vocabulary entries are random unit vectors sharing a common offset
//! direction (text embeddings of real encoders are not centered, which
//! keeps unrelated names at a moderate positive similarity). Each class is
//! a distinct vocabulary entry; images are noisy copies of their class
//! entry, and target images additionally go through a rotation in a random
//! 2-plane plus isotropic noise.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    dot64, l2_normalize, save_embeddings, EmbeddingMatrix, Manifest, Role,
};
use crate::error::{Error, Result};
use crate::eval::ScenarioSplit;

pub const SOURCE_IMAGES: &str = "source_images.embx";
pub const TARGET_IMAGES: &str = "target_images.embx";
pub const SOURCE_CLASSNAMES: &str = "source_classnames.embx";
pub const NOUN_VOCAB: &str = "noun_vocab.embx";

const MAX_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dims: usize,
    pub vocab_size: usize,
    pub n_common: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
    pub samples_per_class: usize,
    /// Norm of the per-sample Gaussian perturbation.
    pub cluster_spread: f64,
    /// Rotation angle (radians) applied to target images.
    pub shift_angle: f64,
    /// Norm of the extra isotropic noise on target images.
    pub shift_noise: f64,
    /// Weight of the direction shared by all vocabulary entries.
    pub modality_offset: f64,
    /// Upper bound on the cosine similarity of two vocabulary entries.
    pub sim_cap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: 256,
            vocab_size: 300,
            n_common: 10,
            n_source_private: 5,
            n_target_private: 15,
            samples_per_class: 20,
            cluster_spread: 0.05,
            shift_angle: 0.2,
            shift_noise: 0.05,
            modality_offset: 0.7,
            sim_cap: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.n_common + self.n_source_private + self.n_target_private
    }

    pub fn split(&self) -> ScenarioSplit {
        ScenarioSplit::new(self.n_common, self.n_source_private, self.n_target_private)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 {
            return Err(Error::Config("dims must be >= 2".into()));
        }
        if self.n_common + self.n_source_private == 0 {
            return Err(Error::Config("need at least one source class".into()));
        }
        if self.n_classes() > self.vocab_size {
            return Err(Error::Config(format!(
                "{} classes do not fit in a vocabulary of {}",
                self.n_classes(),
                self.vocab_size
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be >= 1".into()));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("shift_noise", self.shift_noise),
            ("modality_offset", self.modality_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.shift_angle.is_finite() {
            return Err(Error::Config("shift_angle must be finite".into()));
        }
        if !(self.sim_cap > -1.0 && self.sim_cap <= 1.0) {
            return Err(Error::Config(format!(
                "sim_cap must lie in (-1, 1], got {}",
                self.sim_cap
            )));
        }
        Ok(())
    }
}

/// Generated inputs plus ground truth.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub source_images: EmbeddingMatrix,
    pub source_labels: Vec<u32>,
    pub target_images: EmbeddingMatrix,
    /// Ground truth; ids from `n_source` on are target-private.
    pub target_labels: Vec<u32>,
    pub source_names: EmbeddingMatrix,
    pub source_class_names: Vec<String>,
    pub nouns: EmbeddingMatrix,
    pub noun_names: Vec<String>,
    /// Vocabulary index of each class: common, source-private, then
    /// target-private.
    pub class_vocab: Vec<usize>,
    /// The full vocabulary the classes were drawn from.
    pub vocab: EmbeddingMatrix,
    pub split: ScenarioSplit,
}

impl SynthBundle {
    /// Writes the four EMBX files (with manifests) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_embeddings(
            &dir.join(SOURCE_IMAGES),
            &self.source_images,
            &Manifest::images(
                Role::SourceImages,
                Some(self.source_labels.clone()),
                self.source_images.rows(),
            ),
        )?;
        save_embeddings(
            &dir.join(TARGET_IMAGES),
            &self.target_images,
            &Manifest::images(
                Role::TargetImages,
                Some(self.target_labels.clone()),
                self.target_images.rows(),
            ),
        )?;
        save_embeddings(
            &dir.join(SOURCE_CLASSNAMES),
            &self.source_names,
            &Manifest::texts(Role::SourceClassnames, self.source_class_names.clone()),
        )?;
        save_embeddings(
            &dir.join(NOUN_VOCAB),
            &self.nouns,
            &Manifest::texts(Role::NounVocab, self.noun_names.clone()),
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dims: usize, scale: f64) -> Vec<f64> {
    (0..dims)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut *rng);
            scale * e
        })
        .collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Unit vectors whose pairwise similarity stays under `sim_cap`, each made
/// of a random direction orthogonal to `offset` plus `alpha * offset`.
fn vocabulary(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<EmbeddingMatrix> {
    let d = cfg.dims;
    let mut offset = gaussian(rng, d, 1.0);
    unit(&mut offset);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(cfg.vocab_size);
    for i in 0..cfg.vocab_size {
        let mut accepted = None;
        for _ in 0..MAX_TRIES {
            let mut u = gaussian(rng, d, 1.0);
            let along: f64 = u.iter().zip(&offset).map(|(a, b)| a * b).sum();
            for (x, o) in u.iter_mut().zip(&offset) {
                *x -= along * o;
            }
            unit(&mut u);
            let mut v: Vec<f64> = u
                .iter()
                .zip(&offset)
                .map(|(a, o)| a + cfg.modality_offset * o)
                .collect();
            unit(&mut v);
            let v = to_f32(&v);
            if rows.iter().all(|r| dot64(r, &v) <= cfg.sim_cap) {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => rows.push(v),
            None => {
                return Err(Error::Config(format!(
                    "could not place vocabulary entry {i} under similarity cap {} after {MAX_TRIES} tries",
                    cfg.sim_cap
                )))
            }
        }
    }
    l2_normalize(&EmbeddingMatrix::from_rows(&rows)?)
}

/// Rotation by `angle` in the plane spanned by orthonormal `a`, `b`.
fn rotate(x: &mut [f64], a: &[f64], b: &[f64], angle: f64) {
    let xa: f64 = x.iter().zip(a).map(|(p, q)| p * q).sum();
    let xb: f64 = x.iter().zip(b).map(|(p, q)| p * q).sum();
    let (s, c) = angle.sin_cos();
    let na = c * xa - s * xb;
    let nb = s * xa + c * xb;
    for ((v, &ai), &bi) in x.iter_mut().zip(a).zip(b) {
        *v += (na - xa) * ai + (nb - xb) * bi;
    }
}

fn samples(
    anchor: &[f32],
    n: usize,
    spread: f64,
    shift: Option<(&[f64], &[f64], f64, f64)>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f32>> {
    let d = anchor.len();
    let still =
        spread == 0.0 && shift.is_none_or(|(_, _, angle, noise)| angle == 0.0 && noise == 0.0);
    (0..n)
        .map(|_| {
            if still {
                return anchor.to_vec();
            }
            let mut x: Vec<f64> = anchor.iter().map(|&v| f64::from(v)).collect();
            if spread > 0.0 {
                for (v, e) in x
                    .iter_mut()
                    .zip(gaussian(rng, d, spread / (d as f64).sqrt()))
                {
                    *v += e;
                }
            }
            if let Some((a, b, angle, noise)) = shift {
                rotate(&mut x, a, b, angle);
                if noise > 0.0 {
                    for (v, e) in x
                        .iter_mut()
                        .zip(gaussian(rng, d, noise / (d as f64).sqrt()))
                    {
                        *v += e;
                    }
                }
            }
            unit(&mut x);
            to_f32(&x)
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = vocabulary(cfg, &mut rng)?;
    let class_vocab: Vec<usize> =
        index::sample(&mut rng, cfg.vocab_size, cfg.n_classes()).into_vec();
    let split = cfg.split();
    let n_source = split.n_source();
    let vocab_names: Vec<String> = (0..cfg.vocab_size)
        .map(|i| format!("noun_{i:04}"))
        .collect();

    // random orthonormal pair for the rotation plane
    let mut a = gaussian(&mut rng, cfg.dims, 1.0);
    unit(&mut a);
    let mut b = gaussian(&mut rng, cfg.dims, 1.0);
    let ab: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
    for (x, y) in b.iter_mut().zip(&a) {
        *x -= ab * y;
    }
    unit(&mut b);

    let mut src_rows = Vec::new();
    let mut src_labels = Vec::new();
    for (c, &v) in class_vocab[..n_source].iter().enumerate() {
        src_rows.extend(samples(
            vocab.row(v),
            cfg.samples_per_class,
            cfg.cluster_spread,
            None,
            &mut rng,
        ));
        src_labels.extend(std::iter::repeat_n(c as u32, cfg.samples_per_class));
    }
    let target_classes = (0..cfg.n_common).chain(n_source..cfg.n_classes());
    let mut tgt_rows = Vec::new();
    let mut tgt_labels = Vec::new();
    for c in target_classes {
        let shift = Some((a.as_slice(), b.as_slice(), cfg.shift_angle, cfg.shift_noise));
        tgt_rows.extend(samples(
            vocab.row(class_vocab[c]),
            cfg.samples_per_class,
            cfg.cluster_spread,
            shift,
            &mut rng,
        ));
        tgt_labels.extend(std::iter::repeat_n(c as u32, cfg.samples_per_class));
    }

    // source class names come out of the noun vocabulary
    let is_source_name: Vec<bool> = {
        let mut m = vec![false; cfg.vocab_size];
        for &v in &class_vocab[..n_source] {
            m[v] = true;
        }
        m
    };
    let noun_idx: Vec<usize> = (0..cfg.vocab_size)
        .filter(|&i| !is_source_name[i])
        .collect();

    let dims = cfg.dims;
    let matrix = |rows: Vec<Vec<f32>>| -> Result<EmbeddingMatrix> {
        if rows.is_empty() {
            return Ok(EmbeddingMatrix::zeros(0, dims));
        }
        EmbeddingMatrix::from_rows(&rows)
    };
    Ok(SynthBundle {
        source_images: matrix(src_rows)?,
        source_labels: src_labels,
        target_images: matrix(tgt_rows)?,
        target_labels: tgt_labels,
        source_names: vocab.select_rows(&class_vocab[..n_source]),
        source_class_names: class_vocab[..n_source]
            .iter()
            .map(|&v| vocab_names[v].clone())
            .collect(),
        nouns: vocab.select_rows(&noun_idx),
        noun_names: noun_idx.iter().map(|&v| vocab_names[v].clone()).collect(),
        class_vocab,
        vocab,
        split,
    })
}
