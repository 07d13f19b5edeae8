//! End-to-end runs and the file layout shared by the CLI stages.
//!
//! Every stage reads its prerequisites from the output directory and writes
//! its own report there, so stages can be run one at a time or all at once
//! with identical results.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    build_similarity_cache, l2_normalize, load_embeddings, EmbeddingMatrix, Manifest, Role,
    TextBank,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalInputs, EvalReport, ScenarioSplit};
use crate::gmm::{fit_threshold, predict_known, FitReport};
use crate::math::{argmax, PredictionConfig};
use crate::refine::{Adapter, RefineProblem, TrainConfig};
use crate::search::{SearchConfig, SearchProblem, SearchReport};
use crate::synth::{self, SynthBundle, SynthConfig};
use crate::unims::{
    entropy_vectors, read_scores_csv, score, write_scores_csv, ScoreSet, ScoreVariant,
};

pub const SEARCH_REPORT: &str = "search_report.json";
pub const ADAPTER: &str = "adapter.embx";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const SCORES: &str = "scores.csv";
pub const FIT_REPORT: &str = "fit_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const PLOT_DATA: &str = "plot_data.csv";
pub const DATA_DIR: &str = "data";

const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub source_images: PathBuf,
    pub target_images: PathBuf,
    pub source_classnames: PathBuf,
    pub noun_vocab: PathBuf,
}

impl InputPaths {
    /// The layout written by [`SynthBundle::write`].
    pub fn in_dir(dir: &Path) -> Self {
        InputPaths {
            source_images: dir.join(synth::SOURCE_IMAGES),
            target_images: dir.join(synth::TARGET_IMAGES),
            source_classnames: dir.join(synth::SOURCE_CLASSNAMES),
            noun_vocab: dir.join(synth::NOUN_VOCAB),
        }
    }

    fn all(&self) -> [&Path; 4] {
        [
            &self.source_images,
            &self.target_images,
            &self.source_classnames,
            &self.noun_vocab,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; the search, training, generator and k-means seeds are
    /// derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub variant: ScoreVariant,
    /// Train the adapter; without it scoring uses the raw embeddings.
    pub refine: bool,
    /// Score raw embeddings even when an adapter was trained.
    pub score_raw: bool,
    /// Real inputs. When absent, data is generated from `synth`.
    pub inputs: Option<InputPaths>,
    pub prediction: PredictionConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("tasc-out"),
            variant: ScoreVariant::UniMs,
            refine: true,
            score_raw: false,
            inputs: None,
            prediction: PredictionConfig::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
        .with_seed(0)
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copies the global seed into every sub-config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.search.seed = derive_seed(seed, 1);
        self.train.seed = derive_seed(seed, 2);
        self.synth.seed = derive_seed(seed, 3);
        self
    }

    pub fn kmeans_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join(DATA_DIR)
    }

    pub fn input_paths(&self) -> InputPaths {
        self.inputs
            .clone()
            .unwrap_or_else(|| InputPaths::in_dir(&self.data_dir()))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn validate(&self) -> Result<()> {
        self.prediction.validate()?;
        self.train.validate()?;
        match &self.inputs {
            Some(paths) => {
                for p in paths.all() {
                    if !p.exists() {
                        return Err(Error::io(
                            p,
                            std::io::Error::new(
                                std::io::ErrorKind::NotFound,
                                "input file not found",
                            ),
                        ));
                    }
                }
            }
            None => self.synth.validate()?,
        }
        Ok(())
    }
}

/// Loaded inputs: raw image embeddings, normalized text embeddings.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub source_images: EmbeddingMatrix,
    pub source_labels: Vec<usize>,
    pub target_images: EmbeddingMatrix,
    pub target_labels: Option<Vec<usize>>,
    pub source_names: EmbeddingMatrix,
    pub source_class_names: Vec<String>,
    pub nouns: EmbeddingMatrix,
    pub noun_names: Vec<String>,
}

fn expect_role(path: &Path, manifest: &Manifest, role: Role) -> Result<()> {
    if manifest.role != role {
        return Err(Error::Consistency(format!(
            "{} has role {:?}, expected {role:?}",
            path.display(),
            manifest.role
        )));
    }
    Ok(())
}

fn labels(v: Option<Vec<u32>>) -> Option<Vec<usize>> {
    v.map(|l| l.into_iter().map(|x| x as usize).collect())
}

impl Inputs {
    pub fn load(paths: &InputPaths) -> Result<Self> {
        let (src, src_m) = load_embeddings(&paths.source_images)?;
        expect_role(&paths.source_images, &src_m, Role::SourceImages)?;
        let (tgt, tgt_m) = load_embeddings(&paths.target_images)?;
        expect_role(&paths.target_images, &tgt_m, Role::TargetImages)?;
        let (names, names_m) = load_embeddings(&paths.source_classnames)?;
        expect_role(&paths.source_classnames, &names_m, Role::SourceClassnames)?;
        let (nouns, nouns_m) = load_embeddings(&paths.noun_vocab)?;
        expect_role(&paths.noun_vocab, &nouns_m, Role::NounVocab)?;
        let inputs = Inputs {
            source_labels: labels(src_m.labels).unwrap_or_default(),
            source_images: src,
            target_labels: labels(tgt_m.labels),
            target_images: tgt,
            source_names: l2_normalize(&names)?,
            source_class_names: names_m.names,
            nouns: l2_normalize(&nouns)?,
            noun_names: nouns_m.names,
        };
        inputs.check()?;
        Ok(inputs)
    }

    pub fn from_bundle(b: &SynthBundle) -> Self {
        Inputs {
            source_images: b.source_images.clone(),
            source_labels: b.source_labels.iter().map(|&l| l as usize).collect(),
            target_images: b.target_images.clone(),
            target_labels: Some(b.target_labels.iter().map(|&l| l as usize).collect()),
            source_names: b.source_names.clone(),
            source_class_names: b.source_class_names.clone(),
            nouns: b.nouns.clone(),
            noun_names: b.noun_names.clone(),
        }
    }

    /// Cross-file checks: one dimensionality, source labels in range.
    pub fn check(&self) -> Result<()> {
        let d = self.source_names.dims();
        for (what, m) in [
            ("source images", &self.source_images),
            ("target images", &self.target_images),
            ("nouns", &self.nouns),
        ] {
            if m.dims() != d {
                return Err(Error::Shape(format!(
                    "{what} have {} dims, source class names {d}",
                    m.dims()
                )));
            }
        }
        let n_source = self.source_names.rows();
        if let Some(&l) = self.source_labels.iter().find(|&&l| l >= n_source) {
            return Err(Error::Consistency(format!(
                "source label {l} outside [0, {n_source})"
            )));
        }
        Ok(())
    }

    pub fn targets_normalized(&self) -> Result<EmbeddingMatrix> {
        l2_normalize(&self.target_images)
    }

    pub fn split(&self) -> Result<ScenarioSplit> {
        let gt = self.target_labels.as_ref().ok_or_else(|| {
            Error::Config("target manifest carries no labels; cannot evaluate".into())
        })?;
        ScenarioSplit::infer(self.source_names.rows(), gt)
    }
}

/// Generates synthetic inputs and writes them under the data directory.
pub fn stage_synth(cfg: &RunConfig) -> Result<SynthBundle> {
    let bundle = synth::generate(&cfg.synth)?;
    bundle.write(&cfg.data_dir())?;
    Ok(bundle)
}

pub fn stage_search(cfg: &RunConfig, inputs: &Inputs) -> Result<SearchReport> {
    let bank = TextBank::new(&inputs.source_names, &inputs.nouns)?;
    let targets = inputs.targets_normalized()?;
    let cache = build_similarity_cache(&targets, &bank.matrix)?;
    let mut search = cfg.search;
    if search.n_candidates > bank.n_nouns() {
        log::warn!(
            "n_candidates {} exceeds the {} nouns; using all nouns",
            search.n_candidates,
            bank.n_nouns()
        );
        search.n_candidates = bank.n_nouns();
    }
    let columns = bank.matrix.rows();
    if search.k0 > columns {
        log::warn!(
            "k0 {} exceeds the {columns} text embeddings; using {columns}",
            search.k0
        );
        search.k0 = columns;
    }
    let problem = SearchProblem::new(&cache, &bank, &targets, cfg.prediction, search)?;
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let outcome = problem.run(&mut rng)?;
    log::info!(
        "search: K = {} ({} common, {} private)",
        outcome.counts.k,
        outcome.counts.k_com,
        outcome.counts.k_pri
    );
    Ok(SearchReport::new(
        &outcome,
        &inputs.source_class_names,
        &inputs.noun_names,
    ))
}

/// Embeddings of the retained slots.
pub fn active_centers(inputs: &Inputs, report: &SearchReport) -> Result<EmbeddingMatrix> {
    let bank = TextBank::new(&inputs.source_names, &inputs.nouns)?;
    let state = report.state();
    state.check(bank.matrix.rows())?;
    let active = state.active_columns();
    if active.is_empty() {
        return Err(Error::DegenerateState(
            "search report has no active centers".into(),
        ));
    }
    Ok(bank.matrix.select_rows(&active))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

pub fn stage_refine(
    cfg: &RunConfig,
    inputs: &Inputs,
    report: &SearchReport,
) -> Result<(Adapter, TrainReport)> {
    let centers = active_centers(inputs, report)?;
    let problem = RefineProblem::new(&inputs.source_names, &centers, cfg.prediction)?;
    let start = Adapter::identity(inputs.source_names.dims());
    let out = problem.train(
        &start,
        &inputs.source_images,
        &inputs.source_labels,
        &inputs.target_images,
        &cfg.train,
    )?;
    Ok((
        out.adapter,
        TrainReport {
            epoch_loss: out.epoch_loss,
        },
    ))
}

/// Target embeddings as the scorer sees them.
pub fn adapted_targets(
    cfg: &RunConfig,
    inputs: &Inputs,
    adapter: Option<&Adapter>,
) -> Result<EmbeddingMatrix> {
    match adapter {
        Some(a) if !cfg.score_raw => a.forward_all(&inputs.target_images),
        _ => inputs.targets_normalized(),
    }
}

pub fn stage_score(
    cfg: &RunConfig,
    inputs: &Inputs,
    report: &SearchReport,
    adapter: Option<&Adapter>,
) -> Result<ScoreSet> {
    let centers = active_centers(inputs, report)?;
    let ev = entropy_vectors(&inputs.source_names, &centers, cfg.prediction.tau)?;
    let z = adapted_targets(cfg, inputs, adapter)?;
    score(&z, &inputs.source_names, &centers, &ev, cfg.variant)
}

pub fn stage_threshold(scores: &ScoreSet, report: &SearchReport) -> Result<FitReport> {
    fit_threshold(&scores.scores, &report.counts)
}

/// Source-class prediction for every row of `z`.
pub fn classify(z: &EmbeddingMatrix, source_names: &EmbeddingMatrix) -> Vec<usize> {
    z.iter_rows()
        .map(|row| {
            let sims: Vec<f64> = source_names
                .iter_rows()
                .map(|c| crate::embedding_store::dot64(row, c))
                .collect();
            argmax(&sims)
        })
        .collect()
}

pub fn stage_eval(
    cfg: &RunConfig,
    inputs: &Inputs,
    adapter: Option<&Adapter>,
    scores: &ScoreSet,
    fit: &FitReport,
) -> Result<EvalReport> {
    let split = inputs.split()?;
    let gt = inputs.target_labels.as_deref().expect("checked by split");
    let z = adapted_targets(cfg, inputs, adapter)?;
    if scores.scores.len() != z.rows() {
        return Err(Error::Shape(format!(
            "{} scores for {} target samples",
            scores.scores.len(),
            z.rows()
        )));
    }
    let preds = classify(&z, &inputs.source_names);
    let known = predict_known(&scores.scores, &fit.threshold);
    evaluate(&EvalInputs {
        preds: &preds,
        gt,
        known: &known,
        scores: Some(&scores.scores),
        embeddings: Some(&z),
        split,
        seed: cfg.kmeans_seed(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// `series,x,y` rows: search loss and K per outer iteration, training loss
/// per epoch, and a histogram of the scores.
pub fn plot_data(search: &SearchReport, train: Option<&TrainReport>, scores: &ScoreSet) -> String {
    let mut out = String::from("series,x,y\n");
    for (i, l) in search.outer_loss.iter().enumerate() {
        out += &format!("search_loss,{i},{l}\n");
    }
    for (i, k) in search.outer_k.iter().enumerate() {
        out += &format!("search_k,{i},{k}\n");
    }
    if let Some(t) = train {
        for (i, l) in t.epoch_loss.iter().enumerate() {
            out += &format!("train_loss,{i},{l}\n");
        }
    }
    let s = &scores.scores;
    if let (Some(lo), Some(hi)) = (
        s.iter().copied().reduce(f64::min),
        s.iter().copied().reduce(f64::max),
    ) {
        let width = if hi > lo {
            (hi - lo) / HISTOGRAM_BINS as f64
        } else {
            1.0
        };
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &v in s {
            let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let center = lo + (b as f64 + 0.5) * width;
            out += &format!("score_hist,{center},{c}\n");
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub search: SearchReport,
    pub train: Option<TrainReport>,
    pub fit: FitReport,
    pub eval: EvalReport,
}

/// Stage-wrapping helper so failures name the stage.
fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

/// Runs every stage, writing all reports into `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    staged("config", cfg.validate())?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    if cfg.inputs.is_none() {
        staged("synth", stage_synth(cfg))?;
    }
    let inputs = staged("load", Inputs::load(&cfg.input_paths()))?;
    let search = staged("search", stage_search(cfg, &inputs))?;
    write_json(&cfg.out(SEARCH_REPORT), &search)?;
    let (adapter, train) = if cfg.refine {
        let (a, t) = staged("refine", stage_refine(cfg, &inputs, &search))?;
        a.save(&cfg.out(ADAPTER))?;
        write_json(&cfg.out(TRAIN_REPORT), &t)?;
        (Some(a), Some(t))
    } else {
        (None, None)
    };
    let scores = staged(
        "score",
        stage_score(cfg, &inputs, &search, adapter.as_ref()),
    )?;
    write_scores_csv(&cfg.out(SCORES), &scores)?;
    let fit = staged("threshold", stage_threshold(&scores, &search))?;
    write_json(&cfg.out(FIT_REPORT), &fit)?;
    let eval = staged(
        "eval",
        stage_eval(cfg, &inputs, adapter.as_ref(), &scores, &fit),
    )?;
    write_eval_outputs(cfg, &eval, &search, train.as_ref(), &scores)?;
    Ok(PipelineOutcome {
        search,
        train,
        fit,
        eval,
    })
}

/// Writes the evaluation report (JSON and CSV) and the plot data.
pub fn write_eval_outputs(
    cfg: &RunConfig,
    eval: &EvalReport,
    search: &SearchReport,
    train: Option<&TrainReport>,
    scores: &ScoreSet,
) -> Result<()> {
    write_json(&cfg.out(EVAL_REPORT), eval)?;
    eval.write_csv(&cfg.out(EVAL_CSV))?;
    std::fs::write(cfg.out(PLOT_DATA), plot_data(search, train, scores))
        .map_err(|e| Error::io(cfg.out(PLOT_DATA), e))
}

/// Loads the adapter written by the refine stage, if refinement is on.
pub fn load_adapter(cfg: &RunConfig) -> Result<Option<Adapter>> {
    if cfg.refine {
        Adapter::load(&cfg.out(ADAPTER)).map(Some)
    } else {
        Ok(None)
    }
}

pub fn load_scores(cfg: &RunConfig) -> Result<ScoreSet> {
    read_scores_csv(&cfg.out(SCORES))
}
