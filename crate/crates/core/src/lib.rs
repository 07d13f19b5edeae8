//! Universal domain adaptation over precomputed image/text embeddings.
//!
//! Stages: greedy text-center search, linear-adapter refinement, unknown
//! scoring, threshold fitting and evaluation. Every stage reads and writes
//! plain files so it can run on its own.

pub mod embedding_store;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod math;
pub mod pipeline;
pub mod refine;
pub mod search;
pub mod synth;
pub mod unims;

pub use embedding_store::{
    build_similarity_cache, l2_normalize, load_embeddings, save_embeddings, EmbeddingMatrix,
    Manifest, Role, SimilarityCache, TextBank,
};
pub use error::{Error, Result};
pub use math::{PredictionConfig, ProbVector};
pub use pipeline::{run_pipeline, RunConfig};
pub use search::{SearchConfig, SearchProblem, SearchState};
