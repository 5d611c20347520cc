//! Retrieval, zero-shot classification, probing, cascade baseline, WER and
//! 2-D projection.

pub mod cascade;
pub mod probe;
pub mod project;
pub mod report;
pub mod retrieval;
pub mod trend;
pub mod wer;
pub mod zeroshot;

pub use cascade::{cascade_embed, CascadeOutput};
pub use probe::{
    probe, score_probe, train_probe, ProbeClassifier, ProbeClassifierConfig, ProbeInputs, ProbingReport, TrainedProbe,
};
pub use project::{project_2d, projection_csv, Projection};
pub use report::{read_provenance, write_with_provenance, EmbeddingCache, Provenance};
pub use retrieval::{
    retrieval_accuracy, retrieval_report, Direction, RetrievalReport, RetrievalResult, UNIT_TOLERANCE,
};
pub use trend::{ranks, spearman, trend_correlation, trend_csv, TrendRow};
pub use wer::{corpus_wer, edit_distance, wer};
pub use zeroshot::{mean_pairwise_cosine, zero_shot_classify, ZeroShotReport, DUPLICATE_TOLERANCE};
