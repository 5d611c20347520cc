//! Synthetic stand-ins for every dataset: paired corpora, zero-shot label
//! sets and probing tasks, all pure functions of their seeds.

pub mod acoustic;
pub mod augment;
pub mod corpus;
pub mod language;
pub mod probing;
pub mod vocab;
pub mod zeroshot;

pub use acoustic::{AcousticConfig, AcousticModel, Channel};
pub use augment::spec_augment_like;
pub use corpus::{gen_corpus, read_corpus, write_corpus, Corpus, CorpusConfig, Split, UtterancePair};
pub use language::{BigramLanguage, LanguageConfig};
pub use probing::{
    gen_probing_task, gen_probing_tasks, ProbingConfig, ProbingDesign, ProbingExample, ProbingSplits, ProbingTask,
};
pub use vocab::{Vocabulary, BOS, EOS, MASK, PAD};
pub use zeroshot::{gen_zeroshot_dataset, LabeledUtterance, ZeroShotConfig, ZeroShotDataset, ZeroShotKind};
