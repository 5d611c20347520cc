//! Zero-shot classification datasets: utterances whose class is named by a
//! label token sequence that the teacher can embed.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::acoustic::AcousticModel;
use crate::datagen::language::BigramLanguage;
use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

/// First speaker id used for zero-shot renderings; disjoint from corpus speakers.
pub const ZEROSHOT_SPEAKER_BASE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroShotKind {
    /// Single tokens from the interchangeable class.
    DigitLike,
    /// Single tokens, each with its own context distribution.
    WordLike,
    /// Whole unseen sentences.
    SentenceLike,
}

impl ZeroShotKind {
    pub const ALL: [ZeroShotKind; 3] = [
        ZeroShotKind::DigitLike,
        ZeroShotKind::WordLike,
        ZeroShotKind::SentenceLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ZeroShotKind::DigitLike => "digit-like",
            ZeroShotKind::WordLike => "word-like",
            ZeroShotKind::SentenceLike => "sentence-like",
        }
    }
}

impl std::str::FromStr for ZeroShotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ZeroShotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown zero-shot kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub sentence_len: (usize, usize),
    pub seed: u64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            n_classes: 10,
            n_per_class: 7,
            sentence_len: (5, 10),
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledUtterance {
    pub tokens: Vec<usize>,
    pub frames: Tensor<f64>,
    pub label: usize,
    pub speaker: u64,
    pub render_seed: u64,
}

#[derive(Clone, Debug)]
pub struct ZeroShotDataset {
    pub kind: ZeroShotKind,
    /// Token sequence naming each class.
    pub labels: Vec<Vec<usize>>,
    pub utterances: Vec<LabeledUtterance>,
}

/// Builds a dataset of `kind`. Sentence labels avoid every sequence in `exclude`.
pub fn gen_zeroshot_dataset(
    kind: ZeroShotKind,
    cfg: &ZeroShotConfig,
    language: &BigramLanguage,
    acoustic: &AcousticModel,
    exclude: &HashSet<Vec<usize>>,
) -> Result<ZeroShotDataset> {
    if cfg.n_classes < 2 {
        return Err(Error::invalid("zero-shot needs at least two classes"));
    }
    if cfg.n_per_class == 0 {
        return Err(Error::invalid("zero-shot needs at least one utterance per class"));
    }
    let mut r = rng::stream(&[cfg.seed, 0x25, kind as u64]);
    let pick_tokens = |pool: &[usize], r: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<Vec<usize>>> {
        if cfg.n_classes > pool.len() {
            return Err(Error::Capacity(format!(
                "{} classes requested, {} available for {}",
                cfg.n_classes,
                pool.len(),
                kind.name()
            )));
        }
        let mut pool = pool.to_vec();
        pool.shuffle(r);
        Ok(pool[..cfg.n_classes].iter().map(|&t| vec![t]).collect())
    };
    let labels = match kind {
        ZeroShotKind::DigitLike => pick_tokens(language.digits(), &mut r)?,
        ZeroShotKind::WordLike => pick_tokens(language.regular(), &mut r)?,
        ZeroShotKind::SentenceLike => {
            let (lo, hi) = cfg.sentence_len;
            if lo == 0 || lo > hi {
                return Err(Error::invalid(format!("empty sentence length range [{lo}, {hi}]")));
            }
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            let mut attempts = 0;
            while out.len() < cfg.n_classes {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Capacity("cannot draw enough unseen sentences".into()));
                }
                let s = language.sample(r.random_range(lo..=hi), &mut r);
                if !exclude.contains(&s) && seen.insert(s.clone()) {
                    out.push(s);
                }
            }
            out
        }
    };
    let mut utterances = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for (label, tokens) in labels.iter().enumerate() {
        for k in 0..cfg.n_per_class {
            let speaker = ZEROSHOT_SPEAKER_BASE + k as u64;
            let render_seed = rng::mix(&[cfg.seed, kind as u64, label as u64, k as u64]);
            utterances.push(LabeledUtterance {
                tokens: tokens.clone(),
                frames: acoustic.render(tokens, speaker, render_seed)?,
                label,
                speaker,
                render_seed,
            });
        }
    }
    Ok(ZeroShotDataset {
        kind,
        labels,
        utterances,
    })
}
