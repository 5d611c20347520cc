//! Teacher masked-token pretraining and student recognition pretraining.

use serde::{Deserialize, Serialize};

use crate::datagen::corpus::{Corpus, UtterancePair};
use crate::datagen::vocab::PAD;
use crate::error::Result;
use crate::evaluation::wer::corpus_wer;
use crate::models::ModelConfig;
use crate::numerics::{rng, LrSchedule, ParamGroup, LABEL_SMOOTHING};
use crate::training::fit::{evaluate, fit, AugmentConfig, FitOptions, History, Item, Objective};
use crate::ModelBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            epochs: 12,
            batch_size: 32,
            schedule: LrSchedule {
                peak_lr: 1e-3,
                warmup_steps: 300,
            },
            mask_prob: 0.15,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherReport {
    /// `1 / V`.
    pub chance: f64,
    /// Accuracy of always predicting the most frequent training token.
    pub majority: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub best_epoch: usize,
    pub history: History,
}

fn text_items(pairs: &[UtterancePair]) -> Vec<Item<'_>> {
    pairs
        .iter()
        .map(|p| Item {
            tokens: &p.tokens,
            frames: None,
            target: None,
        })
        .collect()
}

/// Masked-token pretraining of a fresh teacher on the training sentences.
/// The returned bundle holds the best-validation teacher; its other groups
/// are untouched random initializations.
pub fn pretrain_teacher(
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &TeacherTrainConfig,
) -> Result<(ModelBundle, TeacherReport)> {
    let mut bundle = ModelBundle::new(model.clone(), cfg.seed)?;
    let train = text_items(&corpus.train);
    let valid = text_items(&corpus.valid);
    let objective = Objective::Mlm {
        mask_prob: cfg.mask_prob,
    };
    let before = evaluate(&bundle, &valid, &objective, cfg.seed)?;
    let opts = FitOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        schedule: cfg.schedule,
        seed: cfg.seed,
        augment: None,
        trainable: vec![ParamGroup::Teacher],
        snapshot_steps: vec![],
    };
    let out = fit(&mut bundle, &train, &valid, objective, &opts)?;
    bundle.params = out.best;
    bundle.params.set_group_frozen(ParamGroup::Teacher, true);
    let after = evaluate(&bundle, &valid, &objective, cfg.seed)?;
    let v = model.text.vocab_size;
    Ok((
        bundle,
        TeacherReport {
            chance: 1.0 / v as f64,
            majority: majority_baseline(corpus, &valid, cfg),
            accuracy_before: before.accuracy.unwrap_or(0.0),
            accuracy_after: after.accuracy.unwrap_or(0.0),
            best_epoch: out.best_epoch,
            history: out.history,
        },
    ))
}

fn majority_baseline(corpus: &Corpus, valid: &[Item<'_>], cfg: &TeacherTrainConfig) -> f64 {
    let v = corpus.config.language.vocab_size;
    let mut counts = vec![0usize; v];
    for p in &corpus.train {
        for &t in &p.tokens {
            counts[t] += 1;
        }
    }
    let top = (0..v).max_by_key(|&t| (counts[t], std::cmp::Reverse(t))).unwrap_or(0);
    let (mut hits, mut n) = (0usize, 0usize);
    for (i, item) in valid.iter().enumerate() {
        let key = rng::mix(&[cfg.seed, 0x7a1, i as u64]);
        let (_, targets) = crate::training::fit::mask_tokens(item.tokens, cfg.mask_prob, key);
        for &t in targets.iter().filter(|&&t| t != PAD) {
            n += 1;
            hits += usize::from(t == top);
        }
    }
    hits as f64 / n.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub label_smoothing: f64,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for AsrTrainConfig {
    fn default() -> Self {
        AsrTrainConfig {
            epochs: 30,
            batch_size: 16,
            schedule: LrSchedule {
                peak_lr: 3e-3,
                warmup_steps: 200,
            },
            label_smoothing: LABEL_SMOOTHING,
            augment: Some(AugmentConfig::default()),
            seed: 5,
        }
    }
}

impl AsrTrainConfig {
    pub(crate) fn objective(&self) -> Objective {
        Objective::Speech {
            weights: crate::numerics::LossWeights { gamma: 1.0, beta: 0.0 },
            ce: true,
            l2: false,
            label_smoothing: self.label_smoothing,
        }
    }

    pub(crate) fn options(&self, snapshot_steps: Vec<u64>) -> FitOptions {
        FitOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            seed: self.seed,
            augment: self.augment,
            trainable: vec![ParamGroup::Student, ParamGroup::Decoder],
            snapshot_steps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AsrReport {
    pub wer_before: f64,
    pub wer_after: f64,
    pub best_epoch: usize,
    pub steps: u64,
    pub history: History,
}

pub(crate) fn speech_items(pairs: &[UtterancePair]) -> Vec<Item<'_>> {
    pairs
        .iter()
        .map(|p| Item {
            tokens: &p.tokens,
            frames: Some(&p.frames),
            target: None,
        })
        .collect()
}

/// Greedy-decoding WER of `bundle` over `pairs`.
pub fn validation_wer(bundle: &ModelBundle, pairs: &[UtterancePair]) -> Result<f64> {
    let mut refs = Vec::with_capacity(pairs.len());
    let mut hyps = Vec::with_capacity(pairs.len());
    for p in pairs {
        let cap = 2 * bundle.student().output_len(p.frames.dims2().0);
        let (hyp, _) = bundle.greedy_decode(&p.frames, cap)?;
        refs.push(p.tokens.as_slice());
        hyps.push(hyp);
    }
    let hyp_refs: Vec<&[usize]> = hyps.iter().map(Vec::as_slice).collect();
    corpus_wer(&refs, &hyp_refs)
}

/// A parameter snapshot taken partway through recognition pretraining.
pub struct AsrSnapshot {
    pub step: u64,
    pub bundle: ModelBundle,
}

/// Encoder-decoder recognition training starting from `init` (whose teacher
/// and projection are left as they are). Returns the best-validation bundle,
/// a report, and snapshots at the requested steps.
pub fn pretrain_asr(
    corpus: &Corpus,
    init: ModelBundle,
    cfg: &AsrTrainConfig,
    snapshot_steps: &[u64],
) -> Result<(ModelBundle, AsrReport, Vec<AsrSnapshot>)> {
    let mut bundle = init;
    let wer_before = validation_wer(&bundle, &corpus.valid)?;
    let train = speech_items(&corpus.train);
    let valid = speech_items(&corpus.valid);
    let out = fit(
        &mut bundle,
        &train,
        &valid,
        cfg.objective(),
        &cfg.options(snapshot_steps.to_vec()),
    )?;
    let snapshots = out
        .snapshots
        .into_iter()
        .map(|(step, params)| {
            let mut b = bundle.clone();
            b.params = params;
            AsrSnapshot { step, bundle: b }
        })
        .collect();
    bundle.params = out.best;
    let wer_after = validation_wer(&bundle, &corpus.valid)?;
    Ok((
        bundle,
        AsrReport {
            wer_before,
            wer_after,
            best_epoch: out.best_epoch,
            steps: out.steps,
            history: out.history,
        },
        snapshots,
    ))
}
