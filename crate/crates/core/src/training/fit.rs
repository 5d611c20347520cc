//! The shared optimization loop behind every training entry point.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::augment::spec_augment_like;
use crate::datagen::vocab::{BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::models::bundle::argmax;
use crate::numerics::{
    adam_step, l2_pair_loss, rng, total_loss, DropoutKey, LossWeights, LrSchedule, OptimizerState, ParamGroup, Var,
};
use crate::{ModelBundle, ParamStore, Tape, Tensor};

/// One training example. Which fields are needed depends on the objective.
#[derive(Clone, Copy, Debug)]
pub struct Item<'a> {
    pub tokens: &'a [usize],
    pub frames: Option<&'a Tensor>,
    /// Teacher embedding of `tokens`.
    pub target: Option<&'a Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Masked-token prediction through the teacher.
    Mlm { mask_prob: f64 },
    /// Speech-side objectives: recognition cross-entropy when `ce`, embedding
    /// alignment when `l2`, combined with `weights`.
    Speech {
        weights: LossWeights,
        ce: bool,
        l2: bool,
        label_smoothing: f64,
    },
}

impl Objective {
    fn weights(&self) -> LossWeights {
        match self {
            Objective::Mlm { .. } => LossWeights { gamma: 1.0, beta: 0.0 },
            Objective::Speech { weights, .. } => *weights,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub time_mask_max: usize,
    pub channel_mask_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            time_mask_max: 4,
            channel_mask_max: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub trainable: Vec<ParamGroup>,
    /// Steps after which a copy of the parameters is kept.
    pub snapshot_steps: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub lr: f64,
    pub ce: Option<f64>,
    pub l2: Option<f64>,
    pub total: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

fn opt_field(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl History {
    pub fn train(&self) -> impl Iterator<Item = &HistoryRow> {
        self.rows.iter().filter(|r| r.phase == Phase::Train)
    }

    /// Validation rows: the initial evaluation, then one per epoch.
    pub fn valid(&self) -> Vec<&HistoryRow> {
        self.rows.iter().filter(|r| r.phase == Phase::Valid).collect()
    }

    /// Epoch (1-based) with the smallest validation total; earliest on ties.
    /// The initial evaluation is not a candidate.
    pub fn best_epoch(&self) -> Option<usize> {
        let v = self.valid();
        let mut best: Option<usize> = None;
        for e in 1..v.len() {
            if best.is_none_or(|b| v[e].total < v[b].total) {
                best = Some(e);
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,ce,l2,total,split\n");
        for r in &self.rows {
            let phase = match r.phase {
                Phase::Train => "train",
                Phase::Valid => "valid",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step,
                r.lr,
                opt_field(r.ce),
                opt_field(r.l2),
                r.total,
                phase
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |l: &str| Error::invalid(format!("bad history line `{l}`"));
        let opt = |f: &str, l: &str| -> Result<Option<f64>> {
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|_| bad(l))
            }
        };
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            rows.push(HistoryRow {
                step: f[0].parse().map_err(|_| bad(line))?,
                lr: f[1].parse().map_err(|_| bad(line))?,
                ce: opt(f[2], line)?,
                l2: opt(f[3], line)?,
                total: f[4].parse().map_err(|_| bad(line))?,
                phase: match f[5] {
                    "train" => Phase::Train,
                    "valid" => Phase::Valid,
                    _ => return Err(bad(line)),
                },
            });
        }
        Ok(History { rows })
    }
}

/// Mean losses of a model over a set of items, in eval mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub ce: Option<f64>,
    pub l2: Option<f64>,
    pub total: f64,
    /// Masked-token accuracy, for the masked objective only.
    pub accuracy: Option<f64>,
}

pub struct FitOutcome {
    pub best: ParamStore,
    pub best_epoch: usize,
    pub history: History,
    pub steps: u64,
    pub snapshots: Vec<(u64, ParamStore)>,
}

/// Replaces a random subset (at least one position) of `tokens` with the
/// mask symbol. Targets hold the original id at masked positions and the
/// padding id elsewhere.
pub fn mask_tokens(tokens: &[usize], prob: f64, key: u64) -> (Vec<usize>, Vec<usize>) {
    let mut picked: Vec<bool> = (0..tokens.len())
        .map(|i| rng::unit_hash(&[key, i as u64]) < prob)
        .collect();
    if !picked.contains(&true) {
        let i = (rng::mix(&[key, 0x0f]) % tokens.len() as u64) as usize;
        picked[i] = true;
    }
    let input = tokens
        .iter()
        .zip(&picked)
        .map(|(&t, &m)| if m { MASK } else { t })
        .collect();
    let targets = tokens
        .iter()
        .zip(&picked)
        .map(|(&t, &m)| if m { t } else { PAD })
        .collect();
    (input, targets)
}

struct Terms {
    ce: Option<Var>,
    pair: Option<(Var, Var)>,
    /// Masked-prediction logits and targets, for accuracy.
    mlm: Option<(Var, Vec<usize>)>,
}

fn example_terms(
    bundle: &ModelBundle,
    tape: &mut Tape,
    item: &Item<'_>,
    objective: &Objective,
    mask_key: u64,
    augment: Option<(AugmentConfig, u64)>,
) -> Result<Terms> {
    match *objective {
        Objective::Mlm { mask_prob } => {
            let (input, targets) = mask_tokens(item.tokens, mask_prob, mask_key);
            let logits = bundle.mlm_logits(tape, &input)?;
            let ce = tape.cross_entropy(logits, &targets, Some(PAD), 0.0)?;
            Ok(Terms {
                ce: Some(ce),
                pair: None,
                mlm: Some((logits, targets)),
            })
        }
        Objective::Speech {
            ce,
            l2,
            label_smoothing,
            ..
        } => {
            let frames = item
                .frames
                .ok_or_else(|| Error::invalid("speech objective needs frames"))?;
            let st = match augment {
                Some((a, seed)) => {
                    let (t, c) = frames.dims2();
                    let f = spec_augment_like(frames, a.time_mask_max.min(t), a.channel_mask_max.min(c), seed)?;
                    bundle.speech_states(tape, &f)?
                }
                None => bundle.speech_states(tape, frames)?,
            };
            let ce = if ce {
                let mut prefix = Vec::with_capacity(item.tokens.len() + 1);
                prefix.push(BOS);
                prefix.extend_from_slice(item.tokens);
                let mut targets = item.tokens.to_vec();
                targets.push(EOS);
                let logits = bundle.decoder_logits(tape, st.states, &prefix)?;
                Some(tape.cross_entropy(logits, &targets, None, label_smoothing)?)
            } else {
                None
            };
            let pair = if l2 {
                let target = item
                    .target
                    .ok_or_else(|| Error::invalid("alignment objective needs teacher targets"))?;
                let e = bundle.speech_embedding_from(tape, &st)?;
                let t = tape.constant(target.clone());
                Some((e, t))
            } else {
                None
            };
            Ok(Terms { ce, pair, mlm: None })
        }
    }
}

/// Mean losses over `items` in eval mode. Masking for the masked objective
/// is keyed by `seed` and the item index, so repeated calls agree.
pub fn evaluate(bundle: &ModelBundle, items: &[Item<'_>], objective: &Objective, seed: u64) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let (mut ce_sum, mut l2_sum) = (0.0, 0.0);
    let (mut has_ce, mut has_l2) = (false, false);
    let (mut hits, mut masked) = (0usize, 0usize);
    for (i, item) in items.iter().enumerate() {
        let mut tape = Tape::eval();
        let terms = example_terms(
            bundle,
            &mut tape,
            item,
            objective,
            rng::mix(&[seed, 0x7a1, i as u64]),
            None,
        )?;
        if let Some(ce) = terms.ce {
            ce_sum += tape.value(ce).item();
            has_ce = true;
        }
        if let Some((a, b)) = terms.pair {
            let d = tape.sq_dist(a, b)?;
            l2_sum += tape.value(d).item();
            has_l2 = true;
        }
        if let Some((logits, targets)) = terms.mlm {
            let l = tape.value(logits);
            for (p, &t) in targets.iter().enumerate() {
                if t != PAD {
                    masked += 1;
                    hits += usize::from(argmax(l.row(p)) == t);
                }
            }
        }
    }
    let n = items.len() as f64;
    let ce = has_ce.then_some(ce_sum / n);
    let l2 = has_l2.then_some(l2_sum / n);
    let total = objective.weights().combine(ce.unwrap_or(0.0), l2.unwrap_or(0.0))?;
    Ok(Evaluation {
        ce,
        l2,
        total,
        accuracy: (masked > 0).then(|| hits as f64 / masked as f64),
    })
}

fn validate_options(opts: &FitOptions) -> Result<()> {
    opts.schedule.validate()?;
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    if opts.trainable.is_empty() {
        return Err(Error::invalid("nothing to train"));
    }
    if opts.trainable.contains(&ParamGroup::Teacher) && opts.trainable.len() > 1 {
        return Err(Error::invalid("the teacher trains alone"));
    }
    Ok(())
}

/// Minimizes `objective` over `train` with Adam, updating only the groups in
/// `opts.trainable`. Validation losses are recorded before training and after
/// every epoch; the parameters of the best epoch are returned alongside the
/// final state left in `bundle`.
pub fn fit(
    bundle: &mut ModelBundle,
    train: &[Item<'_>],
    valid: &[Item<'_>],
    objective: Objective,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    validate_options(opts)?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    objective.weights().validate()?;
    for g in ParamGroup::ALL {
        bundle.params.set_group_frozen(g, !opts.trainable.contains(&g));
    }
    let guards: Vec<(ParamGroup, Vec<u8>)> = ParamGroup::ALL
        .into_iter()
        .filter(|g| !opts.trainable.contains(g))
        .map(|g| (g, bundle.params.group_bytes(g)))
        .collect();

    let mut history = History::default();
    let v0 = evaluate(bundle, valid, &objective, opts.seed)?;
    history.rows.push(HistoryRow {
        step: 0,
        lr: 0.0,
        ce: v0.ce,
        l2: v0.l2,
        total: v0.total,
        phase: Phase::Valid,
    });

    let mut state = OptimizerState::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut snapshots = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng::stream(&[opts.seed, 0xe9, epoch as u64]));
        for batch in order.chunks(opts.batch_size) {
            step += 1;
            let lr = opts.schedule.lr_at_step(step);
            let mut tape = Tape::train();
            let mut ces = Vec::new();
            let mut pairs = Vec::new();
            for (j, &idx) in batch.iter().enumerate() {
                tape.set_dropout_key(DropoutKey {
                    seed: opts.seed,
                    step,
                    stream: j as u64,
                });
                let aug = opts.augment.map(|a| (a, rng::mix(&[opts.seed, 0xa6, step, j as u64])));
                let key = rng::mix(&[opts.seed, 0x3a5, step, j as u64]);
                let t = example_terms(bundle, &mut tape, &train[idx], &objective, key, aug)?;
                ces.extend(t.ce);
                pairs.extend(t.pair);
            }
            let ce = if ces.is_empty() {
                None
            } else {
                let s = tape.add_n(&ces)?;
                Some(tape.scale(s, 1.0 / ces.len() as f64))
            };
            let l2 = if pairs.is_empty() {
                None
            } else {
                Some(l2_pair_loss(&mut tape, &pairs)?)
            };
            let total = total_loss(&mut tape, ce, l2, objective.weights()).map_err(|e| match e {
                Error::NonFiniteLoss => Error::Divergence { step },
                e => e,
            })?;
            let row = HistoryRow {
                step,
                lr,
                ce: ce.map(|v| tape.value(v).item()),
                l2: l2.map(|v| tape.value(v).item()),
                total: tape.value(total).item(),
                phase: Phase::Train,
            };
            if !row.total.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = tape.backward(total)?;
            let mut map = HashMap::new();
            grads.accumulate_into(&mut map);
            adam_step(&mut bundle.params, &map, &mut state, lr).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::Divergence { step },
                e => e,
            })?;
            history.rows.push(row);
            if opts.snapshot_steps.contains(&step) {
                snapshots.push((step, bundle.params.clone()));
            }
        }
        let v = evaluate(bundle, valid, &objective, opts.seed)?;
        if !v.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        history.rows.push(HistoryRow {
            step,
            lr: opts.schedule.lr_at_step(step),
            ce: v.ce,
            l2: v.l2,
            total: v.total,
            phase: Phase::Valid,
        });
        if best.as_ref().is_none_or(|b| v.total < b.0) {
            best = Some((v.total, epoch, bundle.params.clone()));
        }
    }
    for (g, before) in guards {
        if bundle.params.group_bytes(g) != before {
            return Err(Error::FrozenDrift(g.as_str().to_string()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    debug_assert_eq!(history.best_epoch(), Some(best_epoch));
    Ok(FitOutcome {
        best,
        best_epoch,
        history,
        steps: step,
        snapshots,
    })
}
