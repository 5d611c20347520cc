//! Probing classifiers trained on frozen text embeddings and reused,
//! unchanged, on speech embeddings.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::bundle::argmax;
use crate::models::layers::{Builder, Linear};
use crate::numerics::{adam_step, rng, DropoutKey, OptimizerState, ParamGroup};
use crate::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeClassifierConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeClassifierConfig {
    fn default() -> Self {
        ProbeClassifierConfig {
            hidden_dim: 64,
            dropout: 0.1,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 13,
        }
    }
}

/// Linear, dropout, tanh, linear.
#[derive(Clone, Debug)]
pub struct ProbeClassifier {
    pub params: ParamStore,
    hidden: Linear,
    out: Linear,
    dropout: f64,
    drop_id: u64,
    pub n_classes: usize,
}

impl ProbeClassifier {
    pub fn new(in_dim: usize, n_classes: usize, cfg: &ProbeClassifierConfig) -> Result<Self> {
        if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden_dim == 0 {
            return Err(Error::Config(
                "probe needs epochs, batch_size and hidden_dim >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("probe dropout {} outside [0,1)", cfg.dropout)));
        }
        let mut params = ParamStore::new();
        let mut drop = 0;
        let mut b = Builder::new(&mut params, cfg.seed, ParamGroup::Probe, &mut drop);
        let hidden = Linear::new(&mut b, "probe.hidden", in_dim, cfg.hidden_dim)?;
        let out = Linear::new(&mut b, "probe.out", cfg.hidden_dim, n_classes)?;
        let drop_id = b.dropout_id();
        Ok(ProbeClassifier {
            params,
            hidden,
            out,
            dropout: cfg.dropout,
            drop_id,
            n_classes,
        })
    }

    fn logits(&self, tape: &mut Tape, x: &[&Vec<f64>]) -> Result<crate::numerics::Var> {
        let d = x.first().map_or(0, |r| r.len());
        let data: Vec<f64> = x.iter().flat_map(|r| r.iter().copied()).collect();
        let xv = tape.constant(Tensor::matrix(x.len(), d, data)?);
        let h = self.hidden.forward(tape, &self.params, xv)?;
        let h = tape.dropout(h, self.dropout, self.drop_id)?;
        let h = tape.tanh(h);
        self.out.forward(tape, &self.params, h)
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        if x.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::eval();
        let rows: Vec<&Vec<f64>> = x.iter().collect();
        let l = self.logits(&mut tape, &rows)?;
        let v = tape.value(l);
        Ok((0..x.len()).map(|i| argmax(v.row(i))).collect())
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> Result<f64> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid("accuracy needs equal non-empty inputs and labels"));
        }
        let p = self.predict(x)?;
        Ok(p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
    }

    /// SHA-256 over parameter names and values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.params.iter() {
            h.update(p.name.as_bytes());
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedProbe {
    pub classifier: ProbeClassifier,
    pub best_epoch: usize,
    pub valid_accuracy: Vec<f64>,
}

/// Trains a probe, keeping the epoch with the best validation accuracy
/// (earliest on ties).
pub fn train_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    valid_x: &[Vec<f64>],
    valid_y: &[usize],
    n_classes: usize,
    cfg: &ProbeClassifierConfig,
) -> Result<TrainedProbe> {
    if train_x.is_empty() || train_x.len() != train_y.len() || valid_x.len() != valid_y.len() || valid_x.is_empty() {
        return Err(Error::invalid("probe data and labels must be non-empty and aligned"));
    }
    if let Some(&t) = train_y.iter().chain(valid_y).find(|&&t| t >= n_classes) {
        return Err(Error::TargetOutOfVocab {
            target: t,
            vocab: n_classes,
        });
    }
    let mut present = vec![false; n_classes];
    for &y in train_y {
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::ClassCollapse);
    }
    let mut clf = ProbeClassifier::new(train_x[0].len(), n_classes, cfg)?;
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut valid_accuracy = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(&[cfg.seed, 0x9e, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut tape = Tape::train();
            tape.set_dropout_key(DropoutKey {
                seed: cfg.seed,
                step,
                stream: 0,
            });
            let rows: Vec<&Vec<f64>> = batch.iter().map(|&i| &train_x[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let l = clf.logits(&mut tape, &rows)?;
            let loss = tape.cross_entropy(l, &targets, None, 0.0)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = tape.backward(loss)?;
            let mut map = HashMap::new();
            grads.accumulate_into(&mut map);
            adam_step(&mut clf.params, &map, &mut state, cfg.lr)?;
        }
        let acc = clf.accuracy(valid_x, valid_y)?;
        valid_accuracy.push(acc);
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, epoch, clf.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    clf.params = params;
    Ok(TrainedProbe {
        classifier: clf,
        best_epoch,
        valid_accuracy,
    })
}

/// Embeddings and labels for one probing task.
pub struct ProbeInputs<'a> {
    pub task: &'a str,
    pub n_classes: usize,
    pub text_train: &'a [Vec<f64>],
    pub train_labels: &'a [usize],
    pub text_valid: &'a [Vec<f64>],
    pub valid_labels: &'a [usize],
    pub text_test: &'a [Vec<f64>],
    pub test_labels: &'a [usize],
    /// Speech embeddings of the rendered test sentences before alignment.
    pub speech_before: &'a [Vec<f64>],
    /// The same sentences through the aligned student.
    pub speech_after: &'a [Vec<f64>],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbingReport {
    pub task: String,
    pub n_test: usize,
    pub text_acc: f64,
    pub speech_acc_before: f64,
    pub speech_acc_after: f64,
    /// `speech_acc_after - speech_acc_before`.
    pub delta: f64,
    /// `text_acc - speech_acc_after`.
    pub gap_to_text: f64,
    pub classifier_hash: String,
    pub best_epoch: usize,
}

/// Trains one classifier on text embeddings and scores it on text, speech
/// before alignment, and speech after alignment.
pub fn probe(inputs: &ProbeInputs<'_>, cfg: &ProbeClassifierConfig) -> Result<ProbingReport> {
    let trained = train_probe(
        inputs.text_train,
        inputs.train_labels,
        inputs.text_valid,
        inputs.valid_labels,
        inputs.n_classes,
        cfg,
    )?;
    score_probe(
        &trained,
        inputs.task,
        inputs.text_test,
        inputs.test_labels,
        inputs.speech_before,
        inputs.speech_after,
    )
}

/// Scores an already trained probe on the three test modalities, checking
/// that the classifier is left untouched.
pub fn score_probe(
    trained: &TrainedProbe,
    task: &str,
    text_test: &[Vec<f64>],
    test_labels: &[usize],
    speech_before: &[Vec<f64>],
    speech_after: &[Vec<f64>],
) -> Result<ProbingReport> {
    let n = test_labels.len();
    if text_test.len() != n || speech_before.len() != n || speech_after.len() != n {
        return Err(Error::invalid(
            "test embeddings of every modality must align with the labels",
        ));
    }
    let clf = &trained.classifier;
    let hash = clf.hash();
    let text_acc = clf.accuracy(text_test, test_labels)?;
    let before = clf.accuracy(speech_before, test_labels)?;
    let after = clf.accuracy(speech_after, test_labels)?;
    if clf.hash() != hash {
        return Err(Error::invalid("probe classifier changed during evaluation"));
    }
    Ok(ProbingReport {
        task: task.to_string(),
        n_test: n,
        text_acc,
        speech_acc_before: before,
        speech_acc_after: after,
        delta: after - before,
        gap_to_text: text_acc - after,
        classifier_hash: hash,
        best_epoch: trained.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::stream(&[seed]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % k;
            let v: Vec<f64> = (0..8)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    if j == c {
                        3.0 + 0.3 * z
                    } else {
                        0.3 * z
                    }
                })
                .collect();
            x.push(v);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_classes_are_learned() {
        let (x, y) = blobs(300, 3, 1);
        let (vx, vy) = blobs(60, 3, 2);
        let cfg = ProbeClassifierConfig {
            lr: 1e-2,
            ..ProbeClassifierConfig::default()
        };
        let p = train_probe(&x, &y, &vx, &vy, 3, &cfg).unwrap();
        assert!(p.classifier.accuracy(&vx, &vy).unwrap() > 0.95);
        assert_eq!(p.valid_accuracy.len(), 10);
        assert_eq!(
            p.valid_accuracy[p.best_epoch - 1],
            p.valid_accuracy.iter().cloned().fold(0.0, f64::max)
        );
    }

    #[test]
    fn collapsed_labels_rejected() {
        let (x, _) = blobs(20, 2, 1);
        let y = vec![1; 20];
        assert!(matches!(
            train_probe(&x, &y, &x, &y, 2, &ProbeClassifierConfig::default()),
            Err(Error::ClassCollapse)
        ));
    }

    #[test]
    fn same_classifier_scores_both_modalities() {
        let (x, y) = blobs(200, 2, 3);
        let (tx, ty) = blobs(40, 2, 4);
        let mut r = rng::stream(&[9]);
        let noise: Vec<Vec<f64>> = (0..40).map(|_| (0..8).map(|_| r.random::<f64>()).collect()).collect();
        let rep = probe(
            &ProbeInputs {
                task: "blobs",
                n_classes: 2,
                text_train: &x,
                train_labels: &y,
                text_valid: &tx,
                valid_labels: &ty,
                text_test: &tx,
                test_labels: &ty,
                speech_before: &noise,
                speech_after: &tx,
            },
            &ProbeClassifierConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.text_acc, rep.speech_acc_after);
        assert_eq!(rep.classifier_hash.len(), 64);
    }
}
