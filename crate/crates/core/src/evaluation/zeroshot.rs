//! Zero-shot classification: each utterance takes the label whose text
//! embedding is most similar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::retrieval::{best_match, check_dims, check_unit, dot};

/// Label pairs closer than this in cosine distance are reported as duplicates.
pub const DUPLICATE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub dataset: String,
    pub n: usize,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Mean cosine over distinct label pairs.
pub fn mean_pairwise_cosine(labels: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            sum += dot(&labels[i], &labels[j]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn zero_shot_classify(
    dataset: &str,
    speech: &[Vec<f64>],
    truth: &[usize],
    labels: &[Vec<f64>],
) -> Result<ZeroShotReport> {
    let k = labels.len();
    if k < 2 {
        return Err(Error::invalid("zero-shot classification needs at least two labels"));
    }
    if speech.is_empty() || speech.len() != truth.len() {
        return Err(Error::invalid("zero-shot inputs and truth differ in length"));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= k) {
        return Err(Error::TargetOutOfVocab { target: t, vocab: k });
    }
    check_dims(speech, labels)?;
    check_unit(speech, "speech")?;
    check_unit(labels, "label")?;
    let mut warnings = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            if 1.0 - dot(&labels[i], &labels[j]) <= DUPLICATE_TOLERANCE {
                warnings.push(format!("labels {i} and {j} have identical embeddings"));
            }
        }
    }
    for w in &warnings {
        log::warn!("{dataset}: {w}");
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (s, &t) in speech.iter().zip(truth) {
        let (p, _) = best_match(s, labels);
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(ZeroShotReport {
        dataset: dataset.to_string(),
        n: speech.len(),
        accuracy: correct as f64 / speech.len() as f64,
        confusion,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(k: usize, i: usize) -> Vec<f64> {
        (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn exact_label_embeddings_classify_perfectly() {
        let labels: Vec<_> = (0..4).map(|i| basis(4, i)).collect();
        let truth = vec![0, 1, 2, 3, 2, 1];
        let speech: Vec<_> = truth.iter().map(|&t| labels[t].clone()).collect();
        let r = zero_shot_classify("t", &speech, &truth, &labels).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.warnings.is_empty());
        let rows: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![1, 2, 2, 1]);
    }

    #[test]
    fn orthogonal_inputs_tie_to_first_label() {
        let labels: Vec<_> = (0..3).map(|i| basis(4, i)).collect();
        let truth = vec![0, 1, 2];
        let speech = vec![basis(4, 3); 3];
        let r = zero_shot_classify("t", &speech, &truth, &labels).unwrap();
        assert!(r.confusion.iter().all(|row| row[1] == 0 && row[2] == 0));
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_labels_warn_but_classify() {
        let labels = vec![basis(2, 0), basis(2, 0), basis(2, 1)];
        let r = zero_shot_classify("t", &[basis(2, 0)], &[1], &labels).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn pairwise_cosine() {
        let labels = vec![basis(2, 0), basis(2, 1), basis(2, 0)];
        assert!((mean_pairwise_cosine(&labels) - 1.0 / 3.0).abs() < 1e-12);
    }
}
