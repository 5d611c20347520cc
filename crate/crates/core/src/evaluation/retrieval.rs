//! Cross-modal retrieval by exact cosine search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on embedding norms accepted by the similarity searches.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Text queries, speech candidates.
    TextToSpeech,
    /// Speech queries, text candidates.
    SpeechToText,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalResult {
    pub accuracy: f64,
    /// Mean gap between the best and second-best candidate similarity.
    pub mean_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub dataset: String,
    /// Pool size: every query is ranked against all `n` candidates.
    pub n: usize,
    pub acc_t2s: f64,
    pub acc_s2t: f64,
    pub margin_t2s: f64,
    pub margin_s2t: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_unit(rows: &[Vec<f64>], what: &str) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        let n = dot(r, r).sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

pub(crate) fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::shape("retrieval", "embedding dimensions differ"));
    }
    Ok(d)
}

/// Index of the most similar candidate (lowest index on ties) and the gap to
/// the runner-up (0 with a single candidate).
pub(crate) fn best_match(query: &[f64], candidates: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let s = dot(query, c);
        if s > best.1 {
            second = best.1;
            best = (i, s);
        } else if s > second {
            second = s;
        }
    }
    let margin = if second.is_finite() { best.1 - second } else { 0.0 };
    (best.0, margin)
}

/// Fraction of queries whose nearest candidate is their own pair. Row `i` of
/// `speech` and row `i` of `text` are the same example.
pub fn retrieval_accuracy(speech: &[Vec<f64>], text: &[Vec<f64>], direction: Direction) -> Result<RetrievalResult> {
    if speech.is_empty() || speech.len() != text.len() {
        return Err(Error::invalid(format!(
            "retrieval needs equal non-empty sets (got {} speech, {} text)",
            speech.len(),
            text.len()
        )));
    }
    check_dims(speech, text)?;
    check_unit(speech, "speech")?;
    check_unit(text, "text")?;
    let (queries, candidates) = match direction {
        Direction::TextToSpeech => (text, speech),
        Direction::SpeechToText => (speech, text),
    };
    let results: Vec<(bool, f64)> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let (j, m) = best_match(q, candidates);
            (i == j, m)
        })
        .collect();
    let n = results.len() as f64;
    Ok(RetrievalResult {
        accuracy: results.iter().filter(|r| r.0).count() as f64 / n,
        mean_margin: results.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

pub fn retrieval_report(dataset: &str, speech: &[Vec<f64>], text: &[Vec<f64>]) -> Result<RetrievalReport> {
    let t2s = retrieval_accuracy(speech, text, Direction::TextToSpeech)?;
    let s2t = retrieval_accuracy(speech, text, Direction::SpeechToText)?;
    Ok(RetrievalReport {
        dataset: dataset.to_string(),
        n: speech.len(),
        acc_t2s: t2s.accuracy,
        acc_s2t: s2t.accuracy,
        margin_t2s: t2s.mean_margin,
        margin_s2t: s2t.mean_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn self_match_is_perfect() {
        let e: Vec<Vec<f64>> = (0..5).map(|i| unit(&[1.0, i as f64, (i * i) as f64])).collect();
        let r = retrieval_report("self", &e, &e).unwrap();
        assert_eq!((r.acc_t2s, r.acc_s2t), (1.0, 1.0));
    }

    #[test]
    fn two_by_two_direction_asymmetry() {
        // speech rows and text columns chosen so that cos = [[0.9, 0.1], [0.8, 0.2]]
        let t0 = vec![1.0, 0.0];
        let t1 = vec![0.0, 1.0];
        let s0 = unit(&[0.9, 0.1]);
        let s1 = unit(&[0.8, 0.2]);
        let speech = vec![s0, s1];
        let text = vec![t0, t1];
        let s2t = retrieval_accuracy(&speech, &text, Direction::SpeechToText).unwrap();
        let t2s = retrieval_accuracy(&speech, &text, Direction::TextToSpeech).unwrap();
        assert_eq!(s2t.accuracy, 0.5);
        assert_eq!(t2s.accuracy, 1.0);
    }

    #[test]
    fn single_pair_is_trivially_right() {
        let e = vec![unit(&[0.3, -2.0])];
        let f = vec![unit(&[5.0, 1.0])];
        assert_eq!(
            retrieval_accuracy(&e, &f, Direction::TextToSpeech).unwrap().accuracy,
            1.0
        );
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(best_match(&[1.0, 0.0], &c).0, 0);
        let r = retrieval_accuracy(&c, &c, Direction::SpeechToText).unwrap();
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn preconditions() {
        let a = vec![vec![1.0, 0.0]];
        assert!(retrieval_accuracy(&[], &[], Direction::TextToSpeech).is_err());
        assert!(retrieval_accuracy(&a, &[vec![1.0, 0.0, 0.0]], Direction::TextToSpeech).is_err());
        assert!(retrieval_accuracy(&a, &[vec![2.0, 0.0]], Direction::TextToSpeech).is_err());
    }
}
