//! Word error rate by Levenshtein alignment.

use crate::error::{Error, Result};

/// Minimum number of substitutions, insertions and deletions turning `a` into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance / len(reference)`; can exceed 1.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Total edits over total reference length.
pub fn corpus_wer<T: PartialEq>(references: &[&[T]], hypotheses: &[&[T]]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::invalid("reference and hypothesis counts differ"));
    }
    let mut edits = 0;
    let mut words = 0;
    for (r, h) in references.iter().zip(hypotheses) {
        if r.is_empty() {
            return Err(Error::EmptyReference);
        }
        edits += edit_distance(r, h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edits as f64 / words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(wer(&['a', 'b', 'c'], &['a', 'x', 'c']).unwrap(), 1.0 / 3.0);
        assert_eq!(wer(&['a', 'b'], &['a', 'b', 'c', 'd']).unwrap(), 1.0);
        assert_eq!(wer(&[1, 2], &[]).unwrap(), 1.0);
        assert!(matches!(wer::<u8>(&[], &[1]), Err(Error::EmptyReference)));
    }

    #[test]
    fn asymmetric_for_unequal_lengths() {
        let a = [1, 2];
        let b = [1, 2, 3, 4];
        assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        assert_ne!(wer(&a, &b).unwrap(), wer(&b, &a).unwrap());
    }

    #[test]
    fn corpus_level_pools_edits() {
        let r: [&[u8]; 2] = [&[1, 2, 3], &[4]];
        let h: [&[u8]; 2] = [&[1, 2, 3], &[5]];
        assert_eq!(corpus_wer(&r, &h).unwrap(), 0.25);
    }
}
