//! Recognition quality against post-alignment retrieval.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub checkpoint: String,
    /// Recognition pretraining steps behind the checkpoint.
    pub steps: u64,
    pub wer: f64,
    pub acc_t2s: f64,
    pub acc_s2t: f64,
}

/// Ranks with ties sharing their mean rank (1-based).
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
/// Constant input has no defined correlation and yields an error.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("spearman of a constant series is undefined"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between `-WER` and T→S accuracy.
pub fn trend_correlation(rows: &[TrendRow]) -> Result<f64> {
    let neg_wer: Vec<f64> = rows.iter().map(|r| -r.wer).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.acc_t2s).collect();
    spearman(&neg_wer, &acc)
}

pub fn trend_csv(rows: &[TrendRow]) -> String {
    let mut s = String::from("checkpoint,steps,wer,acc_t2s,acc_s2t\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.checkpoint, r.steps, r.wer, r.acc_t2s, r.acc_s2t);
    }
    s
}
