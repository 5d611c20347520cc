//! Seeded bigram language over the content vocabulary.
//!
//! The chain runs over states: one state per ordinary token plus a single
//! shared state that emits any of the "digit" tokens uniformly. Digit tokens
//! therefore occur in identical contexts and cannot be told apart by their
//! neighbours, while every ordinary token has its own context distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub vocab_size: usize,
    /// Size of the interchangeable token class.
    pub n_digits: usize,
    /// Successor states with non-zero probability per state.
    pub fanout: usize,
    pub seed: u64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        LanguageConfig {
            vocab_size: 64,
            n_digits: 10,
            fanout: 6,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BigramLanguage {
    pub vocab: Vocabulary,
    digits: Vec<usize>,
    regular: Vec<usize>,
    /// `succ[state]` lists `(next_state, cumulative probability)`.
    succ: Vec<Vec<(usize, f64)>>,
}

impl BigramLanguage {
    pub fn new(cfg: &LanguageConfig) -> Result<Self> {
        let vocab = Vocabulary::new(cfg.vocab_size)?;
        let content: Vec<usize> = vocab.content().collect();
        if cfg.n_digits < 2 || cfg.n_digits + 2 > content.len() {
            return Err(Error::invalid(format!(
                "{} digit tokens do not fit {} content tokens",
                cfg.n_digits,
                content.len()
            )));
        }
        let digits = content[..cfg.n_digits].to_vec();
        let regular = content[cfg.n_digits..].to_vec();
        let n_states = regular.len() + 1;
        let fanout = cfg.fanout.clamp(1, n_states);
        let mut r = rng::stream(&[cfg.seed, 0x1a9]);
        let succ = (0..n_states)
            .map(|_| {
                let mut picks: Vec<usize> = Vec::with_capacity(fanout);
                while picks.len() < fanout {
                    let s = r.random_range(0..n_states);
                    if !picks.contains(&s) {
                        picks.push(s);
                    }
                }
                let weights: Vec<f64> = picks.iter().map(|_| 0.2 + r.random::<f64>()).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        acc += w / total;
                        (s, acc)
                    })
                    .collect()
            })
            .collect();
        Ok(BigramLanguage {
            vocab,
            digits,
            regular,
            succ,
        })
    }

    pub fn digits(&self) -> &[usize] {
        &self.digits
    }

    /// Ordinary tokens; each has its own context distribution.
    pub fn regular(&self) -> &[usize] {
        &self.regular
    }

    fn digit_state(&self) -> usize {
        self.regular.len()
    }

    fn state_of(&self, token: usize) -> usize {
        match self.regular.iter().position(|&t| t == token) {
            Some(i) => i,
            None => self.digit_state(),
        }
    }

    fn emit(&self, state: usize, r: &mut ChaCha8Rng) -> usize {
        if state == self.digit_state() {
            self.digits[r.random_range(0..self.digits.len())]
        } else {
            self.regular[state]
        }
    }

    fn next_state(&self, state: usize, r: &mut ChaCha8Rng) -> usize {
        let u: f64 = r.random();
        let row = &self.succ[state];
        row.iter().find(|(_, c)| u < *c).unwrap_or(row.last().unwrap()).0
    }

    pub fn sample(&self, len: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
        let mut state = r.random_range(0..self.succ.len());
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                state = self.next_state(state, r);
            }
            out.push(self.emit(state, r));
        }
        out
    }

    /// Probability of the transition `a -> b` under the chain.
    pub fn transition_prob(&self, a: usize, b: usize) -> f64 {
        let (sa, sb) = (self.state_of(a), self.state_of(b));
        let row = &self.succ[sa];
        let mut prev = 0.0;
        let mut p = 0.0;
        for &(s, c) in row {
            if s == sb {
                p = c - prev;
            }
            prev = c;
        }
        if sb == self.digit_state() {
            p / self.digits.len() as f64
        } else {
            p
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_share_contexts() {
        let lang = BigramLanguage::new(&LanguageConfig::default()).unwrap();
        let d = lang.digits();
        for &a in lang.regular().iter().take(10) {
            let p0 = lang.transition_prob(a, d[0]);
            for &b in &d[1..] {
                assert_eq!(lang.transition_prob(a, b), p0);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let lang = BigramLanguage::new(&LanguageConfig::default()).unwrap();
        let a = lang.sample(12, &mut rng::stream(&[1]));
        let b = lang.sample(12, &mut rng::stream(&[1]));
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| !Vocabulary::is_special(t) && t < 64));
        for w in a.windows(2) {
            assert!(lang.transition_prob(w[0], w[1]) > 0.0);
        }
    }
}
