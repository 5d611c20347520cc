//! Synthetic acoustic renderer: each token becomes a run of noisy copies of
//! its prototype frame, passed through a per-speaker affine channel.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticConfig {
    pub frame_dim: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub noise_sigma: f64,
    /// Scale of the random part of each speaker's channel matrix.
    pub channel_scale: f64,
    /// Scale of each speaker's channel offset.
    pub bias_scale: f64,
    /// Noise-only frames added before and after every utterance.
    pub edge_silence: usize,
    pub seed: u64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        AcousticConfig {
            frame_dim: 16,
            d_min: 2,
            d_max: 4,
            noise_sigma: 0.1,
            channel_scale: 0.3,
            bias_scale: 0.3,
            edge_silence: 2,
            seed: 11,
        }
    }
}

/// Frames are stored at single precision on disk; rendering rounds to it so
/// that a disk round trip is lossless.
fn round32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub cfg: AcousticConfig,
    /// `[V × frame_dim]`
    prototypes: Vec<Vec<f64>>,
}

/// Per-speaker affine map `y = A x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl AcousticModel {
    pub fn new(cfg: AcousticConfig, vocab_size: usize) -> Result<Self> {
        if cfg.d_min == 0 || cfg.d_min > cfg.d_max {
            return Err(Error::invalid(format!("duration range [{}, {}]", cfg.d_min, cfg.d_max)));
        }
        if cfg.frame_dim == 0 || !(cfg.noise_sigma >= 0.0) {
            return Err(Error::invalid("frame_dim must be positive and noise_sigma >= 0"));
        }
        let mut r = rng::stream(&[cfg.seed, 0xa0]);
        let prototypes = (0..vocab_size)
            .map(|_| {
                (0..cfg.frame_dim)
                    .map(|_| round32(StandardNormal.sample(&mut r)))
                    .collect()
            })
            .collect();
        Ok(AcousticModel { cfg, prototypes })
    }

    pub fn prototype(&self, token: usize) -> &[f64] {
        &self.prototypes[token]
    }

    pub fn vocab_size(&self) -> usize {
        self.prototypes.len()
    }

    pub fn channel(&self, speaker: u64) -> Channel {
        let d = self.cfg.frame_dim;
        let mut r = rng::stream(&[self.cfg.seed, 0xc4, speaker]);
        let k = self.cfg.channel_scale / (d as f64).sqrt();
        let matrix = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        if i == j {
                            1.0 + k * z
                        } else {
                            k * z
                        }
                    })
                    .collect()
            })
            .collect();
        let offset = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                self.cfg.bias_scale * z
            })
            .collect();
        Channel { matrix, offset }
    }

    /// Renders `tokens` for `speaker`; a pure function of
    /// `(tokens, speaker, utterance_seed)` and the model.
    pub fn render(&self, tokens: &[usize], speaker: u64, utterance_seed: u64) -> Result<Tensor<f64>> {
        self.render_with_sigma(tokens, speaker, utterance_seed, self.cfg.noise_sigma)
    }

    pub fn render_with_sigma(
        &self,
        tokens: &[usize],
        speaker: u64,
        utterance_seed: u64,
        sigma: f64,
    ) -> Result<Tensor<f64>> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot render an empty token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.prototypes.len()) {
            return Err(Error::TargetOutOfVocab {
                target: t,
                vocab: self.prototypes.len(),
            });
        }
        let d = self.cfg.frame_dim;
        let ch = self.channel(speaker);
        let mut r = rng::stream(&[self.cfg.seed, 0x5e, speaker, utterance_seed]);
        let mut raw: Vec<Vec<f64>> = Vec::new();
        let silence = vec![0.0; d];
        let mut push = |base: &[f64], r: &mut rand_chacha::ChaCha8Rng| {
            let frame: Vec<f64> = base
                .iter()
                .map(|&x| {
                    if sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(r);
                        x + sigma * z
                    } else {
                        x
                    }
                })
                .collect();
            raw.push(frame);
        };
        for _ in 0..self.cfg.edge_silence {
            push(&silence, &mut r);
        }
        for &t in tokens {
            let dur = r.random_range(self.cfg.d_min..=self.cfg.d_max);
            for _ in 0..dur {
                push(&self.prototypes[t], &mut r);
            }
        }
        for _ in 0..self.cfg.edge_silence {
            push(&silence, &mut r);
        }
        let mut data = Vec::with_capacity(raw.len() * d);
        for x in &raw {
            for i in 0..d {
                let mut y = ch.offset[i];
                for (j, &xj) in x.iter().enumerate() {
                    y += ch.matrix[i][j] * xj;
                }
                data.push(round32(y));
            }
        }
        Tensor::new(vec![raw.len(), d], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> AcousticModel {
        AcousticModel::new(
            AcousticConfig {
                d_min: 1,
                d_max: 1,
                noise_sigma: 0.0,
                channel_scale: 0.0,
                bias_scale: 0.0,
                edge_silence: 0,
                ..AcousticConfig::default()
            },
            16,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_identity_channel_yields_prototypes() {
        let am = plain();
        let toks = [5, 9, 5, 12];
        let f = am.render(&toks, 3, 1).unwrap();
        assert_eq!(f.shape(), &[4, 16]);
        for (i, &t) in toks.iter().enumerate() {
            assert_eq!(f.row(i), am.prototype(t));
        }
    }

    #[test]
    fn frame_count_within_duration_bounds() {
        let am = AcousticModel::new(
            AcousticConfig {
                edge_silence: 0,
                ..AcousticConfig::default()
            },
            64,
        )
        .unwrap();
        for seed in 0..50 {
            let toks: Vec<usize> = (0..7).map(|i| 4 + (i * 5 + seed) % 60).collect();
            let n = am.render(&toks, seed as u64, seed as u64).unwrap().dims2().0;
            assert!((7 * am.cfg.d_min..=7 * am.cfg.d_max).contains(&n));
        }
    }

    #[test]
    fn rendering_is_deterministic_and_speaker_dependent() {
        let am = AcousticModel::new(AcousticConfig::default(), 64).unwrap();
        let a = am.render(&[4, 20, 30], 1, 9).unwrap();
        assert_eq!(a, am.render(&[4, 20, 30], 1, 9).unwrap());
        assert_ne!(a, am.render(&[4, 20, 30], 2, 9).unwrap());
        assert!(am.render(&[], 1, 1).is_err());
    }
}
