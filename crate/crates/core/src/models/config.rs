use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechEncoderConfig {
    pub frame_dim: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub conv_channels: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl SpeechEncoderConfig {
    /// Product of conv strides.
    pub fn downsampling(&self) -> usize {
        self.conv_layers.iter().map(|c| c.stride).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

/// Shapes of every pipeline component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub speech: SpeechEncoderConfig,
    pub projection: ProjectionHeadConfig,
    pub decoder: Option<DecoderConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text: TextEncoderConfig {
                vocab_size: 64,
                dim: 64,
                n_layers: 4,
                n_heads: 4,
                ffn_dim: 128,
                max_len: 32,
                dropout: 0.1,
            },
            speech: SpeechEncoderConfig {
                frame_dim: 16,
                conv_layers: vec![ConvSpec { kernel: 3, stride: 2 }, ConvSpec { kernel: 3, stride: 1 }],
                conv_channels: 32,
                dim: 32,
                n_layers: 3,
                n_heads: 4,
                ffn_dim: 64,
                dropout: 0.1,
            },
            projection: ProjectionHeadConfig {
                in_dim: 32,
                hidden_dim: 64,
                out_dim: 64,
                dropout: 0.1,
            },
            decoder: Some(DecoderConfig {
                n_layers: 2,
                dim: 32,
                n_heads: 4,
                ffn_dim: 64,
                vocab_size: 64,
                max_len: 32,
                dropout: 0.1,
            }),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_rate(name: &str, r: f64) -> Result<()> {
    check((0.0..1.0).contains(&r), || format!("{name} dropout {r} outside [0,1)"))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.text;
        check(t.vocab_size > 4, || {
            "text vocab_size must exceed the 4 special ids".into()
        })?;
        check(t.n_heads > 0 && t.dim % t.n_heads == 0, || {
            format!("text dim {} not divisible by {} heads", t.dim, t.n_heads)
        })?;
        check(t.max_len > 0 && t.n_layers > 0, || {
            "text encoder needs layers and max_len".into()
        })?;
        check_rate("text", t.dropout)?;

        let s = &self.speech;
        check(!s.conv_layers.is_empty(), || "speech encoder needs conv layers".into())?;
        check(s.conv_layers.iter().all(|c| c.kernel > 0 && c.stride > 0), || {
            "conv kernel and stride must be positive".into()
        })?;
        check(s.downsampling() >= 2, || {
            format!("total downsampling {} below 2", s.downsampling())
        })?;
        check(s.n_heads > 0 && s.dim % s.n_heads == 0, || {
            format!("speech dim {} not divisible by {} heads", s.dim, s.n_heads)
        })?;
        check_rate("speech", s.dropout)?;

        let p = &self.projection;
        check(p.in_dim == s.dim, || {
            format!("projection in_dim {} != speech dim {}", p.in_dim, s.dim)
        })?;
        check(p.out_dim == t.dim, || {
            format!("projection out_dim {} != teacher dim {}", p.out_dim, t.dim)
        })?;
        check_rate("projection", p.dropout)?;

        if let Some(d) = &self.decoder {
            check(d.dim == s.dim, || {
                format!("decoder dim {} must equal speech dim {}", d.dim, s.dim)
            })?;
            check(d.vocab_size == t.vocab_size, || {
                "decoder vocab must match text vocab".into()
            })?;
            check(d.n_heads > 0 && d.dim % d.n_heads == 0, || {
                format!("decoder dim {} not divisible by {} heads", d.dim, d.n_heads)
            })?;
            check_rate("decoder", d.dropout)?;
        }
        Ok(())
    }

    /// Canonical text form; used in checkpoints and for config hashes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
