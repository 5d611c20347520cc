use serde::{Deserialize, Serialize};

use crate::datagen::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::models::config::{DecoderConfig, ModelConfig, ProjectionHeadConfig, SpeechEncoderConfig, TextEncoderConfig};
use crate::models::layers::{sinusoidal, Block, Builder, LayerNorm, Linear};
use crate::numerics::{conv_out_len, ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    tok: crate::numerics::ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    mlm_head: Linear,
    drop: u64,
}

impl TextEncoder {
    fn new<S: Scalar>(bld: &mut Builder<'_, S>, cfg: &TextEncoderConfig) -> Result<Self> {
        let tok = bld.normal("teacher.tok_emb", &[cfg.vocab_size, cfg.dim], 1.0)?;
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Block::new(
                    bld,
                    &format!("teacher.layer{i}"),
                    cfg.dim,
                    cfg.n_heads,
                    cfg.ffn_dim,
                    false,
                    false,
                )
            })
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            cfg: cfg.clone(),
            tok,
            blocks,
            ln_out: LayerNorm::new(bld, "teacher.ln_out", cfg.dim)?,
            mlm_head: Linear::new(bld, "teacher.mlm_head", cfg.dim, cfg.vocab_size)?,
            drop: bld.dropout_id(),
        })
    }

    fn states<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::invalid("text encoder: empty token sequence"));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_len,
            });
        }
        let table = tape.param(p, self.tok);
        let x = tape.embedding(table, tokens)?;
        let pe = tape.constant(sinusoidal(tokens.len(), self.cfg.dim));
        let mut x = tape.add(x, pe)?;
        x = tape.dropout(x, self.cfg.dropout, self.drop)?;
        for b in &self.blocks {
            x = b.forward(tape, p, x, None, self.cfg.dropout)?;
        }
        self.ln_out.forward(tape, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    cfg: SpeechEncoderConfig,
    convs: Vec<Linear>,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    drop: u64,
}

impl SpeechEncoder {
    fn new<S: Scalar>(bld: &mut Builder<'_, S>, cfg: &SpeechEncoderConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = cfg.frame_dim;
        for (i, c) in cfg.conv_layers.iter().enumerate() {
            let last = i + 1 == cfg.conv_layers.len();
            let c_out = if last { cfg.dim } else { cfg.conv_channels };
            convs.push(Linear::new(bld, &format!("student.conv{i}"), c.kernel * c_in, c_out)?);
            c_in = c_out;
        }
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Block::new(
                    bld,
                    &format!("student.layer{i}"),
                    cfg.dim,
                    cfg.n_heads,
                    cfg.ffn_dim,
                    false,
                    false,
                )
            })
            .collect::<Result<_>>()?;
        Ok(SpeechEncoder {
            cfg: cfg.clone(),
            convs,
            blocks,
            ln_out: LayerNorm::new(bld, "student.ln_out", cfg.dim)?,
            drop: bld.dropout_id(),
        })
    }

    /// Number of encoder positions produced from `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        self.cfg
            .conv_layers
            .iter()
            .fold(frames, |t, c| conv_out_len(t, c.kernel, c.stride))
    }

    fn states<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, frames: Var) -> Result<Var> {
        let (t, c) = tape.value(frames).dims2();
        if c != self.cfg.frame_dim {
            return Err(Error::shape(
                "speech encoder",
                format!("frame width {c} != {}", self.cfg.frame_dim),
            ));
        }
        if t < self.cfg.downsampling() {
            return Err(Error::InputTooShort {
                len: t,
                min: self.cfg.downsampling(),
            });
        }
        let mut x = frames;
        for (spec, lin) in self.cfg.conv_layers.iter().zip(&self.convs) {
            let u = tape.unfold(x, spec.kernel, spec.stride)?;
            let h = lin.forward(tape, p, u)?;
            x = tape.gelu(h);
        }
        let (t_out, _) = tape.value(x).dims2();
        let pe = tape.constant(sinusoidal(t_out, self.cfg.dim));
        x = tape.add(x, pe)?;
        x = tape.dropout(x, self.cfg.dropout, self.drop)?;
        for b in &self.blocks {
            x = b.forward(tape, p, x, None, self.cfg.dropout)?;
        }
        self.ln_out.forward(tape, p, x)
    }
}

/// Linear, GELU, linear, dropout, layer norm; applied per position.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    cfg: ProjectionHeadConfig,
    up: Linear,
    down: Linear,
    ln: LayerNorm,
    drop: u64,
}

impl ProjectionHead {
    fn new<S: Scalar>(bld: &mut Builder<'_, S>, cfg: &ProjectionHeadConfig) -> Result<Self> {
        Ok(ProjectionHead {
            cfg: cfg.clone(),
            up: Linear::new(bld, "projection.up", cfg.in_dim, cfg.hidden_dim)?,
            down: Linear::new(bld, "projection.down", cfg.hidden_dim, cfg.out_dim)?,
            ln: LayerNorm::new(bld, "projection.ln", cfg.out_dim)?,
            drop: bld.dropout_id(),
        })
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = self.down.forward(tape, p, h)?;
        let h = tape.dropout(h, self.cfg.dropout, self.drop)?;
        self.ln.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    tok: crate::numerics::ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
    drop: u64,
}

impl Decoder {
    fn new<S: Scalar>(bld: &mut Builder<'_, S>, cfg: &DecoderConfig) -> Result<Self> {
        let tok = bld.normal("decoder.tok_emb", &[cfg.vocab_size, cfg.dim], 1.0)?;
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Block::new(
                    bld,
                    &format!("decoder.layer{i}"),
                    cfg.dim,
                    cfg.n_heads,
                    cfg.ffn_dim,
                    true,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            cfg: cfg.clone(),
            tok,
            blocks,
            ln_out: LayerNorm::new(bld, "decoder.ln_out", cfg.dim)?,
            out: Linear::new(bld, "decoder.out", cfg.dim, cfg.vocab_size)?,
            drop: bld.dropout_id(),
        })
    }

    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, memory: Var, prefix: &[usize]) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::invalid("decoder prefix must start with the start symbol"));
        }
        if prefix.len() > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: prefix.len(),
                max: self.cfg.max_len,
            });
        }
        let table = tape.param(p, self.tok);
        let x = tape.embedding(table, prefix)?;
        let pe = tape.constant(sinusoidal(prefix.len(), self.cfg.dim));
        let mut x = tape.add(x, pe)?;
        x = tape.dropout(x, self.cfg.dropout, self.drop)?;
        for b in &self.blocks {
            x = b.forward(tape, p, x, Some(memory), self.cfg.dropout)?;
        }
        let x = self.ln_out.forward(tape, p, x)?;
        self.out.forward(tape, p, x)
    }
}

/// How a bundle's student-side parameters were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Random,
    Pretrained,
}

/// All parameters of both pipelines plus the optional recognition decoder.
#[derive(Clone, Debug)]
pub struct ModelBundle<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    teacher: TextEncoder,
    student: SpeechEncoder,
    projection: ProjectionHead,
    decoder: Option<Decoder>,
}

/// Output of the student encoder before the projection head.
pub struct SpeechStates {
    pub states: Var,
    pub mask: Vec<bool>,
}

impl<S: Scalar> ModelBundle<S> {
    /// Fresh bundle with every parameter drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut drop = 0u64;
        let teacher = TextEncoder::new(
            &mut Builder::new(&mut params, seed, ParamGroup::Teacher, &mut drop),
            &config.text,
        )?;
        let student = SpeechEncoder::new(
            &mut Builder::new(&mut params, seed, ParamGroup::Student, &mut drop),
            &config.speech,
        )?;
        let projection = ProjectionHead::new(
            &mut Builder::new(&mut params, seed, ParamGroup::Projection, &mut drop),
            &config.projection,
        )?;
        let decoder = match &config.decoder {
            Some(d) => Some(Decoder::new(
                &mut Builder::new(&mut params, seed, ParamGroup::Decoder, &mut drop),
                d,
            )?),
            None => None,
        };
        debug_assert!(params.names_unique());
        Ok(ModelBundle {
            config,
            params,
            teacher,
            student,
            projection,
            decoder,
        })
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.text.dim
    }

    pub fn student(&self) -> &SpeechEncoder {
        &self.student
    }

    // ── tape-level forward passes ───────────────────────────────────────

    /// Teacher states `[T × dim_t]`.
    pub fn text_states(&self, tape: &mut Tape<S>, tokens: &[usize]) -> Result<Var> {
        self.teacher.states(tape, &self.params, tokens)
    }

    /// Unit-norm sentence embedding of a token sequence.
    pub fn text_embedding(&self, tape: &mut Tape<S>, tokens: &[usize]) -> Result<Var> {
        let h = self.text_states(tape, tokens)?;
        let pooled = tape.mean_pool_masked(h, &vec![true; tokens.len()])?;
        tape.l2_normalize(pooled)
    }

    /// Masked-token prediction logits `[T × V]`.
    pub fn mlm_logits(&self, tape: &mut Tape<S>, tokens: &[usize]) -> Result<Var> {
        let h = self.text_states(tape, tokens)?;
        self.teacher.mlm_head.forward(tape, &self.params, h)
    }

    /// Student encoder states and the mask of valid downsampled positions.
    pub fn speech_states(&self, tape: &mut Tape<S>, frames: &Tensor<S>) -> Result<SpeechStates> {
        let x = tape.constant(frames.clone());
        let states = self.student.states(tape, &self.params, x)?;
        let (t_out, _) = tape.value(states).dims2();
        let valid = self.student.output_len(frames.dims2().0);
        debug_assert_eq!(valid, t_out);
        let mask = (0..t_out).map(|i| i < valid).collect();
        Ok(SpeechStates { states, mask })
    }

    /// Projection head, masked mean pool and normalization over student states.
    pub fn speech_embedding_from(&self, tape: &mut Tape<S>, st: &SpeechStates) -> Result<Var> {
        let h = self.projection.forward(tape, &self.params, st.states)?;
        let pooled = tape.mean_pool_masked(h, &st.mask)?;
        tape.l2_normalize(pooled)
    }

    pub fn speech_embedding(&self, tape: &mut Tape<S>, frames: &Tensor<S>) -> Result<Var> {
        let st = self.speech_states(tape, frames)?;
        self.speech_embedding_from(tape, &st)
    }

    /// Decoder logits `[len(prefix) × V]` attending to `states`.
    pub fn decoder_logits(&self, tape: &mut Tape<S>, states: Var, prefix: &[usize]) -> Result<Var> {
        let dec = self.decoder.as_ref().ok_or(Error::MissingDecoder)?;
        dec.logits(tape, &self.params, states, prefix)
    }

    // ── eval-mode conveniences ──────────────────────────────────────────

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Vec<S>> {
        let mut tape = Tape::eval();
        let e = self.text_embedding(&mut tape, tokens)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn encode_speech(&self, frames: &Tensor<S>) -> Result<Vec<S>> {
        let mut tape = Tape::eval();
        let e = self.speech_embedding(&mut tape, frames)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Next-token logits after `prefix` (which starts with the start symbol).
    pub fn decode_asr_step(&self, frames: &Tensor<S>, prefix: &[usize]) -> Result<Vec<S>> {
        if self.decoder.is_none() {
            return Err(Error::MissingDecoder);
        }
        let mut tape = Tape::eval();
        let st = self.speech_states(&mut tape, frames)?;
        let l = self.decoder_logits(&mut tape, st.states, prefix)?;
        let v = tape.value(l);
        Ok(v.row(v.dims2().0 - 1).to_vec())
    }

    /// Greedy transcription. Stops at the end symbol or after `max_len`
    /// tokens; the flag reports truncation.
    pub fn greedy_decode(&self, frames: &Tensor<S>, max_len: usize) -> Result<(Vec<usize>, bool)> {
        let dec = self.decoder.as_ref().ok_or(Error::MissingDecoder)?;
        let limit = max_len.min(dec.cfg.max_len - 1);
        let mut tape = Tape::eval();
        let st = self.speech_states(&mut tape, frames)?;
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < limit {
            // decoder nodes are appended to one tape; encoder states are reused
            let l = dec.logits(&mut tape, &self.params, st.states, &prefix)?;
            let v = tape.value(l);
            let last = v.row(v.dims2().0 - 1);
            let next = argmax(last);
            if next == EOS {
                return Ok((out, false));
            }
            out.push(next);
            prefix.push(next);
        }
        Ok((out, true))
    }
}

pub(crate) fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
