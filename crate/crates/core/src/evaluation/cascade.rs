//! Cascade baseline: transcribe with the recognizer, then embed the
//! transcription with the teacher.

use crate::datagen::vocab::MASK;
use crate::error::{Error, Result};
use crate::{ModelBundle, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub embedding: Vec<f64>,
    pub transcript: Vec<usize>,
    /// Decoding hit the length cap before emitting the end symbol.
    pub truncated: bool,
    /// Nothing was decoded; the mask symbol was embedded instead.
    pub empty: bool,
}

/// Greedy decode (capped at twice the encoder length) followed by the
/// teacher's text embedding.
pub fn cascade_embed(frames: &Tensor, asr: &ModelBundle, teacher: &ModelBundle) -> Result<CascadeOutput> {
    if !asr.has_decoder() {
        return Err(Error::MissingDecoder);
    }
    let cap = 2 * asr.student().output_len(frames.dims2().0);
    let (mut transcript, mut truncated) = asr.greedy_decode(frames, cap)?;
    let max_len = teacher.config.text.max_len;
    if transcript.len() > max_len {
        transcript.truncate(max_len);
        truncated = true;
    }
    let empty = transcript.is_empty();
    let embedding = if empty {
        teacher.encode_text(&[MASK])?
    } else {
        teacher.encode_text(&transcript)?
    };
    Ok(CascadeOutput {
        embedding,
        transcript,
        truncated,
        empty,
    })
}
