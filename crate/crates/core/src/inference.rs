//! Whole-clip transcription: split into consecutive segments, decode each
//! greedily and join the results.

use synthamt_neural::{NeuralError, ParamSet, TranscriptionModel};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::features::{melspec, FeatureError};
use crate::midi::NoteList;
use crate::tokens::{self, Decoded, SEGMENT_S};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Clone, Debug)]
pub struct Transcription {
    pub notes: NoteList,
    pub segments: Vec<Vec<usize>>,
    pub skipped_tokens: usize,
}

/// Consecutive 2.56 s segments covering `audio`, zero-padded at the end.
pub fn split_segments(audio: &AudioBuffer) -> Vec<AudioBuffer> {
    let audio = if audio.sample_rate == SAMPLE_RATE {
        audio.clone()
    } else {
        audio.resampled(SAMPLE_RATE)
    };
    let n = (SEGMENT_S * f64::from(SAMPLE_RATE)).round() as usize;
    let count = audio.len().div_ceil(n).max(1);
    (0..count)
        .map(|k| {
            let mut s = audio.samples[(k * n).min(audio.len())..((k + 1) * n).min(audio.len())].to_vec();
            s.resize(n, 0.0);
            AudioBuffer::new(s, SAMPLE_RATE)
        })
        .collect()
}

pub fn transcribe_segment(
    model: &TranscriptionModel,
    params: &ParamSet<f32>,
    segment: &AudioBuffer,
) -> Result<Vec<usize>, InferenceError> {
    let mel = melspec(segment)?.to_tensor();
    Ok(model.greedy_transcribe(params, &mel)?)
}

pub fn transcribe_audio(
    model: &TranscriptionModel,
    params: &ParamSet<f32>,
    audio: &AudioBuffer,
) -> Result<Transcription, InferenceError> {
    let segments = split_segments(audio)
        .iter()
        .map(|s| transcribe_segment(model, params, s))
        .collect::<Result<Vec<_>, _>>()?;
    let decoded: Vec<Decoded> = segments.iter().map(|ids| tokens::decode(ids)).collect();
    let starts: Vec<f64> = (0..decoded.len()).map(|k| k as f64 * SEGMENT_S).collect();
    let joined = tokens::join_segments(&decoded, &starts);
    Ok(Transcription {
        notes: NoteList::new(joined.into_notes(), audio.duration_s()),
        skipped_tokens: decoded.iter().map(|d| d.skipped).sum(),
        segments,
    })
}
