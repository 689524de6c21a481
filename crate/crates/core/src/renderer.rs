//! Sample-based rendering of note lists, with release tails and a
//! stochastic limiter.
//!
//! Random draws happen in a fixed order per example: timbre pair, mixing
//! weight, MIDI track, window start (with retries), one release time per
//! rendered note, limiter coin and, if the coin says so, the threshold.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioBuffer, SAMPLE_RATE};
use crate::midi::{self, InstrumentGroup, MidiError, NoteEvent, NoteList, ProgramTrack, Segment};
use crate::sample_bank::{self, BankError, MixedTimbre, SampleBank};
use crate::tokens::SEGMENT_S;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error("velocity {0} outside 1..=127")]
    InvalidVelocity(u32),
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("MIDI pool has no track for instrument group {0}")]
    NoMidiForGroup(InstrumentGroup),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub sample_rate: u32,
    pub segment_s: f64,
    /// Release time range in seconds per instrument group.
    pub release_ranges: BTreeMap<InstrumentGroup, [f64; 2]>,
    pub limit_prob: f64,
    pub limit_range: [f64; 2],
    /// Window draws tried before accepting a window without notes.
    pub window_attempts: u32,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        use InstrumentGroup::*;
        let mut release_ranges = BTreeMap::new();
        for g in [Keyboard, Organ, Mallet, Brass, SynthVocal] {
            release_ranges.insert(g, [0.1, 1.0]);
        }
        for g in [Strings, Reed, Flute] {
            release_ranges.insert(g, [0.8, 1.0]);
        }
        release_ranges.insert(Guitar, [0.1, 0.5]);
        release_ranges.insert(Bass, [0.1, 0.2]);
        Self {
            sample_rate: SAMPLE_RATE,
            segment_s: SEGMENT_S,
            release_ranges,
            limit_prob: 0.8,
            limit_range: [0.5, 1.0],
            window_attempts: 8,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: String| Err(RenderError::Config(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.segment_s > 0.0 && self.segment_s.is_finite()) {
            return bad(format!("segment_s {} must be positive", self.segment_s));
        }
        for g in InstrumentGroup::ALL {
            match self.release_ranges.get(&g) {
                None => return bad(format!("no release range for {g}")),
                Some(&[lo, hi]) if !(0.0 <= lo && lo <= hi && hi.is_finite()) => {
                    return bad(format!("release range for {g} must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"))
                }
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&self.limit_prob) {
            return bad(format!("limit_prob {} outside [0, 1]", self.limit_prob));
        }
        let [lo, hi] = self.limit_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("limit_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        if self.window_attempts == 0 {
            return bad("window_attempts must be at least 1".into());
        }
        Ok(())
    }

    pub fn release_range(&self, group: InstrumentGroup) -> [f64; 2] {
        self.release_ranges.get(&group).copied().unwrap_or([0.1, 1.0])
    }

    pub fn segment_len(&self) -> usize {
        (self.segment_s * f64::from(self.sample_rate)).round() as usize
    }
}

/// Independent generator for example `index` under the master seed.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `log(1 + v/127) / log 2`.
pub fn velocity_amplitude(v: u32) -> Result<f64, RenderError> {
    if !(1..=127).contains(&v) {
        return Err(RenderError::InvalidVelocity(v));
    }
    Ok((1.0 + f64::from(v) / 127.0).ln() / std::f64::consts::LN_2)
}

/// A note's waveform and where it starts, in samples from the note list's
/// time origin.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedNote {
    pub start: i64,
    pub samples: Vec<f64>,
}

/// Renders one note with a given release time. The sample is trimmed to
/// the note length and continued for `release_s` under a linear fade to
/// zero; if the note outlasts the sample, the whole sample is used as is.
pub fn render_note_with_release(
    note: &NoteEvent,
    timbre: &MixedTimbre<'_>,
    sample_rate: u32,
    release_s: f64,
) -> Result<RenderedNote, RenderError> {
    let amp = velocity_amplitude(u32::from(note.velocity))?;
    let shot = timbre.lookup(note.pitch)?;
    let sr = f64::from(sample_rate);
    let note_len = (note.duration_s() * sr).round() as usize;
    let src = &shot.samples;
    let samples = if note_len >= src.len() {
        src.iter().map(|&v| f64::from(v) * amp).collect()
    } else {
        let tail = (release_s * sr).round() as usize;
        let total = (note_len + tail).min(src.len());
        (0..total)
            .map(|i| {
                let gain = if i < note_len {
                    1.0
                } else {
                    (tail - (i - note_len)) as f64 / tail as f64
                };
                f64::from(src[i]) * amp * gain
            })
            .collect()
    };
    Ok(RenderedNote {
        start: (note.onset_s * sr).round() as i64,
        samples,
    })
}

/// Draws the release time for the timbre's group, then renders.
pub fn render_note<R: Rng + ?Sized>(
    note: &NoteEvent,
    timbre: &MixedTimbre<'_>,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<RenderedNote, RenderError> {
    let release = draw_release(timbre.group(), cfg, rng);
    render_note_with_release(note, timbre, cfg.sample_rate, release)
}

pub fn draw_release<R: Rng + ?Sized>(group: InstrumentGroup, cfg: &RenderConfig, rng: &mut R) -> f64 {
    let [lo, hi] = cfg.release_range(group);
    rng.random_range(lo..=hi)
}

/// Sum of the notes' waveforms over `[origin_s, origin_s + len / rate)`,
/// before any normalization. `releases[i]` belongs to `notes[i]`.
pub fn overlay(
    notes: &[NoteEvent],
    releases: &[f64],
    timbre: &MixedTimbre<'_>,
    sample_rate: u32,
    origin_s: f64,
    len: usize,
) -> Result<Vec<f64>, RenderError> {
    assert_eq!(notes.len(), releases.len(), "one release per note");
    let origin = (origin_s * f64::from(sample_rate)).round() as i64;
    let mut buf = vec![0.0f64; len];
    for (note, &rel) in notes.iter().zip(releases) {
        let r = render_note_with_release(note, timbre, sample_rate, rel)?;
        let offset = r.start - origin;
        for (k, v) in r.samples.iter().enumerate() {
            let idx = offset + k as i64;
            if idx >= 0 && (idx as usize) < len {
                buf[idx as usize] += v;
            }
        }
    }
    Ok(buf)
}

/// Peak-normalizes; with probability `limit_prob` then hard-clips at a
/// threshold drawn from `limit_range` and normalizes again. Returns the
/// threshold used, if any.
pub fn finalize<R: Rng + ?Sized>(mut buf: Vec<f64>, cfg: &RenderConfig, rng: &mut R) -> (AudioBuffer, Option<f64>) {
    audio::peak_normalize(&mut buf);
    let limit = rng.random::<f64>() < cfg.limit_prob;
    let threshold = if limit {
        let [lo, hi] = cfg.limit_range;
        let t = rng.random_range(lo..=hi);
        buf.iter_mut().for_each(|v| *v = v.clamp(-t, t));
        audio::peak_normalize(&mut buf);
        Some(t)
    } else {
        None
    };
    let samples = buf.into_iter().map(|v| v as f32).collect();
    (AudioBuffer::new(samples, cfg.sample_rate), threshold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub audio: AudioBuffer,
    pub releases: Vec<f64>,
    pub limit_threshold: Option<f64>,
}

/// Renders a whole note list over `[0, duration_s)`.
pub fn render_segment<R: Rng + ?Sized>(
    notes: &NoteList,
    timbre: &MixedTimbre<'_>,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<RenderOutput, RenderError> {
    let releases: Vec<f64> = notes.notes().iter().map(|_| draw_release(timbre.group(), cfg, rng)).collect();
    let len = (notes.duration_s() * f64::from(cfg.sample_rate)).round() as usize;
    let buf = overlay(notes.notes(), &releases, timbre, cfg.sample_rate, 0.0, len)?;
    let (audio, limit_threshold) = finalize(buf, cfg, rng);
    Ok(RenderOutput {
        audio,
        releases,
        limit_threshold,
    })
}

/// Everything drawn while producing one example, for the sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub main_timbre: String,
    pub sub_timbre: String,
    pub alpha: f64,
    pub group: InstrumentGroup,
    pub midi_index: usize,
    pub program: u8,
    pub window_start_s: f64,
    pub releases: Vec<f64>,
    pub limit_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    pub audio: AudioBuffer,
    /// Ground truth: the MIDI window in segment-local time.
    pub segment: Segment,
    pub params: SynthParams,
}

/// Draws a mixed timbre, a MIDI track of the main timbre's instrument group
/// and a window of it, and renders that window. Notes sounding into the
/// window from before it are rendered from their real onset so that held
/// notes and release tails carry over naturally.
pub fn synth_example<R: Rng + ?Sized>(
    pool: &[ProgramTrack],
    bank: &SampleBank,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<SynthExample, RenderError> {
    let timbre = sample_bank::draw_mixed_timbre(bank, rng)?;
    let group = timbre.group();
    let mut candidates = Vec::new();
    for (i, t) in pool.iter().enumerate() {
        if midi::program_to_group(u32::from(t.program))? == Some(group) {
            candidates.push(i);
        }
    }
    if candidates.is_empty() {
        return Err(RenderError::NoMidiForGroup(group));
    }
    let midi_index = candidates[rng.random_range(0..candidates.len())];
    let track = &pool[midi_index];
    let sr = f64::from(cfg.sample_rate);
    let span = (track.notes.duration_s() - cfg.segment_s).max(0.0);

    let mut window = None;
    for _ in 0..cfg.window_attempts {
        let start = if span > 0.0 {
            (rng.random_range(0.0..=span) * sr).round() / sr
        } else {
            0.0
        };
        let seg = midi::slice_notes(&track.notes, start, cfg.segment_s)?;
        let found = !seg.notes.is_empty();
        window = Some((start, seg));
        if found {
            break;
        }
    }
    let (start, segment) = window.expect("at least one window attempt");

    let [_, max_release] = cfg.release_range(group);
    let end = start + cfg.segment_s;
    let sounding: Vec<NoteEvent> = track
        .notes
        .notes()
        .iter()
        .filter(|n| n.onset_s < end && n.offset_s + max_release > start)
        .copied()
        .collect();
    let releases: Vec<f64> = sounding.iter().map(|_| draw_release(group, cfg, rng)).collect();
    let buf = overlay(&sounding, &releases, &timbre, cfg.sample_rate, start, cfg.segment_len())?;
    let (audio, limit_threshold) = finalize(buf, cfg, rng);
    Ok(SynthExample {
        audio,
        segment,
        params: SynthParams {
            main_timbre: timbre.main_id().into(),
            sub_timbre: timbre.sub_id().into(),
            alpha: timbre.alpha(),
            group,
            midi_index,
            program: track.program,
            window_start_s: start,
            releases,
            limit_threshold,
        },
    })
}
