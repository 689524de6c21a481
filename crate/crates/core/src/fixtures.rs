//! Self-contained synthetic data: harmonic one-shot timbres and random
//! monophonic MIDI, for tests, demos and desk-scale experiments.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::Rng;

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::midi::{InstrumentGroup, NoteEvent, NoteList, ProgramTrack};
use crate::sample_bank::SampleBank;

/// Spectral and envelope recipe of one synthetic instrument.
#[derive(Clone, Debug)]
pub struct TimbreRecipe {
    pub id: &'static str,
    pub group: InstrumentGroup,
    /// Amplitude of harmonic `h` (1-based) is `h^-rolloff`.
    pub rolloff: f64,
    pub odd_only: bool,
    pub attack_s: f64,
    /// Exponential decay rate in 1/s.
    pub decay: f64,
}

pub const DEFAULT_RECIPES: [TimbreRecipe; 3] = [
    TimbreRecipe {
        id: "pluck",
        group: InstrumentGroup::Guitar,
        rolloff: 1.2,
        odd_only: false,
        attack_s: 0.003,
        decay: 3.0,
    },
    TimbreRecipe {
        id: "reedy",
        group: InstrumentGroup::Reed,
        rolloff: 1.0,
        odd_only: true,
        attack_s: 0.01,
        decay: 0.8,
    },
    TimbreRecipe {
        id: "mellow",
        group: InstrumentGroup::Keyboard,
        rolloff: 2.2,
        odd_only: false,
        attack_s: 0.006,
        decay: 1.5,
    },
];

pub fn midi_to_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

/// One note of `recipe` at `pitch`, `dur_s` long, peak 0.9.
pub fn synth_one_shot(recipe: &TimbreRecipe, pitch: u8, dur_s: f64) -> AudioBuffer {
    let sr = f64::from(SAMPLE_RATE);
    let f0 = midi_to_hz(pitch);
    let n = (dur_s * sr).round() as usize;
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64)
        .take_while(|h| h * f0 < 0.45 * sr)
        .filter(|&h| !recipe.odd_only || h as u64 % 2 == 1)
        .map(|h| (h * f0, h.powf(-recipe.rolloff)))
        .collect();
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = (t / recipe.attack_s).min(1.0) * (-recipe.decay * t).exp();
            env * harmonics.iter().map(|&(f, a)| a * (2.0 * PI * f * t).sin()).sum::<f64>()
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    AudioBuffer::new(x.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
}

/// Bank with every recipe sampled at every pitch of `pitches`.
pub fn fixture_bank(recipes: &[TimbreRecipe], pitches: RangeInclusive<u8>, dur_s: f64) -> SampleBank {
    let mut bank = SampleBank::new();
    for r in recipes {
        for p in pitches.clone() {
            bank.insert(r.id, r.group, p, &synth_one_shot(r, p, dur_s))
                .expect("synthetic samples are valid");
        }
    }
    bank
}

/// Parameters of [`random_monophonic_track`].
#[derive(Clone, Debug)]
pub struct MelodySpec {
    pub pitches: RangeInclusive<u8>,
    pub duration_s: RangeInclusive<f64>,
    pub gap_s: RangeInclusive<f64>,
    pub velocity: RangeInclusive<u8>,
    pub length_s: f64,
}

impl Default for MelodySpec {
    fn default() -> Self {
        Self {
            pitches: 48..=84,
            duration_s: 0.2..=0.8,
            gap_s: 0.0..=0.3,
            velocity: 40..=127,
            length_s: 10.24,
        }
    }
}

/// One voice: notes with random pitch, length and rest until `length_s`.
pub fn random_monophonic_track<R: Rng + ?Sized>(spec: &MelodySpec, program: u8, rng: &mut R) -> ProgramTrack {
    let mut notes = Vec::new();
    let mut t = rng.random_range(spec.gap_s.clone());
    loop {
        let dur = rng.random_range(spec.duration_s.clone());
        if t + dur > spec.length_s {
            break;
        }
        let pitch = rng.random_range(spec.pitches.clone());
        let velocity = rng.random_range(spec.velocity.clone());
        notes.push(NoteEvent::new(pitch, t, t + dur, velocity, program).expect("generated note is valid"));
        t += dur + rng.random_range(spec.gap_s.clone());
    }
    ProgramTrack {
        program,
        notes: NoteList::new(notes, spec.length_s),
    }
}

/// Lowest 1-based General MIDI program of `group`.
pub fn group_program(group: InstrumentGroup) -> u8 {
    (1..=128u32)
        .find(|&p| crate::midi::program_to_group(p).ok().flatten() == Some(group))
        .expect("every group has a program") as u8
}

/// `count` melodies, cycling over the groups of `recipes` so that every
/// timbre has MIDI of its group to play.
pub fn fixture_pool<R: Rng + ?Sized>(
    recipes: &[TimbreRecipe],
    spec: &MelodySpec,
    count: usize,
    rng: &mut R,
) -> Vec<ProgramTrack> {
    let mut programs: Vec<u8> = recipes.iter().map(|r| group_program(r.group)).collect();
    programs.sort_unstable();
    programs.dedup();
    (0..count)
        .map(|i| random_monophonic_track(spec, programs[i % programs.len()], rng))
        .collect()
}
