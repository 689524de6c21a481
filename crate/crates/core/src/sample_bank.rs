//! One-shot samples indexed by timbre and pitch, and two-timbre mixing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError, SAMPLE_RATE};
use crate::midi::InstrumentGroup;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("cannot mix pitch {main} with pitch {sub}")]
    PitchMismatch { main: u8, sub: u8 },
    #[error("cannot mix sample rates {main} and {sub}")]
    RateMismatch { main: u32, sub: u32 },
    #[error("mixing weight {0} outside [0, 2]")]
    InvalidAlpha(f64),
    #[error("pitch {0} outside 0..=127")]
    InvalidPitch(u32),
    #[error("sample for {timbre} pitch {pitch} contains non-finite values")]
    NonFinite { timbre: String, pitch: u8 },
    #[error("need two timbres sharing a pitch, bank has {0} usable timbres")]
    InsufficientTimbres(usize),
    #[error("timbre {0} has no samples")]
    NoSamples(String),
}

/// A single-note recording at the bank rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShot {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub pitch: u8,
    pub timbre_id: String,
    pub group: InstrumentGroup,
}

impl OneShot {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

#[derive(Clone, Debug)]
pub struct Timbre {
    pub id: String,
    pub group: InstrumentGroup,
    pub samples: BTreeMap<u8, Arc<OneShot>>,
}

/// Immutable after loading; timbres are kept sorted by id.
#[derive(Clone, Debug, Default)]
pub struct SampleBank {
    timbres: Vec<Timbre>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub group: InstrumentGroup,
    pub pitches: BTreeMap<String, PathBuf>,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

impl SampleBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sample, converting to 16 kHz and scaling down to peak 1 if
    /// it exceeds full scale. Replaces any sample at the same (timbre, pitch).
    pub fn insert(&mut self, timbre_id: &str, group: InstrumentGroup, pitch: u8, audio: &AudioBuffer) -> Result<(), BankError> {
        if pitch > 127 {
            return Err(BankError::InvalidPitch(u32::from(pitch)));
        }
        if !audio.is_finite() {
            return Err(BankError::NonFinite { timbre: timbre_id.into(), pitch });
        }
        let mut samples = audio.resampled(SAMPLE_RATE).samples;
        let p = audio::peak(&samples);
        if p > 1.0 {
            samples.iter_mut().for_each(|v| *v /= p);
        }
        let shot = Arc::new(OneShot {
            samples,
            sample_rate: SAMPLE_RATE,
            pitch,
            timbre_id: timbre_id.into(),
            group,
        });
        let idx = match self.timbres.binary_search_by(|t| t.id.as_str().cmp(timbre_id)) {
            Ok(i) => i,
            Err(i) => {
                self.timbres.insert(
                    i,
                    Timbre {
                        id: timbre_id.into(),
                        group,
                        samples: BTreeMap::new(),
                    },
                );
                i
            }
        };
        self.timbres[idx].group = group;
        self.timbres[idx].samples.insert(pitch, shot);
        Ok(())
    }

    /// Loads a JSON manifest `{timbre_id: {group, pitches: {pitch: path}}}`;
    /// relative paths are resolved against the manifest's directory.
    pub fn from_manifest(path: &Path) -> Result<Self, BankError> {
        let text = std::fs::read_to_string(path).map_err(|source| BankError::Io { path: path.into(), source })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| BankError::Manifest {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut bank = SampleBank::new();
        for (id, entry) in &manifest {
            for (pitch, file) in &entry.pitches {
                let p: u8 = pitch.parse().ok().filter(|&p| p <= 127).ok_or_else(|| BankError::Manifest {
                    path: path.into(),
                    reason: format!("timbre {id}: pitch key {pitch:?} is not a MIDI note number"),
                })?;
                let audio = audio::read_wav(&base.join(file))?;
                bank.insert(id, entry.group, p, &audio)?;
            }
        }
        Ok(bank)
    }

    pub fn timbres(&self) -> &[Timbre] {
        &self.timbres
    }

    pub fn timbre(&self, id: &str) -> Option<&Timbre> {
        self.timbres.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.timbres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timbres.is_empty()
    }
}

/// `main + alpha * sub`, zero-padded to the longer length, then
/// peak-normalized. Silence stays silent.
pub fn mix(main: &OneShot, sub: &OneShot, alpha: f64) -> Result<OneShot, BankError> {
    if main.pitch != sub.pitch {
        return Err(BankError::PitchMismatch { main: main.pitch, sub: sub.pitch });
    }
    if main.sample_rate != sub.sample_rate {
        return Err(BankError::RateMismatch {
            main: main.sample_rate,
            sub: sub.sample_rate,
        });
    }
    if !(0.0..=2.0).contains(&alpha) {
        return Err(BankError::InvalidAlpha(alpha));
    }
    let len = main.samples.len().max(sub.samples.len());
    let at = |x: &[f32], i: usize| f64::from(x.get(i).copied().unwrap_or(0.0));
    let mut mixed: Vec<f64> = (0..len).map(|i| at(&main.samples, i) + alpha * at(&sub.samples, i)).collect();
    audio::peak_normalize(&mut mixed);
    Ok(OneShot {
        samples: mixed.into_iter().map(|v| v as f32).collect(),
        sample_rate: main.sample_rate,
        pitch: main.pitch,
        timbre_id: format!("{}+{}", main.timbre_id, sub.timbre_id),
        group: main.group,
    })
}

/// Two source timbres with a fixed mixing weight. Mixed samples are built
/// on first use and cached per pitch.
#[derive(Debug)]
pub struct MixedTimbre<'b> {
    main: &'b Timbre,
    sub: &'b Timbre,
    alpha: f64,
    shared: Vec<u8>,
    cache: Mutex<BTreeMap<u8, Arc<OneShot>>>,
}

impl<'b> MixedTimbre<'b> {
    pub fn new(main: &'b Timbre, sub: &'b Timbre, alpha: f64) -> Result<Self, BankError> {
        if !(0.0..=2.0).contains(&alpha) {
            return Err(BankError::InvalidAlpha(alpha));
        }
        let shared = main.samples.keys().filter(|p| sub.samples.contains_key(p)).copied().collect();
        Ok(Self {
            main,
            sub,
            alpha,
            shared,
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn main_id(&self) -> &str {
        &self.main.id
    }

    pub fn sub_id(&self) -> &str {
        &self.sub.id
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn group(&self) -> InstrumentGroup {
        self.main.group
    }

    /// Pitches both sources provide.
    pub fn pitches(&self) -> &[u8] {
        &self.shared
    }

    /// Nearest available pitch, ties going to the lower one.
    pub fn nearest_pitch(&self, pitch: u8) -> Option<u8> {
        self.shared
            .iter()
            .copied()
            .min_by_key(|&p| ((i16::from(p) - i16::from(pitch)).abs(), p))
    }

    /// Mixed sample at `pitch`. A missing pitch is derived from the nearest
    /// available one by resampling with ratio `2^(delta/12)`.
    pub fn lookup(&self, pitch: u8) -> Result<Arc<OneShot>, BankError> {
        if pitch > 127 {
            return Err(BankError::InvalidPitch(u32::from(pitch)));
        }
        if let Some(s) = self.cache.lock().unwrap().get(&pitch) {
            return Ok(Arc::clone(s));
        }
        let source = self
            .nearest_pitch(pitch)
            .ok_or_else(|| BankError::NoSamples(format!("{}+{}", self.main.id, self.sub.id)))?;
        let base = match self.cache.lock().unwrap().get(&source) {
            Some(s) => Arc::clone(s),
            None => Arc::new(mix(&self.main.samples[&source], &self.sub.samples[&source], self.alpha)?),
        };
        let out = if source == pitch {
            base.clone()
        } else {
            let step = 2f64.powf((f64::from(pitch) - f64::from(source)) / 12.0);
            let mut samples = audio::resample(&base.samples, step);
            let p = audio::peak(&samples);
            if p > 1.0 {
                samples.iter_mut().for_each(|v| *v /= p);
            }
            Arc::new(OneShot {
                samples,
                pitch,
                ..(*base).clone()
            })
        };
        let mut cache = self.cache.lock().unwrap();
        cache.entry(source).or_insert(base);
        Ok(Arc::clone(cache.entry(pitch).or_insert(out)))
    }
}

/// Picks an ordered pair of distinct timbres sharing at least one pitch,
/// then `alpha ~ U[0, 2]`.
pub fn draw_mixed_timbre<'b, R: Rng + ?Sized>(bank: &'b SampleBank, rng: &mut R) -> Result<MixedTimbre<'b>, BankError> {
    let t = bank.timbres();
    let pairs: Vec<(usize, usize)> = (0..t.len())
        .flat_map(|i| (0..t.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && t[i].samples.keys().any(|p| t[j].samples.contains_key(p)))
        .collect();
    if pairs.is_empty() {
        let usable = t.iter().filter(|x| !x.samples.is_empty()).count();
        return Err(BankError::InsufficientTimbres(usable));
    }
    let (i, j) = pairs[rng.random_range(0..pairs.len())];
    let alpha = rng.random_range(0.0..=2.0);
    MixedTimbre::new(&t[i], &t[j], alpha)
}
