//! Mono audio buffers, WAV I/O and band-limited resampling.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported WAV encoding ({detail})")]
    Unsupported { path: PathBuf, detail: String },
    #[error("audio contains non-finite samples")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f32 {
        peak(&self.samples)
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|x| x.is_finite())
    }

    /// Converts to `rate` with windowed-sinc interpolation.
    pub fn resampled(&self, rate: u32) -> AudioBuffer {
        if rate == self.sample_rate {
            return self.clone();
        }
        let step = f64::from(self.sample_rate) / f64::from(rate);
        AudioBuffer::new(resample(&self.samples, step), rate)
    }
}

pub fn peak(x: &[f32]) -> f32 {
    x.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Scales to max-abs 1; silent input stays silent.
pub fn peak_normalize(x: &mut [f64]) {
    let p = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if p > 0.0 {
        let inv = 1.0 / p;
        x.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Reads a PCM (8/16/24/32-bit integer) or 32-bit float WAV file,
/// averaging channels to mono. The native sample rate is kept.
pub fn read_wav(path: &Path) -> Result<AudioBuffer, AudioError> {
    let wrap = |source| AudioError::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wrap)?,
        (hound::SampleFormat::Int, bits @ 1..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(wrap)?
        }
        (fmt, bits) => {
            return Err(AudioError::Unsupported {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let samples: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
        .collect();
    if !samples.iter().all(|v| v.is_finite()) {
        return Err(AudioError::NonFinite);
    }
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<(), AudioError> {
    let wrap = |source| AudioError::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        w.write_sample(s).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

/// Zero crossings of the sinc kernel on each side of the output sample.
const SINC_ZEROS: f64 = 24.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Reads `x` at positions `0, step, 2*step, ...` with a Hann-windowed sinc
/// kernel. For `step > 1` the cutoff is lowered to `1/step` to avoid
/// aliasing. A `step` of `2^(d/12)` shifts pitch up by `d` semitones and
/// shortens the signal by the same factor.
pub fn resample(x: &[f32], step: f64) -> Vec<f32> {
    assert!(step.is_finite() && step > 0.0, "resample step must be positive");
    if x.is_empty() {
        return Vec::new();
    }
    let cutoff = (1.0 / step).min(1.0);
    let radius = SINC_ZEROS / cutoff;
    let out_len = (x.len() as f64 / step).ceil() as usize;
    let n = x.len() as i64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let t = i as f64 * step;
        let lo = ((t - radius).ceil() as i64).max(0);
        let hi = ((t + radius).floor() as i64).min(n - 1);
        let mut acc = 0.0f64;
        for k in lo..=hi {
            let d = t - k as f64;
            let w = 0.5 * (1.0 + (PI * d / radius).cos());
            acc += f64::from(x[k as usize]) * cutoff * sinc(cutoff * d) * w;
        }
        out.push(acc as f32);
    }
    out
}
