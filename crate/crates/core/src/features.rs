//! Log-mel spectrogram front end.
//!
//! Centered STFT (reflect padding) with a periodic Hann window, magnitude
//! spectrum, HTK-scale triangular filters without area normalization, and
//! a natural log floored at `1e-5`.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use synthamt_neural::Tensor;
use thiserror::Error;

use crate::audio::AudioBuffer;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("expected {expected} samples at {expected_rate} Hz, got {len} at {rate} Hz")]
    Shape {
        expected: usize,
        expected_rate: u32,
        len: usize,
        rate: u32,
    },
    #[error("invalid mel config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub floor: f64,
    pub n_frames: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 2048,
            hop: 160,
            n_mels: 384,
            fmin: 0.0,
            fmax: 8000.0,
            floor: 1e-5,
            n_frames: 256,
        }
    }
}

impl MelConfig {
    pub fn n_samples(&self) -> usize {
        self.n_frames * self.hop
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 || self.n_frames == 0 {
            return Err(FeatureError::Config("sizes must be positive".into()));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(FeatureError::Config(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got {}..{}",
                self.fmin, self.fmax
            )));
        }
        if !(self.floor > 0.0) {
            return Err(FeatureError::Config("floor must be positive".into()));
        }
        if self.n_samples() <= self.n_fft / 2 {
            return Err(FeatureError::Config("segment too short for reflect padding".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Left edge, centre and right edge in Hz of each filter.
pub fn filter_edges(cfg: &MelConfig) -> Vec<[f64; 3]> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    pts.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

/// Row-major `n_frames x n_mels` log-mel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSegment {
    pub n_frames: usize,
    pub n_mels: usize,
    pub data: Vec<f32>,
}

impl MelSegment {
    pub fn get(&self, frame: usize, bin: usize) -> f32 {
        self.data[frame * self.n_mels + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(self.n_frames, self.n_mels, self.data.clone()).expect("consistent shape")
    }

    /// NumPy `.npy` (format 1.0, little-endian float32, C order).
    pub fn write_npy(&self, path: &Path) -> Result<(), FeatureError> {
        let mut header = format!(
            "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}",
            self.n_frames, self.n_mels
        );
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"\x93NUMPY\x01\x00")?;
        f.write_all(&(header.len() as u16).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }
}

pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let bin_hz = f64::from(cfg.sample_rate) / n as f64;
        let filters = filter_edges(&cfg)
            .into_iter()
            .map(|[lo, c, hi]| {
                let weights: Vec<(usize, f64)> = (0..=n / 2)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match weights.first() {
                    Some(&(first, _)) => (first, weights.into_iter().map(|(_, w)| w).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self { cfg, window, filters, fft })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Filter weights as a dense `n_mels x (n_fft/2 + 1)` matrix.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let bins = self.cfg.n_fft / 2 + 1;
        self.filters
            .iter()
            .map(|(first, w)| {
                let mut row = vec![0.0; bins];
                row[*first..first + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    pub fn extract(&self, audio: &AudioBuffer) -> Result<MelSegment, FeatureError> {
        let cfg = &self.cfg;
        if audio.sample_rate != cfg.sample_rate || audio.len() != cfg.n_samples() {
            return Err(FeatureError::Shape {
                expected: cfg.n_samples(),
                expected_rate: cfg.sample_rate,
                len: audio.len(),
                rate: audio.sample_rate,
            });
        }
        let x = &audio.samples;
        let pad = cfg.n_fft / 2;
        let len = x.len() as i64;
        // Reflect without repeating the edge sample, as numpy's "reflect".
        let at = |i: i64| -> f64 {
            let j = if i < 0 {
                -i
            } else if i >= len {
                2 * (len - 1) - i
            } else {
                i
            };
            f64::from(x[j as usize])
        };
        let mut data = Vec::with_capacity(cfg.n_frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0f64; cfg.n_fft / 2 + 1];
        for t in 0..cfg.n_frames {
            let start = (t * cfg.hop) as i64 - pad as i64;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(at(start + i as i64) * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for (first, w) in &self.filters {
                let e: f64 = w.iter().zip(&mag[*first..]).map(|(a, b)| a * b).sum();
                data.push(e.max(cfg.floor).ln() as f32);
            }
        }
        Ok(MelSegment {
            n_frames: cfg.n_frames,
            n_mels: cfg.n_mels,
            data,
        })
    }
}

fn default_extractor() -> &'static MelExtractor {
    static EXTRACTOR: OnceLock<MelExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(|| MelExtractor::new(MelConfig::default()).expect("default config is valid"))
}

/// 256 x 384 log-mel matrix of a 2.56 s, 16 kHz segment.
pub fn melspec(audio: &AudioBuffer) -> Result<MelSegment, FeatureError> {
    default_extractor().extract(audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_floor_everywhere() {
        let m = melspec(&AudioBuffer::silence(40_960, 16_000)).unwrap();
        assert_eq!((m.n_frames, m.n_mels), (256, 384));
        let floor = (1e-5f64).ln() as f32;
        assert!(m.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn wrong_length_or_rate_is_rejected() {
        assert!(melspec(&AudioBuffer::silence(40_959, 16_000)).is_err());
        assert!(melspec(&AudioBuffer::silence(40_960, 22_050)).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 100.0, 440.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 999.985_6).abs() < 1e-3);
    }

    #[test]
    fn npy_header_is_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.npy");
        let m = MelSegment {
            n_frames: 2,
            n_mels: 3,
            data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        };
        m.write_npy(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes.len(), 10 + hlen + 24);
        assert_eq!(&bytes[bytes.len() - 4..], &5.0f32.to_le_bytes());
    }
}
