//! Synthetic training pairs: rendering, feature extraction, tokenization
//! and the on-disk layout (`<stem>.wav` plus a `<stem>.json` sidecar).

use std::fs;
use std::path::{Path, PathBuf};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError};
use crate::features::{melspec, FeatureError, MelSegment};
use crate::fixtures::{synth_one_shot, TimbreRecipe};
use crate::midi::{parse_smf, write_smf, MidiError, ProgramTrack, Segment};
use crate::sample_bank::{Manifest, ManifestEntry};
use crate::renderer::{example_rng, synth_example, RenderConfig, RenderError, SynthExample, SynthParams};
use crate::sample_bank::SampleBank;
use crate::tokens::{encode_segment, CodecError, DEFAULT_MAX_LEN};
use crate::training::TrainExample;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error("MIDI pool {0} contains no usable tracks")]
    EmptyPool(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RenderedExample {
    pub index: u64,
    pub synth: SynthExample,
    pub mel: MelSegment,
    pub tokens: Vec<usize>,
}

impl RenderedExample {
    pub fn train_example(&self) -> TrainExample {
        TrainExample {
            mel: self.mel.to_tensor(),
            tokens: self.tokens.clone(),
        }
    }
}

/// Example `index` of the stream seeded by `cfg.seed`. Examples are
/// independent, so any subset can be rendered in any order.
pub fn render_example(
    pool: &[ProgramTrack],
    bank: &SampleBank,
    cfg: &RenderConfig,
    index: u64,
) -> Result<RenderedExample, DatasetError> {
    let mut rng = example_rng(cfg.seed, index);
    let synth = synth_example(pool, bank, cfg, &mut rng)?;
    let mel = melspec(&synth.audio)?;
    let tokens = encode_segment(&synth.segment, DEFAULT_MAX_LEN)?;
    Ok(RenderedExample {
        index,
        synth,
        mel,
        tokens,
    })
}

/// Sidecar written next to each WAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub index: u64,
    pub params: SynthParams,
    pub segment: Segment,
    pub tokens: Vec<usize>,
}

pub fn example_stem(index: u64) -> String {
    format!("{index:08}")
}

pub fn write_example(dir: &Path, ex: &RenderedExample) -> Result<(), DatasetError> {
    let stem = example_stem(ex.index);
    audio::write_wav(&dir.join(format!("{stem}.wav")), &ex.synth.audio)?;
    let sidecar = Sidecar {
        index: ex.index,
        params: ex.synth.params.clone(),
        segment: ex.synth.segment.clone(),
        tokens: ex.tokens.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_vec_pretty(&sidecar).map_err(json_err(&path))?;
    fs::write(&path, json).map_err(io_err(&path))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError {
    let path = path.to_path_buf();
    move |source| DatasetError::Io { path, source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DatasetError {
    let path = path.to_path_buf();
    move |source| DatasetError::Json { path, source }
}

/// Files in `dir` whose extension is one of `exts` (case-insensitive), sorted.
pub fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// MIDI files named by a pool manifest: either a directory of `.mid` files
/// or a JSON array of paths relative to the manifest's directory.
pub fn midi_pool_files(manifest: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    if manifest.is_dir() {
        return list_files(manifest, &["mid", "midi"]);
    }
    let text = fs::read(manifest).map_err(io_err(manifest))?;
    let names: Vec<PathBuf> = serde_json::from_slice(&text).map_err(json_err(manifest))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(names.into_iter().map(|n| base.join(n)).collect())
}

/// Every non-empty track of every file in the pool, in manifest order.
pub fn load_midi_pool(manifest: &Path) -> Result<Vec<ProgramTrack>, DatasetError> {
    let mut pool = Vec::new();
    for path in midi_pool_files(manifest)? {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let tracks = parse_smf(&bytes).map_err(|source| DatasetError::Midi { path: path.clone(), source })?;
        pool.extend(tracks.into_iter().filter(|t| !t.notes.is_empty()));
    }
    if pool.is_empty() {
        return Err(DatasetError::EmptyPool(manifest.to_path_buf()));
    }
    Ok(pool)
}

/// Writes one `<stem>.mid` per track plus a `pool.json` manifest.
pub fn write_midi_pool(dir: &Path, pool: &[ProgramTrack]) -> Result<PathBuf, DatasetError> {
    let mut names = Vec::new();
    for (i, track) in pool.iter().enumerate() {
        let name = format!("track{i:04}.mid");
        let path = dir.join(&name);
        fs::write(&path, write_smf(std::slice::from_ref(track))).map_err(io_err(&path))?;
        names.push(name);
    }
    let manifest = dir.join("pool.json");
    let json = serde_json::to_vec_pretty(&names).map_err(json_err(&manifest))?;
    fs::write(&manifest, json).map_err(io_err(&manifest))?;
    Ok(manifest)
}

/// Writes synthetic one-shots for every recipe and pitch plus a bank
/// `manifest.json` loadable by `SampleBank::from_manifest`.
pub fn write_fixture_bank(
    dir: &Path,
    recipes: &[TimbreRecipe],
    pitches: std::ops::RangeInclusive<u8>,
    dur_s: f64,
) -> Result<PathBuf, DatasetError> {
    let mut manifest = Manifest::new();
    for r in recipes {
        let mut files = BTreeMap::new();
        for p in pitches.clone() {
            let name = format!("{}_{p:03}.wav", r.id);
            audio::write_wav(&dir.join(&name), &synth_one_shot(r, p, dur_s))?;
            files.insert(p.to_string(), PathBuf::from(name));
        }
        manifest.insert(r.id.to_string(), ManifestEntry { group: r.group, pitches: files });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(json_err(&path))?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Every `<stem>.json` / `<stem>.wav` pair in `dir`, sorted by stem.
pub fn load_examples(dir: &Path) -> Result<Vec<TrainExample>, DatasetError> {
    list_files(dir, &["json"])?
        .into_iter()
        .filter(|p| p.with_extension("wav").is_file())
        .map(|p| {
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            let sidecar: Sidecar = serde_json::from_slice(&bytes).map_err(json_err(&p))?;
            let audio = audio::read_wav(&p.with_extension("wav"))?;
            Ok(TrainExample {
                mel: melspec(&audio)?.to_tensor(),
                tokens: sidecar.tokens,
            })
        })
        .collect()
}
