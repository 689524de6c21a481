use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::{error, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use synthamt::audio::{read_wav, AudioBuffer, SAMPLE_RATE};
use synthamt::dataset::{
    example_stem, list_files, load_examples, load_midi_pool, midi_pool_files, render_example, write_example,
    write_fixture_bank, write_midi_pool,
};
use synthamt::features::melspec;
use synthamt::fixtures::{fixture_pool, MelodySpec, DEFAULT_RECIPES};
use synthamt::inference::{split_segments, transcribe_audio};
use synthamt::metrics::{evaluate as eval_pair, format_table, mean_report, EvalReport, MatchConfig};
use synthamt::midi::{parse_smf, program_to_group, write_smf, NoteList, ProgramTrack};
use synthamt::renderer::RenderError;
use synthamt::sample_bank::{Manifest, SampleBank};
use synthamt::training::{FineTuneMode, LossReport, Realifier, TrainConfig, TrainExample, Trainer};
use synthamt_neural::{Checkpoint, ModelConfig, Tensor};

use crate::config::{require_file, RunConfig};
use crate::error::{io, CliError, Result};
use crate::manifest::RunManifest;

pub const LOSS_LOG: &str = "losses.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const INDEX: &str = "index.json";

pub struct Env {
    pub threads: usize,
    pub log_every: u64,
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// The MIDI pool and sample bank named in the render section, checked for
/// compatibility, plus every file they were read from.
struct RenderInputs {
    pool: Vec<ProgramTrack>,
    bank: SampleBank,
    files: Vec<PathBuf>,
}

fn render_inputs(cfg: &RunConfig) -> Result<RenderInputs> {
    let pool_path = cfg.render.midi_pool.as_deref().ok_or(CliError::Required("render.midi_pool"))?;
    let bank_path = cfg.render.sample_bank.as_deref().ok_or(CliError::Required("render.sample_bank"))?;
    require_file("MIDI pool", pool_path)?;
    require_file("sample bank manifest", bank_path)?;
    let pool = load_midi_pool(pool_path)?;
    let bank = SampleBank::from_manifest(bank_path)?;
    if bank.is_empty() {
        return Err(CliError::Invalid(format!("sample bank {} has no timbres", bank_path.display())));
    }
    let groups: BTreeSet<_> =
        pool.iter().filter_map(|t| program_to_group(u32::from(t.program)).ok().flatten()).collect();
    for t in bank.timbres() {
        if !groups.contains(&t.group) {
            return Err(RenderError::NoMidiForGroup(t.group).into());
        }
    }
    let mut files = midi_pool_files(pool_path)?;
    if pool_path.is_file() {
        files.push(pool_path.into());
    }
    files.push(bank_path.into());
    let text = fs::read(bank_path).map_err(io(bank_path))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| CliError::Config {
        path: bank_path.into(),
        reason: e.to_string(),
    })?;
    let base = bank_path.parent().unwrap_or(Path::new(""));
    for entry in manifest.values() {
        files.extend(entry.pitches.values().map(|p| base.join(p)));
    }
    Ok(RenderInputs { pool, bank, files })
}

#[derive(Serialize)]
struct IndexEntry {
    index: u64,
    wav: String,
    json: String,
    main_timbre: String,
    sub_timbre: String,
    group: String,
    notes: usize,
    tokens: usize,
}

#[derive(Serialize)]
struct Index {
    seed: u64,
    count: u64,
    examples: Vec<IndexEntry>,
}

pub fn render(cfg: &RunConfig, out: &Path, env: &Env) -> Result<RunManifest> {
    cfg.validate()?;
    let inputs = render_inputs(cfg)?;
    let mut manifest = RunManifest::new("render", cfg.seed, env.threads, config_value(cfg), inputs.files.clone())?;
    create_out(out)?;
    let rcfg = &cfg.render.renderer;
    let examples: Vec<IndexEntry> = (0..cfg.render.count)
        .into_par_iter()
        .map(|i| {
            let ex = render_example(&inputs.pool, &inputs.bank, rcfg, i)?;
            write_example(out, &ex)?;
            let stem = example_stem(i);
            Ok(IndexEntry {
                index: i,
                wav: format!("{stem}.wav"),
                json: format!("{stem}.json"),
                main_timbre: ex.synth.params.main_timbre.clone(),
                sub_timbre: ex.synth.params.sub_timbre.clone(),
                group: ex.synth.params.group.to_string(),
                notes: ex.synth.segment.notes.len(),
                tokens: ex.tokens.len(),
            })
        })
        .collect::<Result<_>>()?;
    for e in &examples {
        manifest.artifacts.push(out.join(&e.wav));
        manifest.artifacts.push(out.join(&e.json));
    }
    let index = Index {
        seed: rcfg.seed,
        count: cfg.render.count,
        examples,
    };
    let path = out.join(INDEX);
    fs::write(&path, serde_json::to_vec_pretty(&index).expect("index serializes")).map_err(io(&path))?;
    manifest.artifacts.push(path);
    manifest.write(out)?;
    info!("rendered {} examples into {}", cfg.render.count, out.display());
    Ok(manifest)
}

/// Every regular file in `dir` with one of `exts`, or a missing-input error.
fn files_in(what: &'static str, dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Missing { what, path: dir.into() });
    }
    Ok(list_files(dir, exts)?)
}

/// Compares the architecture requested by the config with a checkpoint's.
fn check_model(path: &Path, ck: &Checkpoint, wanted: Option<&ModelConfig>) -> Result<ModelConfig> {
    let found: ModelConfig = serde_json::from_value(ck.config["model"].clone()).map_err(|e| CliError::Version {
        path: path.into(),
        found: format!("unreadable model section ({e})"),
        expected: "a model configuration".into(),
    })?;
    match wanted {
        Some(w) if *w != found => Err(CliError::Version {
            path: path.into(),
            found: serde_json::to_string(&found).expect("serializes"),
            expected: serde_json::to_string(w).expect("serializes"),
        }),
        _ => Ok(found),
    }
}

fn check_optim(path: &Path, ck: &Checkpoint, wanted: &TrainConfig) -> Result<()> {
    let found: Option<TrainConfig> = serde_json::from_value(ck.config["train"].clone()).ok();
    if found.as_ref() != Some(wanted) {
        return Err(CliError::Version {
            path: path.into(),
            found: format!("training settings {}", ck.config["train"]),
            expected: format!("training settings {}", serde_json::to_string(wanted).expect("serializes")),
        });
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file("checkpoint", path)?;
    Ok(Checkpoint::load(path)?)
}

/// JSON-lines loss log. When resuming, records at or after `from_step`
/// are dropped so that the file matches an uninterrupted run.
struct LossLog(fs::File);

impl LossLog {
    fn open(path: &Path, from_step: u64) -> Result<Self> {
        let mut keep = Vec::new();
        if from_step > 0 && path.exists() {
            let f = fs::File::open(path).map_err(io(path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io(path))?;
                let step = serde_json::from_str::<LossReport>(&line).map(|r| r.step).unwrap_or(u64::MAX);
                if step < from_step {
                    keep.push(line);
                }
            }
        }
        let mut f = fs::File::create(path).map_err(io(path))?;
        for line in keep {
            writeln!(f, "{line}").map_err(io(path))?;
        }
        Ok(Self(f))
    }

    fn push(&mut self, r: &LossReport, path: &Path) -> Result<()> {
        writeln!(self.0, "{}", serde_json::to_string(r).expect("report serializes")).map_err(io(path))
    }
}

fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.ckpt")
}

/// Runs `trainer` up to `steps`, logging and checkpointing as it goes.
fn run_loop(
    trainer: &mut Trainer,
    steps: u64,
    every: u64,
    out: &Path,
    env: &Env,
    manifest: &mut RunManifest,
    mut next: impl FnMut(&mut Trainer) -> Result<LossReport>,
) -> Result<()> {
    let log_path = out.join(LOSS_LOG);
    let mut log = LossLog::open(&log_path, trainer.step)?;
    manifest.artifacts.push(log_path.clone());
    while trainer.step < steps {
        let r = next(trainer)?;
        log.push(&r, &log_path)?;
        if env.log_every > 0 && (r.step % env.log_every == 0 || trainer.step == steps) {
            info!(
                "step {} ce {:.4} disc {:.4} adv {:.4}",
                r.step, r.transcription_ce, r.disc_loss, r.adv_loss
            );
        }
        if every > 0 && trainer.step % every == 0 {
            let p = out.join(checkpoint_name(trainer.step));
            trainer.save(&p)?;
            manifest.artifacts.push(p);
        }
    }
    let p = out.join(FINAL_CHECKPOINT);
    trainer.save(&p)?;
    manifest.artifacts.push(p);
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, env: &Env) -> Result<RunManifest> {
    cfg.validate()?;
    let resumed = resume
        .map(|p| {
            let ck = load_checkpoint(p)?;
            check_model(p, &ck, cfg.model.as_ref())?;
            check_optim(p, &ck, &cfg.train.optim)?;
            Ok::<_, CliError>((p, ck))
        })
        .transpose()?;
    enum Source {
        Disk(Vec<TrainExample>),
        Stream(RenderInputs),
    }
    let (source, mut inputs) = match &cfg.train.data {
        Some(dir) => {
            let files = files_in("training data directory", dir, &["wav", "json"])?;
            let pool = load_examples(dir)?;
            if pool.is_empty() {
                return Err(CliError::Invalid(format!("{} contains no rendered examples", dir.display())));
            }
            (Source::Disk(pool), files)
        }
        None => {
            let r = render_inputs(cfg)?;
            let files = r.files.clone();
            (Source::Stream(r), files)
        }
    };
    let mut trainer = match &resumed {
        Some((p, ck)) => {
            inputs.push(p.to_path_buf());
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(cfg.model.clone().unwrap_or_default(), cfg.train.optim.clone())?,
    };
    let mut manifest = RunManifest::new("train", cfg.seed, env.threads, config_value(cfg), inputs)?;
    create_out(out)?;
    let (steps, every) = (cfg.train.steps, cfg.train.checkpoint_every);
    info!("training {} parameters from step {} to {steps}", trainer.params.num_values(), trainer.step);
    match source {
        Source::Disk(pool) => run_loop(&mut trainer, steps, every, out, env, &mut manifest, |t| Ok(t.pretrain(&pool)?))?,
        Source::Stream(r) => {
            let batch = cfg.train.optim.batch_size as u64;
            let rcfg = &cfg.render.renderer;
            let start = trainer.step;
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Result<Vec<TrainExample>>>(cfg.train.queue);
                s.spawn(|| {
                    let tx = tx;
                    for step in start..steps {
                        let b = (0..batch)
                            .into_par_iter()
                            .map(|k| Ok(render_example(&r.pool, &r.bank, rcfg, step * batch + k)?.train_example()))
                            .collect::<Result<Vec<_>>>();
                        let failed = b.is_err();
                        if tx.send(b).is_err() || failed {
                            break;
                        }
                    }
                });
                let res = run_loop(&mut trainer, steps, every, out, env, &mut manifest, |t| {
                    let b = rx.recv().expect("producer yields one batch per step")?;
                    Ok(t.pretrain_batch(&b)?)
                });
                drop(rx);
                res
            })?;
        }
    }
    manifest.write(out)?;
    Ok(manifest)
}

/// Real recordings cut into model-sized segments.
fn real_segments(dir: &Path, realifier: Option<&Realifier>, seed: u64) -> Result<(Vec<Tensor<f32>>, Vec<PathBuf>)> {
    let files = files_in("real-audio directory", dir, &["wav"])?;
    if files.is_empty() {
        return Err(CliError::Invalid(format!("real-audio directory {} has no WAV files", dir.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mels = Vec::new();
    for f in &files {
        let mut audio = read_wav(f).map_err(synthamt::dataset::DatasetError::from)?.resampled(SAMPLE_RATE);
        if let Some(r) = realifier {
            audio = r.apply(&audio, &mut rng)?;
        }
        for seg in split_segments(&audio) {
            mels.push(melspec(&seg).map_err(synthamt::dataset::DatasetError::from)?.to_tensor());
        }
    }
    Ok((mels, files))
}

pub struct FinetuneArgs<'a> {
    pub mode: Option<FineTuneMode>,
    pub checkpoint: Option<&'a Path>,
    pub real: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

pub fn finetune(cfg: &RunConfig, out: &Path, args: &FinetuneArgs<'_>, env: &Env) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    if let Some(m) = args.mode {
        cfg.train.optim.finetune.mode = m;
    }
    if let Some(p) = args.checkpoint {
        cfg.finetune.checkpoint = Some(p.into());
    }
    if let Some(p) = args.real {
        cfg.finetune.real = Some(p.into());
    }
    cfg.validate()?;
    let real_dir = cfg
        .finetune
        .real
        .clone()
        .ok_or(CliError::Required("real-audio directory (--real or finetune.real)"))?;
    let start_path = match args.resume {
        Some(p) => p.to_path_buf(),
        None => cfg
            .finetune
            .checkpoint
            .clone()
            .ok_or(CliError::Required("pre-trained checkpoint (--checkpoint or finetune.checkpoint)"))?,
    };
    let ck = load_checkpoint(&start_path)?;
    check_model(&start_path, &ck, cfg.model.as_ref())?;
    if args.resume.is_some() {
        check_optim(&start_path, &ck, &cfg.train.optim)?;
    }
    let realifier = cfg
        .finetune
        .realifier
        .clone()
        .map(|r| Realifier::new(r, SAMPLE_RATE, cfg.seed))
        .transpose()?;
    let (real, mut inputs) = real_segments(&real_dir, realifier.as_ref(), cfg.seed)?;
    let synthetic = match cfg.finetune.synthetic.as_ref().or(cfg.train.data.as_ref()) {
        Some(dir) => {
            inputs.extend(files_in("synthetic data directory", dir, &["wav", "json"])?);
            load_examples(dir)?
        }
        None => {
            let r = render_inputs(&cfg)?;
            inputs.extend(r.files.iter().cloned());
            (0..cfg.render.count)
                .into_par_iter()
                .map(|i| Ok(render_example(&r.pool, &r.bank, &cfg.render.renderer, i)?.train_example()))
                .collect::<Result<Vec<_>>>()?
        }
    };
    if synthetic.is_empty() {
        return Err(CliError::Invalid("no synthetic examples for fine-tuning".into()));
    }
    inputs.push(start_path.clone());
    let mut trainer = Trainer::from_checkpoint(&ck)?;
    if args.resume.is_none() {
        trainer.begin_finetune(cfg.train.optim.clone())?;
    }
    let mut manifest = RunManifest::new("finetune", cfg.seed, env.threads, config_value(&cfg), inputs)?;
    create_out(out)?;
    info!(
        "fine-tuning ({:?}, lambda {}) on {} synthetic examples and {} real segments",
        cfg.train.optim.finetune.mode,
        cfg.train.optim.finetune.lambda,
        synthetic.len(),
        real.len()
    );
    run_loop(
        &mut trainer,
        cfg.finetune.steps,
        cfg.finetune.checkpoint_every,
        out,
        env,
        &mut manifest,
        |t| Ok(t.finetune(&synthetic, &real)?),
    )?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Audio files named directly or found in the given directories.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_files(p, &["wav"])?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn merged_notes(tracks: Vec<ProgramTrack>) -> NoteList {
    let duration = tracks.iter().map(|t| t.notes.duration_s()).fold(0.0, f64::max);
    NoteList::new(tracks.into_iter().flat_map(|t| t.notes.into_notes()).collect(), duration)
}

pub struct TranscribeOutcome {
    pub input: PathBuf,
    pub output: PathBuf,
    pub segments: usize,
    pub notes: NoteList,
}

pub fn transcribe(
    cfg: &RunConfig,
    checkpoint: &Path,
    inputs: &[PathBuf],
    out: &Path,
    env: &Env,
) -> Result<(RunManifest, Vec<TranscribeOutcome>, usize)> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    check_model(checkpoint, &ck, cfg.model.as_ref())?;
    if inputs.is_empty() {
        return Err(CliError::Required("at least one audio input"));
    }
    let files = expand_inputs(inputs)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    create_out(out)?;
    let results: Vec<std::result::Result<TranscribeOutcome, String>> = files
        .par_iter()
        .map(|f| {
            let run = || -> Result<TranscribeOutcome> {
                let audio: AudioBuffer = read_wav(f).map_err(synthamt::dataset::DatasetError::from)?;
                let t = transcribe_audio(&trainer.model, &trainer.params, &audio)?;
                let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let output = out.join(format!("{stem}.mid"));
                let track = ProgramTrack {
                    program: 1,
                    notes: t.notes.clone(),
                };
                fs::write(&output, write_smf(&[track])).map_err(io(&output))?;
                Ok(TranscribeOutcome {
                    input: f.clone(),
                    output,
                    segments: t.segments.len(),
                    notes: t.notes,
                })
            };
            run().map_err(|e| format!("{}: {e}", f.display()))
        })
        .collect();
    let mut done = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(o) => {
                info!("{}: {} segments, {} notes", o.input.display(), o.segments, o.notes.len());
                done.push(o);
            }
            Err(e) => {
                error!("{e}");
                failed += 1;
            }
        }
    }
    let mut hashed: Vec<PathBuf> = done.iter().map(|o| o.input.clone()).collect();
    hashed.push(checkpoint.into());
    let mut manifest = RunManifest::new("transcribe", cfg.seed, env.threads, config_value(cfg), hashed)?;
    manifest.artifacts = done.iter().map(|o| o.output.clone()).collect();
    manifest.write(out)?;
    Ok((manifest, done, failed))
}

#[derive(Debug, Serialize)]
pub struct Evaluation {
    pub files: BTreeMap<String, EvalReport>,
    pub mean: EvalReport,
    pub unpaired: Vec<String>,
    pub table: String,
}

fn read_notes(path: &Path) -> Result<NoteList> {
    let bytes = fs::read(path).map_err(io(path))?;
    let tracks = parse_smf(&bytes).map_err(|source| synthamt::dataset::DatasetError::Midi {
        path: path.into(),
        source,
    })?;
    Ok(merged_notes(tracks))
}

pub fn evaluate(est: &Path, reference: &Path, out: Option<&Path>, env: &Env) -> Result<Evaluation> {
    let names = |dir: &Path, what| -> Result<BTreeSet<String>> {
        Ok(files_in(what, dir, &["mid", "midi"])?
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect())
    };
    let e = names(est, "estimate directory")?;
    let r = names(reference, "reference directory")?;
    let mut unpaired = Vec::new();
    for n in e.symmetric_difference(&r) {
        let side = if e.contains(n) { "estimate" } else { "reference" };
        warn!("{n} has no counterpart (only in the {side} directory); excluded");
        unpaired.push(n.clone());
    }
    let paired: Vec<&String> = e.intersection(&r).collect();
    if paired.is_empty() {
        return Err(CliError::Evaluate(format!(
            "no file names in common between {} and {}",
            est.display(),
            reference.display()
        )));
    }
    let cfg = MatchConfig::default();
    let rows: Vec<(String, EvalReport)> = paired
        .par_iter()
        .map(|n| {
            let rn = read_notes(&reference.join(n))?;
            let en = read_notes(&est.join(n))?;
            Ok(((*n).clone(), eval_pair(&rn, &en, &cfg)))
        })
        .collect::<Result<_>>()?;
    let table = format_table(&rows);
    let mean = mean_report(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let evaluation = Evaluation {
        files: rows.into_iter().collect(),
        mean,
        unpaired,
        table,
    };
    if let Some(dir) = out {
        let mut inputs: Vec<PathBuf> = paired.iter().map(|n| reference.join(n)).collect();
        inputs.extend(paired.iter().map(|n| est.join(n)));
        let mut manifest = RunManifest::new("evaluate", 0, env.threads, serde_json::Value::Null, inputs)?;
        create_out(dir)?;
        let path = dir.join("evaluation.json");
        fs::write(&path, serde_json::to_vec_pretty(&evaluation).expect("serializes")).map_err(io(&path))?;
        manifest.artifacts.push(path);
        manifest.write(dir)?;
    }
    Ok(evaluation)
}

/// Synthetic sample bank, MIDI pool and a matching config under `out`.
pub fn fixtures(out: &Path, tracks: usize, seed: u64) -> Result<PathBuf> {
    if tracks == 0 {
        return Err(CliError::Invalid("--tracks must be at least 1".into()));
    }
    let bank_dir = out.join("bank");
    let midi_dir = out.join("midi");
    for d in [&bank_dir, &midi_dir] {
        create_out(d)?;
    }
    let bank = write_fixture_bank(&bank_dir, &DEFAULT_RECIPES, 36..=96, 1.5)?;
    let pool = fixture_pool(&DEFAULT_RECIPES, &MelodySpec::default(), tracks, &mut ChaCha8Rng::seed_from_u64(seed));
    let pool = write_midi_pool(&midi_dir, &pool)?;
    let mut cfg = RunConfig::default().with_seed(Some(seed));
    cfg.model = Some(ModelConfig::toy());
    cfg.render.midi_pool = pool.strip_prefix(out).ok().map(Path::to_path_buf);
    cfg.render.sample_bank = bank.strip_prefix(out).ok().map(Path::to_path_buf);
    let path = out.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).expect("serializes")).map_err(io(&path))?;
    Ok(path)
}
