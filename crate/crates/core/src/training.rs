//! Pre-training on synthetic pairs, adversarial fine-tuning (domain
//! confusion or domain adaptation), balanced multi-corpus sampling and the
//! corruption chain that stands in for real recordings in desk-scale runs.

use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use synthamt_neural::{
    bce_value, Adam, AdamConfig, Checkpoint, Gradients, Graph, ModelConfig, NeuralError, ParamSet, Scope, Tensor,
    TranscriptionModel,
};
use thiserror::Error;

use crate::audio::{peak_normalize, AudioBuffer};

/// Clamp used by every binary cross entropy in training.
pub const BCE_EPS: f64 = 1e-7;
pub const SAMPLING_EXPONENT: f64 = 0.3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite {what} at step {step} (seed {seed})")]
    NonFinite { what: &'static str, step: u64, seed: u64 },
    #[error("checkpoint does not match this model: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Binary cross entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(target: f64, p: f64) -> f64 {
    bce_value(target, p, BCE_EPS)
}

/// One synthetic training pair.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub mel: Tensor<f32>,
    /// Full sequence, BOS through EOS.
    pub tokens: Vec<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneMode {
    /// Drive the discriminator towards 0.5 on both domains.
    Confusion,
    /// Drive the discriminator towards the real-domain label 1.0.
    Adaptation,
}

impl FineTuneMode {
    pub fn adversarial_target(self) -> f64 {
        match self {
            FineTuneMode::Confusion => 0.5,
            FineTuneMode::Adaptation => 1.0,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Pretrain,
    Confusion,
    Adaptation,
}

/// One line of the JSON-lines metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub kind: StepKind,
    /// Mean per-token cross entropy over the synthetic batch.
    pub transcription_ce: f64,
    /// Discriminator objective: mean BCE(0) on synthetic plus mean BCE(1)
    /// on real windows.
    pub disc_loss: f64,
    /// Adversarial term before weighting by `lambda`.
    pub adv_loss: f64,
    /// Configured adversarial weight. `Trainer` records it on pre-training
    /// steps too, where it is not applied.
    pub lambda: f64,
}

/// Decoder input and per-position targets for teacher forcing. With
/// `pad_to`, the prefix is extended with EOS and the extra rows are masked.
pub fn teacher_forcing(tokens: &[usize], eos: usize, pad_to: Option<usize>) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    if tokens.len() < 2 {
        return Err(TrainError::Argument("a target sequence needs at least BOS and EOS".into()));
    }
    let mut prefix = tokens[..tokens.len() - 1].to_vec();
    let mut targets: Vec<Option<usize>> = tokens[1..].iter().copied().map(Some).collect();
    if let Some(n) = pad_to {
        if n < prefix.len() {
            return Err(TrainError::Argument(format!("cannot pad {} positions to {n}", prefix.len())));
        }
        prefix.resize(n, eos);
        targets.resize(n, None);
    }
    Ok((prefix, targets))
}

/// Summed cross entropy of one example times `scale`, and its gradients.
pub fn sequence_loss(
    model: &TranscriptionModel,
    params: &ParamSet<f32>,
    ex: &TrainExample,
    pad_to: Option<usize>,
    scale: f32,
) -> Result<(f64, Gradients<f32>)> {
    let (prefix, targets) = teacher_forcing(&ex.tokens, model.config().eos_id, pad_to)?;
    let mut g = Graph::new(params);
    let memory = model.encode(&mut g, &ex.mel, Scope::TRANSCRIBER)?;
    let logits = model.decode_logits(&mut g, memory, &prefix, Scope::TRANSCRIBER)?;
    let loss = g.cross_entropy(logits, &targets, scale)?;
    let value = f64::from(g.value(loss).get(0, 0));
    Ok((value, g.backward(loss)?))
}

fn token_count(batch: &[TrainExample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(TrainError::Argument("empty batch".into()));
    }
    Ok(batch.iter().map(|e| e.tokens.len().saturating_sub(1)).sum())
}

/// Mean per-token cross entropy of `batch` under `params`, without updates.
pub fn evaluate_ce(model: &TranscriptionModel, params: &ParamSet<f32>, batch: &[TrainExample]) -> Result<f64> {
    let n = token_count(batch)? as f64;
    let mut total = 0.0;
    for ex in batch {
        let (prefix, targets) = teacher_forcing(&ex.tokens, model.config().eos_id, None)?;
        let mut g = Graph::new(params);
        let memory = model.encode(&mut g, &ex.mel, Scope::NONE)?;
        let logits = model.decode_logits(&mut g, memory, &prefix, Scope::NONE)?;
        let loss = g.cross_entropy(logits, &targets, 1.0)?;
        total += f64::from(g.value(loss).get(0, 0));
    }
    Ok(total / n)
}

fn check_finite(value: f64, grads: &Gradients<f32>, what: &'static str, step: u64, seed: u64) -> Result<()> {
    if value.is_finite() && grads.all_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { what, step, seed })
    }
}

/// One teacher-forced update of encoder and decoder.
pub fn pretrain_step(
    model: &TranscriptionModel,
    params: &mut ParamSet<f32>,
    opt: &mut Adam<f32>,
    batch: &[TrainExample],
    step: u64,
    seed: u64,
) -> Result<LossReport> {
    let scale = 1.0 / token_count(batch)? as f32;
    let mut grads = Gradients::new(params.len());
    let mut ce = 0.0;
    for ex in batch {
        let (v, g) = sequence_loss(model, params, ex, None, scale)?;
        ce += v;
        grads.merge(g);
    }
    check_finite(ce, &grads, "transcription loss", step, seed)?;
    opt.step(params, &grads);
    Ok(LossReport {
        step,
        kind: StepKind::Pretrain,
        transcription_ce: ce,
        disc_loss: 0.0,
        adv_loss: 0.0,
        lambda: 0.0,
    })
}

/// One random discriminator window start per mel.
pub fn draw_windows<R: Rng + ?Sized>(cfg: &ModelConfig, count: usize, rng: &mut R) -> Vec<usize> {
    let last = cfg.n_frames - cfg.disc_window;
    (0..count).map(|_| rng.random_range(0..=last)).collect()
}

/// `scale * sum BCE(target, C(E(mel)[window]))` over `mels`, with gradients
/// restricted to `scope`.
pub fn adversarial_term(
    model: &TranscriptionModel,
    params: &ParamSet<f32>,
    mels: &[&Tensor<f32>],
    windows: &[usize],
    target: f64,
    scale: f32,
    scope: Scope,
) -> Result<(f64, Gradients<f32>)> {
    if mels.len() != windows.len() {
        return Err(TrainError::Argument("one window per input required".into()));
    }
    let mut grads = Gradients::new(params.len());
    let mut total = 0.0;
    for (mel, &w) in mels.iter().zip(windows) {
        let mut g = Graph::new(params);
        let memory = model.encode(&mut g, mel, scope)?;
        let window = model.window(&mut g, memory, w)?;
        let p = model.discriminate(&mut g, window, scope)?;
        let loss = g.bce(p, &[target as f32], scale, BCE_EPS as f32)?;
        total += f64::from(g.value(loss).get(0, 0));
        if scope.encoder || scope.discriminator {
            grads.merge(g.backward(loss)?);
        }
    }
    Ok((total, grads))
}

/// Inputs shared by both phases of one fine-tuning step.
pub struct ConfusionBatch<'a> {
    pub synthetic: &'a [TrainExample],
    pub real: &'a [Tensor<f32>],
    pub synthetic_windows: Vec<usize>,
    pub real_windows: Vec<usize>,
}

impl<'a> ConfusionBatch<'a> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        synthetic: &'a [TrainExample],
        real: &'a [Tensor<f32>],
        rng: &mut R,
    ) -> Result<Self> {
        if synthetic.is_empty() || real.is_empty() {
            return Err(TrainError::Argument("both domains need at least one example".into()));
        }
        let synthetic_windows = draw_windows(cfg, synthetic.len(), rng);
        let real_windows = draw_windows(cfg, real.len(), rng);
        Ok(Self {
            synthetic,
            real,
            synthetic_windows,
            real_windows,
        })
    }

    fn synthetic_mels(&self) -> Vec<&Tensor<f32>> {
        self.synthetic.iter().map(|e| &e.mel).collect()
    }

    fn real_mels(&self) -> Vec<&Tensor<f32>> {
        self.real.iter().collect()
    }
}

/// Discriminator phase: updates only `C`, on encoder outputs that carry no
/// gradient. Returns the discriminator objective before the update.
pub fn discriminator_phase(
    model: &TranscriptionModel,
    params: &mut ParamSet<f32>,
    opt_disc: &mut Adam<f32>,
    batch: &ConfusionBatch<'_>,
    step: u64,
    seed: u64,
) -> Result<f64> {
    let ns = 1.0 / batch.synthetic.len() as f32;
    let nr = 1.0 / batch.real.len() as f32;
    let scope = Scope::DISCRIMINATOR;
    let (ls, mut grads) = adversarial_term(model, params, &batch.synthetic_mels(), &batch.synthetic_windows, 0.0, ns, scope)?;
    let (lr, gr) = adversarial_term(model, params, &batch.real_mels(), &batch.real_windows, 1.0, nr, scope)?;
    grads.merge(gr);
    let loss = ls + lr;
    check_finite(loss, &grads, "discriminator loss", step, seed)?;
    opt_disc.step(params, &grads);
    Ok(loss)
}

/// Transcriber phase: updates `E` and `D` on cross entropy plus `lambda`
/// times the adversarial term; `C` is frozen. Returns `(ce, adv)`.
#[allow(clippy::too_many_arguments)]
pub fn transcriber_phase(
    model: &TranscriptionModel,
    params: &mut ParamSet<f32>,
    opt_tr: &mut Adam<f32>,
    batch: &ConfusionBatch<'_>,
    lambda: f64,
    mode: FineTuneMode,
    step: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let scale = 1.0 / token_count(batch.synthetic)? as f32;
    let target = mode.adversarial_target();
    let ns = (lambda / batch.synthetic.len() as f64) as f32;
    let nr = (lambda / batch.real.len() as f64) as f32;
    let mut grads = Gradients::new(params.len());
    let mut ce = 0.0;
    let mut adv = 0.0;
    for (ex, &w) in batch.synthetic.iter().zip(&batch.synthetic_windows) {
        let (prefix, targets) = teacher_forcing(&ex.tokens, model.config().eos_id, None)?;
        let mut g = Graph::new(params);
        let memory = model.encode(&mut g, &ex.mel, Scope::TRANSCRIBER)?;
        let logits = model.decode_logits(&mut g, memory, &prefix, Scope::TRANSCRIBER)?;
        let l_ce = g.cross_entropy(logits, &targets, scale)?;
        let window = model.window(&mut g, memory, w)?;
        let p = model.discriminate(&mut g, window, Scope::TRANSCRIBER)?;
        let l_adv = g.bce(p, &[target as f32], ns, BCE_EPS as f32)?;
        ce += f64::from(g.value(l_ce).get(0, 0));
        adv += f64::from(g.value(l_adv).get(0, 0));
        let total = g.add(l_ce, l_adv)?;
        grads.merge(g.backward(total)?);
    }
    let (lr, gr) = adversarial_term(model, params, &batch.real_mels(), &batch.real_windows, target, nr, Scope::TRANSCRIBER)?;
    adv += lr;
    grads.merge(gr);
    let adv = if lambda > 0.0 { adv / lambda } else { 0.0 };
    check_finite(ce + adv, &grads, "transcriber loss", step, seed)?;
    opt_tr.step(params, &grads);
    Ok((ce, adv))
}

/// Fine-tuning hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub mode: FineTuneMode,
    pub lambda: f64,
    /// Discriminator updates per transcriber update.
    pub disc_steps: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            mode: FineTuneMode::Confusion,
            lambda: 0.01,
            disc_steps: 1,
        }
    }
}

/// `disc_steps` discriminator updates followed by one transcriber update,
/// all on the same windows.
#[allow(clippy::too_many_arguments)]
pub fn confusion_step<R: Rng + ?Sized>(
    model: &TranscriptionModel,
    params: &mut ParamSet<f32>,
    opt_tr: &mut Adam<f32>,
    opt_disc: &mut Adam<f32>,
    synthetic: &[TrainExample],
    real: &[Tensor<f32>],
    cfg: &FineTuneConfig,
    rng: &mut R,
    step: u64,
    seed: u64,
) -> Result<LossReport> {
    let batch = ConfusionBatch::new(model.config(), synthetic, real, rng)?;
    let mut disc_loss = 0.0;
    for _ in 0..cfg.disc_steps {
        disc_loss = discriminator_phase(model, params, opt_disc, &batch, step, seed)?;
    }
    let (ce, adv) = transcriber_phase(model, params, opt_tr, &batch, cfg.lambda, cfg.mode, step, seed)?;
    Ok(LossReport {
        step,
        kind: match cfg.mode {
            FineTuneMode::Confusion => StepKind::Confusion,
            FineTuneMode::Adaptation => StepKind::Adaptation,
        },
        transcription_ce: ce,
        disc_loss,
        adv_loss: adv,
        lambda: cfg.lambda,
    })
}

/// Draws a corpus with probability proportional to `(n_i / sum n)^0.3`,
/// normalized, then an example uniformly within it.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    sizes: Vec<usize>,
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl BalancedSampler {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(TrainError::Argument("sampler needs one or more non-empty datasets".into()));
        }
        let total: f64 = sizes.iter().map(|&n| n as f64).sum();
        let raw: Vec<f64> = sizes.iter().map(|&n| (n as f64 / total).powf(SAMPLING_EXPONENT)).collect();
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let dist = WeightedIndex::new(&probs).map_err(|e| TrainError::Argument(e.to_string()))?;
        Ok(Self {
            sizes: sizes.to_vec(),
            probs,
            dist,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// `(dataset index, example index)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let d = self.dist.sample(rng);
        (d, rng.random_range(0..self.sizes[d]))
    }
}

/// Corruption chain producing a "recorded" domain from clean renders:
/// lowpass, reverberation and additive noise, then peak normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealifierConfig {
    pub lowpass_hz: f64,
    /// Time for the reverb tail to decay by 60 dB.
    pub reverb_rt60_s: f64,
    /// Wet level relative to the dry signal.
    pub reverb_wet: f64,
    pub noise_snr_db: f64,
}

impl Default for RealifierConfig {
    fn default() -> Self {
        Self {
            lowpass_hz: 2500.0,
            reverb_rt60_s: 0.6,
            reverb_wet: 0.5,
            noise_snr_db: 20.0,
        }
    }
}

impl RealifierConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.lowpass_hz > 0.0 && self.lowpass_hz < nyquist) {
            return Err(TrainError::Argument(format!("lowpass must lie in (0, {nyquist}) Hz")));
        }
        if !(self.reverb_rt60_s >= 0.0 && self.reverb_wet >= 0.0 && self.noise_snr_db.is_finite()) {
            return Err(TrainError::Argument("reverb and noise settings must be non-negative and finite".into()));
        }
        Ok(())
    }
}

/// Second-order Butterworth lowpass (bilinear transform), zero initial state.
pub fn lowpass(x: &[f64], cutoff_hz: f64, sample_rate: u32) -> Vec<f64> {
    let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / f64::from(sample_rate);
    let alpha = w0.sin() / std::f64::consts::SQRT_2;
    let cos = w0.cos();
    let a0 = 1.0 + alpha;
    let b0 = (1.0 - cos) / 2.0 / a0;
    let b1 = (1.0 - cos) / a0;
    let a1 = -2.0 * cos / a0;
    let a2 = (1.0 - alpha) / a0;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&x0| {
            let y0 = b0 * x0 + b1 * x1 + b0 * x2 - a1 * y1 - a2 * y2;
            (x2, x1, y2, y1) = (x1, x0, y1, y0);
            y0
        })
        .collect()
}

/// Linear convolution truncated to `x.len()`, via FFT.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

pub struct Realifier {
    cfg: RealifierConfig,
    impulse: Arc<Vec<f64>>,
    sample_rate: u32,
}

impl Realifier {
    /// The reverb impulse response is drawn once from `seed`, so every clip
    /// is recorded in the same "room".
    pub fn new(cfg: RealifierConfig, sample_rate: u32, seed: u64) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let sr = f64::from(sample_rate);
        let len = (cfg.reverb_rt60_s * sr).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decay = 3.0 * std::f64::consts::LN_10 / cfg.reverb_rt60_s.max(f64::MIN_POSITIVE);
        let mut impulse: Vec<f64> = (0..len)
            .map(|i| rng.random_range(-1.0..1.0) * (-decay * i as f64 / sr).exp())
            .collect();
        let energy = impulse.iter().map(|v| v * v).sum::<f64>().sqrt();
        if energy > 0.0 {
            impulse.iter_mut().for_each(|v| *v *= cfg.reverb_wet / energy);
        }
        if let Some(first) = impulse.first_mut() {
            *first += 1.0;
        } else {
            impulse.push(1.0);
        }
        Ok(Self {
            cfg,
            impulse: Arc::new(impulse),
            sample_rate,
        })
    }

    pub fn config(&self) -> &RealifierConfig {
        &self.cfg
    }

    pub fn apply<R: Rng + ?Sized>(&self, audio: &AudioBuffer, rng: &mut R) -> Result<AudioBuffer> {
        if audio.sample_rate != self.sample_rate {
            return Err(TrainError::Argument(format!(
                "realifier built for {} Hz, got {} Hz",
                self.sample_rate, audio.sample_rate
            )));
        }
        let x: Vec<f64> = audio.samples.iter().map(|&v| f64::from(v)).collect();
        let x = lowpass(&x, self.cfg.lowpass_hz, self.sample_rate);
        let mut y = convolve_truncated(&x, &self.impulse);
        let power = y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64;
        if power > 0.0 {
            // Uniform noise on [-a, a] has variance a^2 / 3.
            let a = (3.0 * power / 10f64.powf(self.cfg.noise_snr_db / 10.0)).sqrt();
            y.iter_mut().for_each(|v| *v += rng.random_range(-a..=a));
        }
        peak_normalize(&mut y);
        Ok(AudioBuffer::new(y.into_iter().map(|v| v as f32).collect(), audio.sample_rate))
    }
}

/// Learning rates and run length. Serialized as part of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub transcriber_lr: f64,
    pub disc_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub finetune: FineTuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            pretrain_lr: 1e-4,
            transcriber_lr: 1e-5,
            disc_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            finetune: FineTuneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.pretrain_lr, self.transcriber_lr, self.disc_lr];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(TrainError::Argument("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.finetune.disc_steps == 0 {
            return Err(TrainError::Argument("batch_size and disc_steps must be positive".into()));
        }
        if !(self.finetune.lambda.is_finite() && self.finetune.lambda >= 0.0) {
            return Err(TrainError::Argument("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(TrainError::Argument("invalid Adam settings".into()));
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Stream used to pick batch members and windows at `step`; a resumed run
/// therefore sees the same batches as an uninterrupted one.
pub fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7321);
    rng.set_stream(step);
    rng
}

/// Model, parameters and both optimizers, with checkpoint/resume.
pub struct Trainer {
    pub model: TranscriptionModel,
    pub params: ParamSet<f32>,
    pub cfg: TrainConfig,
    pub opt_pretrain: Adam<f32>,
    pub opt_transcriber: Adam<f32>,
    pub opt_disc: Adam<f32>,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = TranscriptionModel::new(model_cfg)?;
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(Self::from_parts(model, params, cfg))
    }

    pub fn from_parts(model: TranscriptionModel, params: ParamSet<f32>, cfg: TrainConfig) -> Self {
        let opt_pretrain = Adam::new(cfg.adam(cfg.pretrain_lr), &params, model.transcriber_params());
        let opt_transcriber = Adam::new(cfg.adam(cfg.transcriber_lr), &params, model.transcriber_params());
        let opt_disc = Adam::new(cfg.adam(cfg.disc_lr), &params, model.discriminator_params());
        Self {
            model,
            params,
            cfg,
            opt_pretrain,
            opt_transcriber,
            opt_disc,
            step: 0,
        }
    }

    /// Switches to fine-tuning with fresh optimizer state and step count,
    /// keeping the parameters.
    pub fn begin_finetune(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        let model = self.model.clone();
        let params = std::mem::take(&mut self.params);
        *self = Self::from_parts(model, params, cfg);
        Ok(())
    }

    fn pick<'a, T, R: Rng>(&self, pool: &'a [T], rng: &mut R) -> Result<Vec<&'a T>> {
        if pool.is_empty() {
            return Err(TrainError::Argument("empty training pool".into()));
        }
        Ok((0..self.cfg.batch_size).map(|_| &pool[rng.random_range(0..pool.len())]).collect())
    }

    /// One pre-training step on a batch drawn uniformly with replacement.
    pub fn pretrain(&mut self, pool: &[TrainExample]) -> Result<LossReport> {
        let mut rng = batch_rng(self.cfg.seed, self.step);
        let batch: Vec<TrainExample> = self.pick(pool, &mut rng)?.into_iter().cloned().collect();
        self.pretrain_batch(&batch)
    }

    /// One pre-training step on exactly `batch`.
    pub fn pretrain_batch(&mut self, batch: &[TrainExample]) -> Result<LossReport> {
        let mut r = pretrain_step(&self.model, &mut self.params, &mut self.opt_pretrain, batch, self.step, self.cfg.seed)?;
        r.lambda = self.cfg.finetune.lambda;
        self.step += 1;
        Ok(r)
    }

    /// One fine-tuning step with batches drawn from both pools.
    pub fn finetune(&mut self, synthetic: &[TrainExample], real: &[Tensor<f32>]) -> Result<LossReport> {
        let mut rng = batch_rng(self.cfg.seed, self.step);
        let s: Vec<TrainExample> = self.pick(synthetic, &mut rng)?.into_iter().cloned().collect();
        let r: Vec<Tensor<f32>> = self.pick(real, &mut rng)?.into_iter().cloned().collect();
        let report = confusion_step(
            &self.model,
            &mut self.params,
            &mut self.opt_transcriber,
            &mut self.opt_disc,
            &s,
            &r,
            &self.cfg.finetune,
            &mut rng,
            self.step,
            self.cfg.seed,
        )?;
        self.step += 1;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "model": self.model.config(),
            "train": self.cfg,
            "step": self.step,
        });
        let mut ck = Checkpoint::new(config);
        ck.push_params("param/", &self.params);
        for (name, opt) in [
            ("pretrain", &self.opt_pretrain),
            ("transcriber", &self.opt_transcriber),
            ("disc", &self.opt_disc),
        ] {
            let (steps, m, v) = opt.state();
            ck.push(format!("adam/{name}/steps"), Tensor::scalar(steps as f32));
            for (i, (m, v)) in m.iter().zip(v).enumerate() {
                ck.push(format!("adam/{name}/m/{i}"), m.clone());
                ck.push(format!("adam/{name}/v/{i}"), v.clone());
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model_cfg: ModelConfig = serde_json::from_value(ck.config["model"].clone())?;
        let cfg: TrainConfig = serde_json::from_value(ck.config["train"].clone())?;
        let step = ck.config["step"]
            .as_u64()
            .ok_or_else(|| TrainError::Checkpoint("missing step".into()))?;
        let model = TranscriptionModel::new(model_cfg)?;
        let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        params.load_from(&ck.params("param/"))?;
        let mut t = Self::from_parts(model, params, cfg);
        t.step = step;
        for (name, opt) in [
            ("pretrain", &mut t.opt_pretrain),
            ("transcriber", &mut t.opt_transcriber),
            ("disc", &mut t.opt_disc),
        ] {
            let Some(steps) = ck.get(&format!("adam/{name}/steps")) else {
                continue;
            };
            let n = opt.ids().len();
            let fetch = |kind: &str| -> Result<Vec<Tensor<f32>>> {
                (0..n)
                    .map(|i| {
                        ck.get(&format!("adam/{name}/{kind}/{i}"))
                            .cloned()
                            .ok_or_else(|| TrainError::Checkpoint(format!("missing adam/{name}/{kind}/{i}")))
                    })
                    .collect()
            };
            if !opt.restore(steps.get(0, 0) as u64, fetch("m")?, fetch("v")?) {
                return Err(TrainError::Checkpoint(format!("optimizer {name} state has wrong shapes")));
            }
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Flattened encoder windows of a frozen model, ready for a probe.
pub fn encoder_windows(
    model: &TranscriptionModel,
    params: &ParamSet<f32>,
    mel: &Tensor<f32>,
    starts: &[usize],
) -> Result<Vec<Tensor<f32>>> {
    let memory = model.memory(params, mel)?;
    let w = model.config().disc_window;
    starts
        .iter()
        .map(|&s| Ok(memory.slice_rows(s, w).reshaped(1, w * memory.cols())?))
        .collect()
}

/// Labelled window set: `true` marks the real domain.
pub type WindowSet = Vec<(Tensor<f32>, bool)>;

/// Trains a freshly initialized discriminator on fixed windows with the
/// discriminator objective; other parameters of `params` are unchanged.
pub fn train_probe<R: Rng + ?Sized>(
    model: &TranscriptionModel,
    params: &ParamSet<f32>,
    windows: &[(Tensor<f32>, bool)],
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Result<ParamSet<f32>> {
    if windows.is_empty() || batch == 0 {
        return Err(TrainError::Argument("probe needs windows and a positive batch".into()));
    }
    let fresh: ParamSet<f32> = model.init_params(rng);
    let mut probe = params.clone();
    for id in model.discriminator_params() {
        *probe.get_mut(id) = fresh.get(id).clone();
    }
    let mut opt = Adam::new(AdamConfig::with_lr(lr), &probe, model.discriminator_params());
    let scale = 1.0 / batch as f32;
    for _ in 0..steps {
        let mut grads = Gradients::new(probe.len());
        for _ in 0..batch {
            let (w, real) = &windows[rng.random_range(0..windows.len())];
            let mut g = Graph::new(&probe);
            let x = g.input(w.clone());
            let p = model.discriminate(&mut g, x, Scope::DISCRIMINATOR)?;
            let loss = g.bce(p, &[if *real { 1.0 } else { 0.0 }], scale, BCE_EPS as f32)?;
            grads.merge(g.backward(loss)?);
        }
        opt.step(&mut probe, &grads);
    }
    Ok(probe)
}

/// Discriminator output for one flattened window.
pub fn discriminator_prob(model: &TranscriptionModel, params: &ParamSet<f32>, window: &Tensor<f32>) -> Result<f64> {
    let mut g = Graph::new(params);
    let x = g.input(window.clone());
    let p = model.discriminate(&mut g, x, Scope::NONE)?;
    Ok(f64::from(g.value(p).get(0, 0)))
}

/// Fraction of windows classified correctly at threshold 0.5.
pub fn discriminator_accuracy(
    model: &TranscriptionModel,
    params: &ParamSet<f32>,
    windows: &[(Tensor<f32>, bool)],
) -> Result<f64> {
    if windows.is_empty() {
        return Err(TrainError::Argument("no windows to score".into()));
    }
    let mut correct = 0usize;
    for (w, real) in windows {
        let p = discriminator_prob(model, params, w)?;
        if (p > 0.5) == *real {
            correct += 1;
        }
    }
    Ok(correct as f64 / windows.len() as f64)
}
