//! Transformer encoder-decoder over log-mel frames, plus the window
//! discriminator used for adversarial fine-tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::graph::{Graph, Var};
use crate::params::{xavier_uniform, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Features per input frame.
    pub n_mels: usize,
    /// Input frames per segment.
    pub n_frames: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    /// Longest token sequence (including BOS) the decoder accepts.
    pub max_target_len: usize,
    /// Consecutive encoder frames seen by the discriminator.
    pub disc_window: usize,
    pub disc_hidden: usize,
    pub disc_leaky_slope: f64,
    /// Inputs are mapped through `(x - input_shift) * input_scale` before
    /// the first projection.
    pub input_shift: f64,
    pub input_scale: f64,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 384,
            n_frames: 256,
            d_model: 384,
            n_heads: 6,
            d_ff: 1024,
            encoder_layers: 2,
            decoder_layers: 3,
            vocab_size: 389,
            max_target_len: 512,
            disc_window: 10,
            disc_hidden: 512,
            disc_leaky_slope: 0.2,
            input_shift: (1e-5f64).ln(),
            input_scale: -1.0 / (1e-5f64).ln(),
            bos_id: 386,
            eos_id: 387,
        }
    }
}

impl ModelConfig {
    /// Reduced width for CPU experiments; same depth and vocabulary.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            disc_hidden: 128,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NeuralError::Argument(m.to_string()));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even for sinusoidal positions");
        }
        if self.n_mels == 0 || self.n_frames == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive");
        }
        if self.disc_window == 0 || self.disc_window > self.n_frames {
            return bad("discriminator window must fit in the frame count");
        }
        if self.bos_id >= self.vocab_size || self.eos_id >= self.vocab_size {
            return bad("special token ids must lie in the vocabulary");
        }
        if self.max_target_len < 2 {
            return bad("max_target_len must allow at least BOS and one token");
        }
        Ok(())
    }

    /// Closed-form trainable value count.
    pub fn num_parameters(&self) -> usize {
        let (d, ff, v) = (self.d_model, self.d_ff, self.vocab_size);
        let linear = |i: usize, o: usize| i * o + o;
        let ln = 2 * d;
        let attn = 4 * linear(d, d);
        let ffn = linear(d, ff) + linear(ff, d);
        let enc_layer = 2 * ln + attn + ffn;
        let dec_layer = 3 * ln + 2 * attn + ffn;
        let encoder = linear(self.n_mels, d) + self.encoder_layers * enc_layer + ln;
        let decoder = v * d + self.decoder_layers * dec_layer + ln + linear(d, v);
        let h = self.disc_hidden;
        let disc = linear(self.disc_window * d, h) + linear(h, h) + linear(h, 1);
        encoder + decoder + disc
    }
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Scope {
    pub encoder: bool,
    pub decoder: bool,
    pub discriminator: bool,
}

impl Scope {
    pub const NONE: Scope = Scope {
        encoder: false,
        decoder: false,
        discriminator: false,
    };
    pub const TRANSCRIBER: Scope = Scope {
        encoder: true,
        decoder: true,
        discriminator: false,
    };
    pub const DISCRIMINATOR: Scope = Scope {
        encoder: false,
        decoder: false,
        discriminator: true,
    };
    pub const ALL: Scope = Scope {
        encoder: true,
        decoder: true,
        discriminator: true,
    };
}

#[derive(Clone, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct AttnIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Clone, Debug)]
struct FfnIds {
    up: LinearIds,
    down: LinearIds,
}

#[derive(Clone, Debug)]
struct EncLayerIds {
    ln_attn: NormIds,
    attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayerIds {
    ln_self: NormIds,
    self_attn: AttnIds,
    ln_cross: NormIds,
    cross_attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Group {
    Encoder,
    Decoder,
    Discriminator,
}

/// Parameter layout of the transcription model and discriminator. The
/// layout is a pure function of the config, so ids are valid for any
/// [`ParamSet`] produced by [`TranscriptionModel::init_params`] or loaded
/// from a checkpoint of the same config.
#[derive(Clone, Debug)]
pub struct TranscriptionModel {
    cfg: ModelConfig,
    groups: Vec<Group>,
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    input_proj: LinearIds,
    enc_layers: Vec<EncLayerIds>,
    enc_norm: NormIds,
    tok_embed: ParamId,
    dec_layers: Vec<DecLayerIds>,
    dec_norm: NormIds,
    head: LinearIds,
    disc: [LinearIds; 3],
    frame_pos: Vec<f64>,
    token_pos: Vec<f64>,
}

struct LayoutBuilder {
    groups: Vec<Group>,
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    group: Group,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: [usize; 2]) -> ParamId {
        self.groups.push(self.group);
        self.names.push(name);
        self.shapes.push(shape);
        ParamId(self.names.len() - 1)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> LinearIds {
        LinearIds {
            w: self.add(format!("{name}.w"), [i, o]),
            b: self.add(format!("{name}.b"), [1, o]),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            g: self.add(format!("{name}.g"), [1, d]),
            b: self.add(format!("{name}.b"), [1, d]),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize) -> FfnIds {
        FfnIds {
            up: self.linear(&format!("{name}.up"), d, ff),
            down: self.linear(&format!("{name}.down"), ff, d),
        }
    }
}

/// Fixed sinusoidal position table, `len x d` row-major.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + 2 * i] = angle.sin();
            out[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    out
}

/// Encoder keys and values for every decoder layer's cross-attention.
pub struct CrossMemory<T> {
    kv: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Cached per-layer self-attention keys/values of an incremental decode.
pub struct DecodeState<T> {
    cross: CrossMemory<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> DecodeState<T> {
    /// Tokens fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl TranscriptionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let mut b = LayoutBuilder {
            groups: Vec::new(),
            names: Vec::new(),
            shapes: Vec::new(),
            group: Group::Encoder,
        };
        let input_proj = b.linear("enc.input", cfg.n_mels, d);
        let enc_layers = (0..cfg.encoder_layers)
            .map(|l| EncLayerIds {
                ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln_ffn: b.norm(&format!("enc.{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, ff),
            })
            .collect();
        let enc_norm = b.norm("enc.norm", d);

        b.group = Group::Decoder;
        let tok_embed = b.add("dec.embed".into(), [cfg.vocab_size, d]);
        let dec_layers = (0..cfg.decoder_layers)
            .map(|l| DecLayerIds {
                ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross"), d),
                ln_ffn: b.norm(&format!("dec.{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, ff),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let head = b.linear("dec.head", d, cfg.vocab_size);

        b.group = Group::Discriminator;
        let h = cfg.disc_hidden;
        let disc = [
            b.linear("disc.0", cfg.disc_window * d, h),
            b.linear("disc.1", h, h),
            b.linear("disc.2", h, 1),
        ];

        Ok(Self {
            frame_pos: sinusoidal_positions(cfg.n_frames, d),
            token_pos: sinusoidal_positions(cfg.max_target_len, d),
            groups: b.groups,
            names: b.names,
            shapes: b.shapes,
            input_proj,
            enc_layers,
            enc_norm,
            tok_embed,
            dec_layers,
            dec_norm,
            head,
            disc,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters: Xavier-uniform matrices, zero biases, unit norm gains.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut set = ParamSet::new();
        for (name, &[r, c]) in self.names.iter().zip(&self.shapes) {
            let t = if name.ends_with(".g") {
                Tensor::full(r, c, T::ONE)
            } else if name.ends_with(".b") {
                Tensor::zeros(r, c)
            } else {
                xavier_uniform(r, c, rng)
            };
            set.insert(name.clone(), t);
        }
        set
    }

    /// Checks that `params` follows this model's layout.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(NeuralError::Checkpoint(format!(
                "parameter set has {} tensors, model expects {}",
                params.len(),
                self.names.len()
            )));
        }
        for (id, name, t) in params.iter() {
            let i = id.index();
            if name != self.names[i] || t.shape() != self.shapes[i] {
                return Err(NeuralError::Checkpoint(format!(
                    "tensor {i} is {name} {:?}, expected {} {:?}",
                    t.shape(),
                    self.names[i],
                    self.shapes[i]
                )));
            }
        }
        Ok(())
    }

    fn group_ids(&self, g: Group) -> Vec<ParamId> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == g)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.group_ids(Group::Encoder)
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.group_ids(Group::Decoder)
    }

    pub fn transcriber_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_params();
        ids.extend(self.decoder_params());
        ids
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.group_ids(Group::Discriminator)
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, p: &LinearIds, train: bool) -> Result<Var> {
        let w = g.param_or_frozen(p.w, train);
        let b = g.param_or_frozen(p.b, train);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, p: &NormIds, train: bool) -> Result<Var> {
        let gamma = g.param_or_frozen(p.g, train);
        let beta = g.param_or_frozen(p.b, train);
        g.layer_norm(x, gamma, beta)
    }

    fn ffn<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, p: &FfnIds, train: bool) -> Result<Var> {
        let h = self.linear(g, x, &p.up, train)?;
        let h = g.gelu(h);
        self.linear(g, h, &p.down, train)
    }

    /// Multi-head attention of `query` over already projected keys/values.
    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        k: Var,
        v: Var,
        p: &AttnIds,
        causal: bool,
        train: bool,
    ) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.linear(g, query, &p.q, train)?;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, false, kh, true)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, causal);
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        self.linear(g, merged, &p.o, train)
    }

    fn self_attention<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        p: &AttnIds,
        causal: bool,
        train: bool,
    ) -> Result<Var> {
        let k = self.linear(g, x, &p.k, train)?;
        let v = self.linear(g, x, &p.v, train)?;
        self.attend(g, x, k, v, p, causal, train)
    }

    fn positions<T: Scalar>(table: &[f64], len: usize, d: usize) -> Tensor<T> {
        Tensor::from_vec(len, d, table[..len * d].iter().map(|&v| T::from_f64(v)).collect())
            .expect("position table shape")
    }

    /// Encoder `E`: per-frame projection, sinusoidal positions, pre-norm
    /// self-attention blocks. Returns the `n_frames x d_model` memory.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, mel: &Tensor<T>, scope: Scope) -> Result<Var> {
        let cfg = &self.cfg;
        if mel.shape() != [cfg.n_frames, cfg.n_mels] {
            return Err(NeuralError::Shape(format!(
                "encoder input must be {}x{}, got {:?}",
                cfg.n_frames,
                cfg.n_mels,
                mel.shape()
            )));
        }
        let train = scope.encoder;
        let shift = T::from_f64(cfg.input_shift);
        let scale = T::from_f64(cfg.input_scale);
        let x = g.input(mel.map(|v| (v - shift) * scale));
        let x = self.linear(g, x, &self.input_proj, train)?;
        let pos = g.input(Self::positions(&self.frame_pos, cfg.n_frames, cfg.d_model));
        let mut x = g.add(x, pos)?;
        for layer in &self.enc_layers {
            let h = self.norm(g, x, &layer.ln_attn, train)?;
            let h = self.self_attention(g, h, &layer.attn, false, train)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &layer.ln_ffn, train)?;
            let h = self.ffn(g, h, &layer.ffn, train)?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, &self.enc_norm, train)
    }

    /// Decoder `D` logits for a teacher-forced prefix: one row per prefix
    /// position, `vocab_size` columns.
    pub fn decode_logits<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        prefix: &[usize],
        scope: Scope,
    ) -> Result<Var> {
        let train = scope.decoder;
        let mut kv = Vec::with_capacity(self.dec_layers.len());
        for layer in &self.dec_layers {
            let k = self.linear(g, memory, &layer.cross_attn.k, train)?;
            let v = self.linear(g, memory, &layer.cross_attn.v, train)?;
            kv.push((k, v));
        }
        self.decode_with(g, &kv, prefix, train)
    }

    fn decode_with<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        kv: &[(Var, Var)],
        prefix: &[usize],
        train: bool,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if prefix.is_empty() || prefix.len() > cfg.max_target_len {
            return Err(NeuralError::Argument(format!(
                "decoder prefix length {} outside 1..={}",
                prefix.len(),
                cfg.max_target_len
            )));
        }
        let table = g.param_or_frozen(self.tok_embed, train);
        let x = g.embed(table, prefix)?;
        let x = g.scale(x, T::from_f64((cfg.d_model as f64).sqrt()));
        let pos = g.input(Self::positions(&self.token_pos, prefix.len(), cfg.d_model));
        let mut x = g.add(x, pos)?;
        for (layer, &(k, v)) in self.dec_layers.iter().zip(kv) {
            let h = self.norm(g, x, &layer.ln_self, train)?;
            let h = self.self_attention(g, h, &layer.self_attn, true, train)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &layer.ln_cross, train)?;
            let h = self.attend(g, h, k, v, &layer.cross_attn, false, train)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &layer.ln_ffn, train)?;
            let h = self.ffn(g, h, &layer.ffn, train)?;
            x = g.add(x, h)?;
        }
        let x = self.norm(g, x, &self.dec_norm, train)?;
        self.linear(g, x, &self.head, train)
    }

    /// Discriminator `C`: probability that a window of encoder frames
    /// comes from the real domain. `window` must be `disc_window` rows
    /// of `d_model` (or the same values flattened to one row).
    pub fn discriminate<T: Scalar>(&self, g: &mut Graph<'_, T>, window: Var, scope: Scope) -> Result<Var> {
        let cfg = &self.cfg;
        let flat = cfg.disc_window * cfg.d_model;
        let x = match g.shape(window) {
            [r, c] if r == cfg.disc_window && c == cfg.d_model => g.reshape(window, 1, flat)?,
            [1, c] if c == flat => window,
            other => {
                return Err(NeuralError::Argument(format!(
                    "discriminator window must be {}x{}, got {other:?}",
                    cfg.disc_window, cfg.d_model
                )))
            }
        };
        let train = scope.discriminator;
        let slope = T::from_f64(cfg.disc_leaky_slope);
        let h = self.linear(g, x, &self.disc[0], train)?;
        let h = g.leaky_relu(h, slope);
        let h = self.linear(g, h, &self.disc[1], train)?;
        let h = g.leaky_relu(h, slope);
        let logit = self.linear(g, h, &self.disc[2], train)?;
        Ok(g.sigmoid(logit))
    }

    /// `disc_window` consecutive encoder frames starting at `start`.
    pub fn window<T: Scalar>(&self, g: &mut Graph<'_, T>, memory: Var, start: usize) -> Result<Var> {
        g.slice_rows(memory, start, self.cfg.disc_window)
    }

    /// Encoder output for inference.
    pub fn memory<T: Scalar>(&self, params: &ParamSet<T>, mel: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(params);
        let m = self.encode(&mut g, mel, Scope::NONE)?;
        Ok(g.value(m).clone())
    }

    /// Projects encoder output into per-layer cross-attention keys/values.
    pub fn cross_memory<T: Scalar>(&self, params: &ParamSet<T>, memory: &Tensor<T>) -> Result<CrossMemory<T>> {
        let mut g = Graph::new(params);
        let m = g.input(memory.clone());
        let mut kv = Vec::with_capacity(self.dec_layers.len());
        for layer in &self.dec_layers {
            let k = self.linear(&mut g, m, &layer.cross_attn.k, false)?;
            let v = self.linear(&mut g, m, &layer.cross_attn.v, false)?;
            kv.push((g.value(k).clone(), g.value(v).clone()));
        }
        Ok(CrossMemory { kv })
    }

    /// Logits of the last prefix position given cached cross memory.
    pub fn next_logits<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cross: &CrossMemory<T>,
        prefix: &[usize],
    ) -> Result<Vec<T>> {
        let mut g = Graph::new(params);
        let kv: Vec<(Var, Var)> = cross
            .kv
            .iter()
            .map(|(k, v)| (g.input(k.clone()), g.input(v.clone())))
            .collect();
        let logits = self.decode_with(&mut g, &kv, prefix, false)?;
        let lv = g.value(logits);
        Ok(lv.row(lv.rows() - 1).to_vec())
    }

    /// Starts an incremental decode over `memory`.
    pub fn start_decode<T: Scalar>(&self, params: &ParamSet<T>, memory: &Tensor<T>) -> Result<DecodeState<T>> {
        let cross = self.cross_memory(params, memory)?;
        let layers = self.dec_layers.len();
        Ok(DecodeState {
            cross,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        })
    }

    /// Feeds one token and returns the logits for the next position. Keys
    /// and values of earlier positions are reused, so each step costs time
    /// linear in the prefix length. Matches the last row of
    /// [`decode_logits`](Self::decode_logits) up to rounding.
    pub fn decode_step<T: Scalar>(&self, params: &ParamSet<T>, state: &mut DecodeState<T>, token: usize) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        if state.len >= cfg.max_target_len {
            return Err(NeuralError::Argument(format!(
                "decoder prefix length {} outside 1..={}",
                state.len + 1,
                cfg.max_target_len
            )));
        }
        let pos = state.len;
        let mut g = Graph::new(params);
        let table = g.frozen(self.tok_embed);
        let x = g.embed(table, &[token])?;
        let x = g.scale(x, T::from_f64((d as f64).sqrt()));
        let p = g.input(Tensor::from_vec(1, d, self.token_pos[pos * d..(pos + 1) * d].iter().map(|&v| T::from_f64(v)).collect())?);
        let mut x = g.add(x, p)?;
        for (l, layer) in self.dec_layers.iter().enumerate() {
            let h = self.norm(&mut g, x, &layer.ln_self, false)?;
            let k = self.linear(&mut g, h, &layer.self_attn.k, false)?;
            let v = self.linear(&mut g, h, &layer.self_attn.v, false)?;
            state.keys[l].extend_from_slice(g.value(k).data());
            state.values[l].extend_from_slice(g.value(v).data());
            let kc = g.input(Tensor::from_vec(pos + 1, d, state.keys[l].clone())?);
            let vc = g.input(Tensor::from_vec(pos + 1, d, state.values[l].clone())?);
            let h = self.attend(&mut g, h, kc, vc, &layer.self_attn, false, false)?;
            x = g.add(x, h)?;
            let h = self.norm(&mut g, x, &layer.ln_cross, false)?;
            let (ck, cv) = &state.cross.kv[l];
            let ck = g.input(ck.clone());
            let cv = g.input(cv.clone());
            let h = self.attend(&mut g, h, ck, cv, &layer.cross_attn, false, false)?;
            x = g.add(x, h)?;
            let h = self.norm(&mut g, x, &layer.ln_ffn, false)?;
            let h = self.ffn(&mut g, h, &layer.ffn, false)?;
            x = g.add(x, h)?;
        }
        let x = self.norm(&mut g, x, &self.dec_norm, false)?;
        let logits = self.linear(&mut g, x, &self.head, false)?;
        state.len += 1;
        Ok(g.value(logits).data().to_vec())
    }

    /// Greedy autoregressive decoding from BOS until EOS or
    /// `max_target_len` tokens (BOS included). Ties go to the lowest id.
    pub fn greedy_transcribe<T: Scalar>(&self, params: &ParamSet<T>, mel: &Tensor<T>) -> Result<Vec<usize>> {
        let memory = self.memory(params, mel)?;
        let mut state = self.start_decode(params, &memory)?;
        let mut tokens = vec![self.cfg.bos_id];
        while tokens.len() < self.cfg.max_target_len {
            let logits = self.decode_step(params, &mut state, *tokens.last().unwrap())?;
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            tokens.push(best);
            if best == self.cfg.eos_id {
                break;
            }
        }
        Ok(tokens)
    }
}
