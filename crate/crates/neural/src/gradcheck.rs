//! Central finite-difference checks of reverse-mode gradients, for the
//! graph primitives and for the assembled model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, ModelConfig, ParamId, ParamSet, Scalar, Scope, Tensor, TranscriptionModel, Var};

/// Relative-error bound for reverse mode in f64 against f64 differences.
pub const F64_TOL: f64 = 1e-6;
/// Bound for f32 reverse mode against f64 differences.
pub const F32_TOL: f64 = 1e-3;
pub const F64_STEP: f64 = 1e-5;
pub const F64_FLOOR: f64 = 1e-3;
pub const F32_FLOOR: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::from_f64(rng.random_range(-scale..scale)))
}

fn norm<T: Scalar>(v: impl Iterator<Item = T>) -> f64 {
    v.map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

/// Compares reverse-mode gradients with central finite differences for
/// every value of every listed parameter. The relative error of a tensor
/// is `|analytic - numeric| / max(|analytic|, |numeric|, floor * G)` in the
/// L2 norm, where `G` is the largest analytic tensor-gradient norm in the
/// check. The floor keeps tensors whose true gradient is zero (attention key
/// biases) from dividing finite-difference noise by noise.
pub fn check_gradients<T, F>(
    params: &ParamSet<T>,
    ids: &[ParamId],
    step: f64,
    floor: f64,
    build: F,
) -> Vec<(String, f64)>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        g.backward(loss).unwrap()
    };
    check_against(params, &analytic, ids, step, floor, build)
}

/// Reverse-mode gradients computed at precision `A`, finite differences
/// taken at precision `N` on the same (exactly converted) parameter values.
pub fn check_gradients_mixed<A, N, FA, FN>(
    params: &ParamSet<A>,
    ids: &[ParamId],
    step: f64,
    floor: f64,
    build_analytic: FA,
    build_numeric: FN,
) -> Vec<(String, f64)>
where
    A: Scalar,
    N: Scalar,
    FA: Fn(&mut Graph<'_, A>) -> Var,
    FN: Fn(&mut Graph<'_, N>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build_analytic(&mut g);
        g.backward(loss).unwrap()
    };
    let mut converted = crate::Gradients::<N>::new(params.len());
    for (id, t) in analytic.iter() {
        converted.accumulate(id, t.cast());
    }
    let analytic = converted;
    check_against(&params.cast::<N>(), &analytic, ids, step, floor, build_numeric)
}

fn check_against<T, F>(
    params: &ParamSet<T>,
    analytic: &crate::Gradients<T>,
    ids: &[ParamId],
    step: f64,
    floor: f64,
    build: F,
) -> Vec<(String, f64)>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Var,
{
    let eval = |p: &ParamSet<T>| {
        let mut g = Graph::new(p);
        let loss = build(&mut g);
        g.value(loss).get(0, 0).to_f64()
    };
    let mut work = params.clone();
    let mut raw = Vec::new();
    for &id in ids {
        let n = params.get(id).len();
        let mut numeric = vec![0.0f64; n];
        for i in 0..n {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = T::from_f64(orig.to_f64() + step);
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = T::from_f64(orig.to_f64() - step);
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * step);
        }
        let a: Vec<f64> = match analytic.get(id) {
            Some(t) => t.data().iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; n],
        };
        let diff = norm(a.iter().zip(&numeric).map(|(x, y)| x - y));
        let an = norm(a.iter().copied());
        let scale = an.max(norm(numeric.iter().copied()));
        raw.push((params.name(id).to_string(), diff, scale, an));
    }
    let global = raw.iter().map(|r| r.3).fold(0.0, f64::max);
    raw.into_iter()
        .map(|(name, diff, scale, _)| (name, diff / scale.max(floor * global).max(f64::MIN_POSITIVE)))
        .collect()
}

/// Largest entry of a report, as `(parameter, relative error)`.
pub fn worst(report: &[(String, f64)]) -> (String, f64) {
    report
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// Small enough for exhaustive differencing of every parameter.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_mels: 6,
        n_frames: 12,
        d_model: 8,
        n_heads: 1,
        d_ff: 12,
        encoder_layers: 2,
        decoder_layers: 3,
        vocab_size: 11,
        max_target_len: 16,
        disc_window: 3,
        disc_hidden: 8,
        disc_leaky_slope: 0.2,
        input_shift: 0.0,
        input_scale: 1.0,
        bos_id: 9,
        eos_id: 10,
    }
}

/// Loss = sum(out * weights), so every output entry gets a distinct
/// upstream gradient.
fn weighted_sum<T: Scalar>(g: &mut Graph<'_, T>, out: Var, seed: u64) -> Var {
    let [r, c] = g.shape(out);
    let w = random_tensor::<T>(&mut rng(seed), r, c, 1.0);
    let w = g.input(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<[usize; 2]>,
    /// Magnitude offset keeping values away from kinks.
    pub away_from_zero: bool,
    pub build: fn(&mut Graph<'_, f64>, &[Var]) -> Var,
}

pub fn cases(rng: &mut impl Rng) -> Vec<Case> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let sq = rng.random_range(2..6);
    vec![
        Case { name: "matmul", shapes: vec![[m, k], [k, n]], away_from_zero: false, build: |g, v| g.matmul(v[0], v[1]).unwrap() },
        Case { name: "matmul_at", shapes: vec![[k, m], [k, n]], away_from_zero: false, build: |g, v| g.matmul_t(v[0], true, v[1], false).unwrap() },
        Case { name: "matmul_bt", shapes: vec![[m, k], [n, k]], away_from_zero: false, build: |g, v| g.matmul_t(v[0], false, v[1], true).unwrap() },
        Case { name: "matmul_at_bt", shapes: vec![[k, m], [n, k]], away_from_zero: false, build: |g, v| g.matmul_t(v[0], true, v[1], true).unwrap() },
        Case { name: "add", shapes: vec![[m, n], [m, n]], away_from_zero: false, build: |g, v| g.add(v[0], v[1]).unwrap() },
        Case { name: "add_row", shapes: vec![[m, n], [1, n]], away_from_zero: false, build: |g, v| g.add_row(v[0], v[1]).unwrap() },
        Case { name: "mul", shapes: vec![[m, n], [m, n]], away_from_zero: false, build: |g, v| g.mul(v[0], v[1]).unwrap() },
        Case { name: "scale", shapes: vec![[m, n]], away_from_zero: false, build: |g, v| g.scale(v[0], -1.7) },
        Case { name: "layer_norm", shapes: vec![[m, n + 1], [1, n + 1], [1, n + 1]], away_from_zero: false, build: |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap() },
        Case { name: "gelu", shapes: vec![[m, n]], away_from_zero: false, build: |g, v| g.gelu(v[0]) },
        Case { name: "leaky_relu", shapes: vec![[m, n]], away_from_zero: true, build: |g, v| g.leaky_relu(v[0], 0.2) },
        Case { name: "sigmoid", shapes: vec![[m, n]], away_from_zero: false, build: |g, v| g.sigmoid(v[0]) },
        Case { name: "softmax", shapes: vec![[m, n]], away_from_zero: false, build: |g, v| g.softmax(v[0], false) },
        Case { name: "softmax_causal", shapes: vec![[sq, sq]], away_from_zero: false, build: |g, v| g.softmax(v[0], true) },
        Case { name: "slice_cols", shapes: vec![[m, 5]], away_from_zero: false, build: |g, v| g.slice_cols(v[0], 1, 3).unwrap() },
        Case { name: "concat_cols", shapes: vec![[m, k], [m, n]], away_from_zero: false, build: |g, v| g.concat_cols(&[v[0], v[1], v[0]]).unwrap() },
        Case { name: "slice_rows", shapes: vec![[5, n]], away_from_zero: false, build: |g, v| g.slice_rows(v[0], 2, 2).unwrap() },
        Case { name: "reshape", shapes: vec![[2, 6]], away_from_zero: false, build: |g, v| g.reshape(v[0], 3, 4).unwrap() },
        Case { name: "embed", shapes: vec![[4, n]], away_from_zero: false, build: |g, v| g.embed(v[0], &[3, 0, 3, 1]).unwrap() },
        Case {
            name: "cross_entropy",
            shapes: vec![[4, n + 1]],
            away_from_zero: false,
            build: |g, v| g.cross_entropy(v[0], &[Some(0), None, Some(1), Some(0)], 0.5).unwrap(),
        },
        Case {
            name: "bce",
            shapes: vec![[3, 1]],
            away_from_zero: false,
            build: |g, v| {
                let p = g.sigmoid(v[0]);
                g.bce(p, &[0.0, 0.5, 1.0], 0.7, 1e-7).unwrap()
            },
        },
    ]
}

pub fn run_case(case: &Case, seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut params = ParamSet::<f64>::new();
    let ids: Vec<ParamId> = case
        .shapes
        .iter()
        .enumerate()
        .map(|(i, &[rows, cols])| {
            let mut t = random_tensor::<f64>(&mut r, rows, cols, 1.0);
            if case.away_from_zero {
                t = t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
            }
            params.insert(format!("{}.{i}", case.name), t)
        })
        .collect();
    let build = case.build;
    check_gradients(&params, &ids, F64_STEP, F64_FLOOR, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(g, &vars);
        if g.shape(out) == [1, 1] {
            out
        } else {
            weighted_sum(g, out, seed ^ 0xabc)
        }
    })
}

/// Worst relative error per primitive over `trials` random shape draws.
pub fn check_primitives(trials: u64) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for trial in 0..trials {
        for case in cases(&mut rng(100 + trial)) {
            let w = worst(&run_case(&case, 1000 * trial + 7)).1;
            match out.iter_mut().find(|(n, _)| n == case.name) {
                Some(e) => e.1 = e.1.max(w),
                None => out.push((case.name.to_string(), w)),
            }
        }
    }
    out
}

pub const MODEL_PARTS: [&str; 3] = ["encoder", "decoder", "discriminator"];

pub fn perturbed_params<T: Scalar>(model: &TranscriptionModel, seed: u64) -> ParamSet<T> {
    let mut r = rng(seed);
    let mut p = model.init_params::<T, _>(&mut r);
    for id in p.ids().collect::<Vec<_>>() {
        for v in p.get_mut(id).data_mut() {
            *v += T::from_f64(r.random_range(-0.2..0.2));
        }
    }
    p
}

pub fn tiny_mel<T: Scalar>(seed: u64) -> Tensor<T> {
    let cfg = tiny_config();
    random_tensor(&mut rng(seed), cfg.n_frames, cfg.n_mels, 1.0)
}

pub fn model_loss<T: Scalar>(model: &TranscriptionModel, g: &mut Graph<'_, T>, mel: &Tensor<T>, part: &str) -> Var {
    let prefix = [9usize, 3, 4, 1, 7];
    let targets = [Some(3), Some(4), Some(1), Some(7), Some(10)];
    match part {
        "encoder" => {
            let m = model.encode(g, mel, Scope::ALL).unwrap();
            weighted_sum(g, m, 5)
        }
        "decoder" => {
            let m = model.encode(g, mel, Scope::ALL).unwrap();
            let logits = model.decode_logits(g, m, &prefix, Scope::ALL).unwrap();
            g.cross_entropy(logits, &targets, T::from_f64(0.2)).unwrap()
        }
        "discriminator" => {
            let m = model.encode(g, mel, Scope::ALL).unwrap();
            let w = model.window(g, m, 4).unwrap();
            let p = model.discriminate(g, w, Scope::ALL).unwrap();
            g.bce(p, &[T::from_f64(0.5)], T::ONE, T::from_f64(1e-7)).unwrap()
        }
        _ => unreachable!(),
    }
}

/// Per-parameter report for one model part, all arithmetic in f64.
pub fn check_model_f64(part: &str) -> Vec<(String, f64)> {
    let model = TranscriptionModel::new(tiny_config()).expect("tiny config is valid");
    let params = perturbed_params::<f64>(&model, 3);
    let mel = tiny_mel::<f64>(4);
    let ids: Vec<ParamId> = params.ids().collect();
    check_gradients(&params, &ids, F64_STEP, F64_FLOOR, |g| model_loss(&model, g, &mel, part))
}

/// Per-parameter report for one model part, reverse mode in f32.
pub fn check_model_f32(part: &str) -> Vec<(String, f64)> {
    let model = TranscriptionModel::new(tiny_config()).expect("tiny config is valid");
    let params = perturbed_params::<f32>(&model, 3);
    let mel = tiny_mel::<f32>(4);
    let mel64 = mel.cast::<f64>();
    let ids: Vec<ParamId> = params.ids().collect();
    check_gradients_mixed(
        &params,
        &ids,
        F64_STEP,
        F32_FLOOR,
        |g| model_loss(&model, g, &mel, part),
        |g| model_loss(&model, g, &mel64, part),
    )
}
