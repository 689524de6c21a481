use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthamt::training::*;
use synthamt_neural::{Adam, AdamConfig, ModelConfig, ParamSet, Scope, Tensor, TranscriptionModel};

fn tiny() -> ModelConfig {
    ModelConfig {
        n_mels: 12,
        n_frames: 24,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        encoder_layers: 2,
        decoder_layers: 2,
        max_target_len: 64,
        disc_window: 10,
        disc_hidden: 16,
        ..ModelConfig::default()
    }
}

fn example(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TrainExample {
    let mel = Tensor::from_fn(cfg.n_frames, cfg.n_mels, |_, _| rng.random_range(-11.0..0.0));
    let n = rng.random_range(3..12);
    let mut tokens = vec![cfg.bos_id];
    tokens.extend((0..n).map(|_| rng.random_range(0..cfg.vocab_size - 5)));
    tokens.push(cfg.eos_id);
    TrainExample { mel, tokens }
}

fn setup(seed: u64) -> (TranscriptionModel, ParamSet<f32>, ChaCha8Rng) {
    let cfg = tiny();
    let model = TranscriptionModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.init_params(&mut rng);
    (model, params, rng)
}

fn changed(a: &ParamSet<f32>, b: &ParamSet<f32>) -> Vec<bool> {
    a.ids().map(|id| a.get(id).data() != b.get(id).data()).collect()
}

#[test]
fn bce_derivative_matches_finite_difference() {
    let h = 1e-6;
    let fd = (bce(0.5, 0.25 + h) - bce(0.5, 0.25 - h)) / (2.0 * h);
    assert!((fd + 4.0 / 3.0).abs() < 1e-6, "{fd}");
    for p in [0.1, 0.3, 0.7, 0.9] {
        assert!(bce(0.5, p) > bce(0.5, 0.5));
    }
}

#[test]
fn sampler_probabilities() {
    let p = BalancedSampler::new(&[1000, 10]).unwrap().probabilities().to_vec();
    let raw = [(1000.0f64 / 1010.0).powf(0.3), (10.0f64 / 1010.0).powf(0.3)];
    assert!((raw[0] - 0.997019).abs() < 1e-6 && (raw[1] - 0.250440).abs() < 1e-6);
    assert!((p[0] - 0.799240).abs() < 1e-6 && (p[1] - 0.200760).abs() < 1e-6);
    assert_eq!(BalancedSampler::new(&[100, 100]).unwrap().probabilities(), &[0.5, 0.5]);
}

#[test]
fn sampler_draws_examples_inside_the_chosen_dataset() {
    let s = BalancedSampler::new(&[3, 50]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (d, i) = s.sample(&mut rng);
        assert!(i < [3, 50][d]);
    }
}

#[test]
fn uniform_logits_give_log_vocab_cross_entropy() {
    let (model, mut params, mut rng) = setup(1);
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).starts_with("dec.head.") {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let batch: Vec<TrainExample> = (0..3).map(|_| example(&mut rng, model.config())).collect();
    let ce = evaluate_ce(&model, &params, &batch).unwrap();
    assert!((ce - 389f64.ln()).abs() < 1e-4, "{ce}");
}

#[test]
fn padded_positions_contribute_nothing() {
    let (model, params, mut rng) = setup(2);
    let ex = example(&mut rng, model.config());
    let (v0, g0) = sequence_loss(&model, &params, &ex, None, 1.0).unwrap();
    let (v1, g1) = sequence_loss(&model, &params, &ex, Some(40), 1.0).unwrap();
    assert!((v0 - v1).abs() < 1e-5);
    for id in params.ids() {
        let (a, b) = (g0.get(id), g1.get(id));
        match (a, b) {
            (Some(a), Some(b)) => {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{}", params.name(id));
                }
            }
            (None, None) => {}
            (a, b) => {
                let nz = |t: Option<&Tensor<f32>>| t.is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
                assert!(!nz(a) && !nz(b), "{}", params.name(id));
            }
        }
    }
}

#[test]
fn phases_touch_only_their_own_parameters() {
    let (model, mut params, mut rng) = setup(3);
    let cfg = model.config().clone();
    let synth: Vec<TrainExample> = (0..2).map(|_| example(&mut rng, &cfg)).collect();
    let real: Vec<Tensor<f32>> = (0..2).map(|_| example(&mut rng, &cfg).mel).collect();
    let mut opt_tr = Adam::new(AdamConfig::with_lr(1e-3), &params, model.transcriber_params());
    let mut opt_c = Adam::new(AdamConfig::with_lr(1e-3), &params, model.discriminator_params());
    let disc: Vec<usize> = model.discriminator_params().iter().map(|id| id.index()).collect();
    let batch = ConfusionBatch::new(&cfg, &synth, &real, &mut rng).unwrap();

    let before = params.clone();
    discriminator_phase(&model, &mut params, &mut opt_c, &batch, 0, 0).unwrap();
    let c1 = changed(&before, &params);
    for (i, &c) in c1.iter().enumerate() {
        assert_eq!(c, disc.contains(&i), "phase 1, {}", params.name(params.ids().nth(i).unwrap()));
    }

    let before = params.clone();
    transcriber_phase(&model, &mut params, &mut opt_tr, &batch, 0.01, FineTuneMode::Confusion, 0, 0).unwrap();
    let c2 = changed(&before, &params);
    for (i, &c) in c2.iter().enumerate() {
        if disc.contains(&i) {
            assert!(!c, "phase 2 changed C");
        }
    }
    assert!(c2.iter().filter(|&&c| c).count() > c2.len() / 2);
}

#[test]
fn adversarial_gradient_vanishes_when_c_outputs_one_half() {
    let (model, mut params, mut rng) = setup(4);
    let cfg = model.config().clone();
    for name in ["disc.2.w", "disc.2.b"] {
        let id = params.find(name).unwrap();
        params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let synth: Vec<Tensor<f32>> = (0..3).map(|_| example(&mut rng, &cfg).mel).collect();
    let real: Vec<Tensor<f32>> = (0..2).map(|_| example(&mut rng, &cfg).mel).collect();
    let mut total = 0.0;
    for xs in [&synth, &real] {
        let refs: Vec<&Tensor<f32>> = xs.iter().collect();
        let windows = draw_windows(&cfg, refs.len(), &mut rng);
        let scale = 1.0 / refs.len() as f32;
        let (v, g) = adversarial_term(&model, &params, &refs, &windows, 0.5, scale, Scope::TRANSCRIBER).unwrap();
        total += v;
        for id in model.encoder_params() {
            if let Some(t) = g.get(id) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{}", params.name(id));
            }
        }
    }
    assert!((total - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn adversarial_gradient_reaches_the_encoder_from_both_domains() {
    let (model, params, mut rng) = setup(5);
    let cfg = model.config().clone();
    let synth = [example(&mut rng, &cfg).mel];
    let real = [example(&mut rng, &cfg).mel];
    for (x, target) in [(&synth[0], 0.5), (&real[0], 0.5), (&real[0], 1.0)] {
        let w = draw_windows(&cfg, 1, &mut rng);
        let (_, g) = adversarial_term(&model, &params, &[x], &w, target, 1.0, Scope::TRANSCRIBER).unwrap();
        let enc_norm: f32 = model
            .encoder_params()
            .iter()
            .filter_map(|&id| g.get(id))
            .map(|t| t.data().iter().map(|v| v * v).sum::<f32>())
            .sum();
        assert!(enc_norm > 0.0);
        assert!(model.discriminator_params().iter().all(|&id| g.get(id).is_none()));
    }
}

#[test]
fn discriminator_separates_two_clusters() {
    let (model, params, mut rng) = setup(6);
    let cfg = model.config().clone();
    let dim = cfg.disc_window * cfg.d_model;
    let direction: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let draw = |real: bool, rng: &mut ChaCha8Rng| {
        let sign = if real { 1.0 } else { -1.0 };
        let v = direction.iter().map(|d| sign * 0.5 * d + rng.random_range(-1.0..1.0)).collect();
        (Tensor::from_vec(1, dim, v).unwrap(), real)
    };
    let train: WindowSet = (0..200).map(|i| draw(i % 2 == 0, &mut rng)).collect();
    let test: WindowSet = (0..100).map(|i| draw(i % 2 == 0, &mut rng)).collect();
    let probe = train_probe(&model, &params, &train, 200, 16, 1e-3, &mut rng).unwrap();
    assert_eq!(discriminator_accuracy(&model, &probe, &test).unwrap(), 1.0);
    for id in model.transcriber_params() {
        assert_eq!(probe.get(id).data(), params.get(id).data());
    }
}

#[test]
fn overfits_one_repeated_example() {
    let (model, mut params, mut rng) = setup(7);
    let ex = example(&mut rng, model.config());
    let mut opt = Adam::new(AdamConfig::with_lr(3e-3), &params, model.transcriber_params());
    let batch = [ex.clone()];
    let first = pretrain_step(&model, &mut params, &mut opt, &batch, 0, 7).unwrap().transcription_ce;
    let mut last = first;
    for s in 1..200 {
        last = pretrain_step(&model, &mut params, &mut opt, &batch, s, 7).unwrap().transcription_ce;
    }
    assert!(last < 0.05 && last < first, "{first} -> {last}");
    assert_eq!(model.greedy_transcribe(&params, &ex.mel).unwrap(), ex.tokens);
}

fn pool(n: usize, seed: u64) -> (Vec<TrainExample>, Vec<Tensor<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = (0..n).map(|_| example(&mut rng, &tiny())).collect();
    let real = (0..n).map(|_| example(&mut rng, &tiny()).mel).collect();
    (synth, real)
}

fn small_run() -> TrainConfig {
    TrainConfig { seed: 11, batch_size: 2, ..TrainConfig::default() }
}

#[test]
fn same_seed_gives_identical_report_streams() {
    let (synth, real) = pool(5, 8);
    let run = || {
        let mut t = Trainer::new(tiny(), small_run()).unwrap();
        let mut out = Vec::new();
        for _ in 0..3 {
            out.push(t.pretrain(&synth).unwrap());
        }
        for _ in 0..2 {
            out.push(t.finetune(&synth, &real).unwrap());
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_from_a_checkpoint_is_exact() {
    let (synth, real) = pool(5, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");

    let mut straight = Trainer::new(tiny(), small_run()).unwrap();
    let mut a = Vec::new();
    for _ in 0..4 {
        a.push(straight.finetune(&synth, &real).unwrap());
    }

    let mut first = Trainer::new(tiny(), small_run()).unwrap();
    let mut b = Vec::new();
    for _ in 0..2 {
        b.push(first.finetune(&synth, &real).unwrap());
    }
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    for _ in 0..2 {
        b.push(resumed.finetune(&synth, &real).unwrap());
    }
    assert_eq!(a, b);
    for id in straight.params.ids() {
        assert_eq!(straight.params.get(id).data(), resumed.params.get(id).data());
    }
}

#[test]
fn non_finite_loss_aborts_with_the_seed() {
    let (synth, _) = pool(2, 10);
    let mut t = Trainer::new(tiny(), small_run()).unwrap();
    let id = t.params.ids().next().unwrap();
    t.params.get_mut(id).data_mut()[0] = f32::NAN;
    match t.pretrain(&synth) {
        Err(TrainError::NonFinite { step: 0, seed: 11, .. }) => {}
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(Trainer::new(tiny(), TrainConfig { batch_size: 0, ..TrainConfig::default() }).is_err());
    assert!(Trainer::new(tiny(), TrainConfig { disc_lr: -1.0, ..TrainConfig::default() }).is_err());
    let (synth, _) = pool(1, 0);
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ConfusionBatch::new(&cfg, &synth, &[], &mut rng).is_err());
}
