mod common;

use common::*;
use synthamt_neural::{Graph, ModelConfig, ParamSet, Scope, Tensor, TranscriptionModel};

fn setup(cfg: ModelConfig, seed: u64) -> (TranscriptionModel, ParamSet<f32>) {
    let model = TranscriptionModel::new(cfg).unwrap();
    let params = model.init_params(&mut rng(seed));
    (model, params)
}

#[test]
fn parameter_count_matches_closed_form() {
    // Hand-computed for the default (full-width) configuration:
    // encoder  = 384*384+384 + 2*(2*768 + 4*(384*384+384) + 384*1024+1024 + 1024*384+384) + 768
    // decoder  = 389*384 + 3*(3*768 + 8*(384*384+384) + 384*1024+1024 + 1024*384+384) + 768 + 384*389+389
    // disc     = 3840*512+512 + 512*512+512 + 512+1
    let encoder = 147_840 + 2 * (1_536 + 591_360 + 787_840) + 768;
    let decoder = 149_376 + 3 * (2_304 + 1_182_720 + 787_840) + 768 + 149_765;
    let disc = 1_966_592 + 262_656 + 513;
    let expected = encoder + decoder + disc;
    let cfg = ModelConfig::default();
    assert_eq!(cfg.num_parameters(), expected);
    let model = TranscriptionModel::new(cfg).unwrap();
    let p: ParamSet<f32> = model.init_params(&mut rng(0));
    assert_eq!(p.num_values(), expected);

    let toy = ModelConfig::toy();
    let model = TranscriptionModel::new(toy.clone()).unwrap();
    let p: ParamSet<f32> = model.init_params(&mut rng(0));
    assert_eq!(p.num_values(), toy.num_parameters());
}

#[test]
fn encoder_output_shape_and_non_degeneracy() {
    let cfg = tiny_config();
    let (model, params) = setup(cfg.clone(), 1);
    let a: Tensor<f32> = random_tensor(&mut rng(2), cfg.n_frames, cfg.n_mels, 1.0);
    let b: Tensor<f32> = random_tensor(&mut rng(3), cfg.n_frames, cfg.n_mels, 1.0);
    let ma = model.memory(&params, &a).unwrap();
    let mb = model.memory(&params, &b).unwrap();
    assert_eq!(ma.shape(), [cfg.n_frames, cfg.d_model]);
    assert_ne!(ma, mb);
    assert!(ma.all_finite());

    let bad: Tensor<f32> = Tensor::zeros(cfg.n_frames + 1, cfg.n_mels);
    assert!(model.memory(&params, &bad).is_err());
}

#[test]
fn default_encoder_shape_is_256_by_384() {
    let (model, params) = setup(ModelConfig::default(), 1);
    let mel = Tensor::<f32>::full(256, 384, -5.0);
    assert_eq!(model.memory(&params, &mel).unwrap().shape(), [256, 384]);
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny_config();
    let (model, params) = setup(cfg.clone(), 4);
    let mel: Tensor<f32> = random_tensor(&mut rng(5), cfg.n_frames, cfg.n_mels, 1.0);
    let run = |prefix: &[usize]| {
        let mut g = Graph::new(&params);
        let m = model.encode(&mut g, &mel, Scope::NONE).unwrap();
        let l = model.decode_logits(&mut g, m, prefix, Scope::NONE).unwrap();
        g.value(l).clone()
    };
    let a = run(&[9, 1, 2, 3, 4]);
    let b = run(&[9, 1, 2, 7, 0]);
    assert_eq!(a.shape(), [5, cfg.vocab_size]);
    for r in 0..3 {
        assert_eq!(a.row(r), b.row(r), "row {r} saw a future token");
    }
    assert_ne!(a.row(3), b.row(3));

    let too_long = vec![9usize; cfg.max_target_len + 1];
    let mut g = Graph::new(&params);
    let m = model.encode(&mut g, &mel, Scope::NONE).unwrap();
    assert!(model.decode_logits(&mut g, m, &too_long, Scope::NONE).is_err());
}

#[test]
fn softmax_rows_are_distributions() {
    let params = ParamSet::<f64>::new();
    let mut g = Graph::new(&params);
    let x = g.input(random_tensor(&mut rng(9), 7, 7, 6.0));
    for causal in [false, true] {
        let s = g.softmax(x, causal);
        let v = g.value(s);
        for r in 0..7 {
            let row = v.row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            if causal {
                assert!(row[r + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }
}

#[test]
fn discriminator_range_and_zero_weights() {
    let cfg = tiny_config();
    let (model, mut params) = setup(cfg.clone(), 6);
    let window: Tensor<f32> = random_tensor(&mut rng(7), cfg.disc_window, cfg.d_model, 3.0);
    let prob = |params: &ParamSet<f32>| {
        let mut g = Graph::new(params);
        let w = g.input(window.clone());
        let p = model.discriminate(&mut g, w, Scope::NONE).unwrap();
        g.value(p).get(0, 0)
    };
    let p = prob(&params);
    assert!(p > 0.0 && p < 1.0);
    for id in model.discriminator_params() {
        let t = params.get_mut(id);
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    assert_eq!(prob(&params), 0.5);

    let mut g = Graph::new(&params);
    let w = g.input(Tensor::zeros(cfg.disc_window + 1, cfg.d_model));
    assert!(model.discriminate(&mut g, w, Scope::NONE).is_err());
}

#[test]
fn greedy_terminates_and_is_deterministic() {
    let cfg = tiny_config();
    let (model, params) = setup(cfg.clone(), 8);
    let mel: Tensor<f32> = random_tensor(&mut rng(9), cfg.n_frames, cfg.n_mels, 1.0);
    let a = model.greedy_transcribe(&params, &mel).unwrap();
    let b = model.greedy_transcribe(&params, &mel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0], cfg.bos_id);
    assert!(a.len() <= cfg.max_target_len);
    assert!(a.len() == cfg.max_target_len || *a.last().unwrap() == cfg.eos_id);
}

#[test]
fn forward_is_bit_deterministic_for_fixed_seed() {
    let cfg = tiny_config();
    let (model, p1) = setup(cfg.clone(), 10);
    let (_, p2) = setup(cfg.clone(), 10);
    assert_eq!(p1, p2);
    let mel: Tensor<f32> = random_tensor(&mut rng(11), cfg.n_frames, cfg.n_mels, 1.0);
    assert_eq!(model.memory(&p1, &mel).unwrap(), model.memory(&p2, &mel).unwrap());
}

#[test]
fn incremental_decode_matches_full_prefix() {
    let cfg = tiny_config();
    let (model, params) = setup(cfg.clone(), 12);
    let mel: Tensor<f32> = random_tensor(&mut rng(13), cfg.n_frames, cfg.n_mels, 1.0);
    let memory = model.memory(&params, &mel).unwrap();
    let cross = model.cross_memory(&params, &memory).unwrap();
    let mut state = model.start_decode(&params, &memory).unwrap();
    let prefix = [9usize, 3, 3, 0, 7, 1, 5];
    for t in 0..prefix.len() {
        let step = model.decode_step(&params, &mut state, prefix[t]).unwrap();
        let full = model.next_logits(&params, &cross, &prefix[..=t]).unwrap();
        for (a, b) in step.iter().zip(&full) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "position {t}: {a} vs {b}");
        }
    }
    assert_eq!(state.len(), prefix.len());
}
