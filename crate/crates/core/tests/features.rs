use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthamt::audio::AudioBuffer;
use synthamt::features::{melspec, MelConfig, MelExtractor};

const N: usize = 40_960;

fn sine(freq: f64, amp: f64) -> AudioBuffer {
    let s = (0..N)
        .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()) as f32)
        .collect();
    AudioBuffer::new(s, 16_000)
}

/// Filter centres recomputed from the HTK mel formula.
fn centres(n_mels: usize, fmax: f64) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(fmax);
    (1..=n_mels).map(|i| hz(top * i as f64 / (n_mels + 1) as f64)).collect()
}

#[test]
fn sine_peaks_at_nearest_filter() {
    let c = centres(384, 8000.0);
    for f in [220.0, 440.0, 1000.0, 3000.0] {
        let want = (0..c.len())
            .min_by(|&a, &b| (c[a] - f).abs().partial_cmp(&(c[b] - f).abs()).unwrap())
            .unwrap();
        let m = melspec(&sine(f, 0.5)).unwrap();
        for t in [20, 128, 230] {
            let row = m.frame(t);
            let got = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert!(got.abs_diff(want) <= 1, "{f} Hz frame {t}: bin {got}, nearest centre {want}");
        }
    }
}

#[test]
fn scaling_shifts_log_energy_by_log_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f32> = (0..N).map(|_| rng.random_range(-0.5..0.5)).collect();
    let a = melspec(&AudioBuffer::new(x.clone(), 16_000)).unwrap();
    let b = melspec(&AudioBuffer::new(x.iter().map(|v| v * 0.25).collect(), 16_000)).unwrap();
    let floor = (1e-5f32).ln() + 2.0;
    let mut checked = 0;
    for (p, q) in a.data.iter().zip(&b.data) {
        if *q > floor {
            assert!((q - p - 0.25f32.ln()).abs() < 1e-3, "{p} {q}");
            checked += 1;
        }
    }
    assert!(checked > a.data.len() / 2);
}

#[test]
fn impulse_energy_is_centred_on_its_frame() {
    for n in [8000usize, 20_000, 33_333] {
        let mut x = vec![0.0f32; N];
        x[n] = 1.0;
        let m = melspec(&AudioBuffer::new(x, 16_000)).unwrap();
        let energy: Vec<f64> = (0..m.n_frames)
            .map(|t| m.frame(t).iter().map(|&v| f64::from(v).exp()).sum())
            .collect();
        let peak = (0..energy.len()).max_by(|&a, &b| energy[a].partial_cmp(&energy[b]).unwrap()).unwrap();
        let want = (n as f64 / 160.0).round() as usize;
        assert!(peak.abs_diff(want) <= 1, "impulse at {n}: frame {peak}, want {want}");
    }
}

#[test]
fn filterbank_is_triangular_and_non_negative() {
    let ex = MelExtractor::new(MelConfig::default()).unwrap();
    let fb = ex.filterbank();
    assert_eq!((fb.len(), fb[0].len()), (384, 1025));
    for row in &fb {
        assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
        if let (Some(&a), Some(&b)) = (nz.first(), nz.last()) {
            assert_eq!(nz.len(), b - a + 1, "support is contiguous");
        }
    }
    assert!(MelExtractor::new(MelConfig { fmax: 9000.0, ..MelConfig::default() }).is_err());
}
