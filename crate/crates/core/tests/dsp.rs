use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svtk::augment::{
    add_noise_at_snr, chain_apply, chain_apply_traced, convolve, convolve_rir, speed_perturb, time_stretch, ChainEffect,
    Effect, EffectChain,
};
use svtk::features::Waveform;
use svtk_testkit::{peak_frequency, power};

const SR: u32 = 16000;

fn tone(freq: f64, n: usize, amp: f64) -> Waveform {
    Waveform::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64).sin()).collect(), SR).unwrap()
}

fn noise(seed: u64, n: usize, amp: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.gen_range(-amp..amp)).collect(), SR).unwrap()
}

fn peak(w: &Waveform) -> f64 {
    peak_frequency(w.samples(), SR as f64)
}

#[test]
fn noise_mixing_hits_the_requested_snr() {
    let speech = tone(220.0, 16000, 0.3);
    for (seed, snr) in [(1, -5.0), (2, 0.0), (3, 7.5), (4, 20.0), (5, 35.0)] {
        // shorter than the signal so the noise has to loop
        let n = noise(seed, 5000, 0.4);
        let mixed = add_noise_at_snr(&speech, &n, snr, seed).unwrap();
        let added: Vec<f64> = mixed.samples().iter().zip(speech.samples()).map(|(m, s)| m - s).collect();
        let measured = 10.0 * (power(speech.samples()) / power(&added)).log10();
        assert!((measured - snr).abs() <= 0.5, "requested {snr} dB, measured {measured} dB");
    }
}

#[test]
fn noise_mixing_limits() {
    let speech = tone(300.0, 4000, 0.5);
    let quiet = add_noise_at_snr(&speech, &noise(1, 4000, 0.5), 120.0, 0).unwrap();
    assert!(quiet.samples().iter().zip(speech.samples()).all(|(a, b)| (a - b).abs() < 1e-5));
    assert!(add_noise_at_snr(&speech, &Waveform::new(vec![0.0; 100], SR).unwrap(), 10.0, 0).is_err());
}

#[test]
fn speed_perturbation_scales_pitch() {
    let src = tone(100.0, 32000, 0.5);
    for factor in [0.9, 1.1] {
        let out = speed_perturb(&src, factor).unwrap();
        assert_eq!(out.len(), (32000.0 / factor).round() as usize);
        let f = peak(&out);
        let want = 100.0 * factor;
        assert!((f - want).abs() <= 0.01 * want, "factor {factor}: peak {f} Hz, expected {want}");
    }
    let out = speed_perturb(&src, 1.1).unwrap();
    assert!((peak(&out) - 110.0).abs() <= 1.0);
    assert_eq!(speed_perturb(&tone(50.0, 9000, 0.1), 0.9).unwrap().len(), 10000);
}

#[test]
fn time_stretch_preserves_pitch() {
    let src = tone(200.0, 32000, 0.5);
    let hop = (0.02 * SR as f64 / 2.0) as usize;
    for factor in [0.8, 0.9, 1.1, 1.2, 1.25] {
        let out = time_stretch(&src, factor).unwrap();
        let want = (32000.0 / factor).round() as i64;
        assert!((out.len() as i64 - want).abs() <= hop as i64, "factor {factor}: len {}", out.len());
        let f = peak(&out);
        assert!((f - 200.0).abs() <= 4.0, "factor {factor}: peak {f}");
    }
    let same = time_stretch(&src, 1.0).unwrap();
    let rms = (same.samples().iter().zip(src.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 32000.0).sqrt();
    assert!(rms <= 1e-6);
    assert!(time_stretch(&src, 1.3).is_err());
    assert!(time_stretch(&src, 0.7).is_err());
}

#[test]
fn rir_convolution_matches_direct_sum() {
    let x = noise(9, 3000, 0.5);
    let mut taps = vec![0.0; 300];
    taps[0] = 0.4;
    taps[250] = 0.25;
    let rir = Waveform::new(taps.clone(), SR).unwrap();
    let out = convolve_rir(&x, &rir).unwrap();
    // peak tap at 0: plain causal convolution, then renormalized to the input RMS
    let direct: Vec<f64> = (0..3000)
        .map(|n| (0..300).filter(|&k| k <= n).map(|k| taps[k] * x.samples()[n - k]).sum())
        .collect();
    let gain = x.rms() / (power(&direct)).sqrt();
    for (a, b) in out.samples().iter().zip(&direct) {
        assert!((a - gain * b).abs() <= 1e-10);
    }
    let long: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
    let fast = convolve(x.samples(), &long);
    for n in [0, 17, 199, 1500, 3198] {
        let d: f64 = (0..200).filter(|&k| k <= n && n - k < 3000).map(|k| long[k] * x.samples()[n - k]).sum();
        assert!((fast[n] - d).abs() <= 1e-10);
    }
}

#[test]
fn delta_rir_is_identity() {
    let x = noise(3, 1000, 0.5);
    for c in [1.0, 0.25, 3.0] {
        let mut taps = vec![0.0; 50];
        taps[20] = c;
        let out = convolve_rir(&x, &Waveform::new(taps, SR).unwrap()).unwrap();
        for (a, b) in out.samples().iter().zip(x.samples()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn chain_activation_frequencies() {
    let rir = Waveform::new(vec![1.0], SR).unwrap();
    let chain = EffectChain::online_default(vec![rir.clone()], vec![noise(1, 100, 0.5)]).unwrap();
    let nominal = [0.2, 0.2, 0.6, 0.2];
    let mut hits = [0usize; 4];
    for seed in 0..10_000u64 {
        for (h, a) in hits.iter_mut().zip(chain.activations(seed)) {
            *h += a as usize;
        }
    }
    for (h, p) in hits.iter().zip(nominal) {
        let freq = *h as f64 / 10_000.0;
        assert!((freq - p).abs() <= 0.02, "measured {freq}, nominal {p}");
    }
}

#[test]
fn chain_contracts() {
    let x = tone(180.0, 8000, 0.6);
    let off = EffectChain::new(vec![
        ChainEffect { probability: 0.0, effect: Effect::Gain { min_db: -6.0, max_db: 6.0 } },
        ChainEffect { probability: 0.0, effect: Effect::TimeStretch { min_factor: 0.9, max_factor: 1.1 } },
    ])
    .unwrap();
    assert_eq!(chain_apply(&x, &off, 5).unwrap(), x);
    let unity = EffectChain::new(vec![ChainEffect { probability: 1.0, effect: Effect::Gain { min_db: 0.0, max_db: 0.0 } }]).unwrap();
    assert_eq!(chain_apply(&x, &unity, 5).unwrap(), x);

    let basic = EffectChain::basic().unwrap();
    for seed in 0..40 {
        let (a, fired) = chain_apply_traced(&x, &basic, seed).unwrap();
        assert_eq!(a, chain_apply(&x, &basic, seed).unwrap());
        assert!(a.samples().iter().all(|v| (-1.0..=1.0).contains(v)));
        if !fired[2] {
            assert_eq!(a.len(), x.len());
        }
    }
    let empty = EffectChain::new(vec![ChainEffect {
        probability: 0.5,
        effect: Effect::ReverbNoise { rirs: vec![], noises: vec![], min_snr_db: 0.0, max_snr_db: 10.0 },
    }]);
    assert!(empty.is_err());
}
