//! Online chain augmentation and speed perturbation.
//!
//! An [`EffectChain`] is an ordered list of effects, each with its own
//! activation probability. Applying the chain first draws every activation
//! decision, then draws parameters for the active effects, so the activation
//! pattern for a seed does not depend on which effects happen to fire.
//!
//! All randomness comes from a ChaCha8 generator seeded explicitly. Corpus
//! tools derive per-utterance seeds with [`utterance_seed`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};
use crate::features::{mean_power, Waveform};

/// Supported time-stretch factors.
pub const STRETCH_RANGE: (f64, f64) = (0.8, 1.25);

/// Speed factors of the 3-fold perturbation (the original plus two copies).
pub const SPEED_FACTORS: [f64; 2] = [0.9, 1.1];

/// Seed for one utterance: 64-bit FNV-1a over the little-endian bytes of
/// `master_seed` followed by the UTF-8 bytes of `utterance_id`.
pub fn utterance_seed(master_seed: u64, utterance_id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    master_seed
        .to_le_bytes()
        .iter()
        .chain(utterance_id.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Speaker label given to a speed-perturbed copy.
pub fn perturbed_speaker(speaker: &str, factor: f64) -> String {
    format!("{speaker}-sp{factor}")
}

/// One stage of the chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    /// Gain drawn uniformly in `[min_db, max_db]`.
    Gain { min_db: f64, max_db: f64 },
    /// Gaussian white noise at an SNR drawn in `[min_snr_db, max_snr_db]`.
    WhiteNoise { min_snr_db: f64, max_snr_db: f64 },
    /// Reverberation with a random room impulse response followed by a random
    /// additive noise at an SNR drawn in the range.
    ReverbNoise { rirs: Vec<Waveform>, noises: Vec<Waveform>, min_snr_db: f64, max_snr_db: f64 },
    /// Pitch-preserving stretch by a factor drawn in `[min_factor, max_factor]`.
    TimeStretch { min_factor: f64, max_factor: f64 },
}

impl Effect {
    pub fn name(&self) -> &'static str {
        match self {
            Effect::Gain { .. } => "gain",
            Effect::WhiteNoise { .. } => "white-noise",
            Effect::ReverbNoise { .. } => "reverb-noise",
            Effect::TimeStretch { .. } => "time-stretch",
        }
    }

    fn validate(&self) -> Result<()> {
        let range = |lo: f64, hi: f64, what: &str| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(invalid!("{what} range [{lo}, {hi}] is empty or non-finite"))
            }
        };
        match self {
            Effect::Gain { min_db, max_db } => range(*min_db, *max_db, "gain"),
            Effect::WhiteNoise { min_snr_db, max_snr_db } => range(*min_snr_db, *max_snr_db, "SNR"),
            Effect::ReverbNoise { rirs, noises, min_snr_db, max_snr_db } => {
                if rirs.is_empty() || noises.is_empty() {
                    return Err(invalid!("reverb-noise effect needs at least one RIR and one noise recording"));
                }
                range(*min_snr_db, *max_snr_db, "SNR")
            }
            Effect::TimeStretch { min_factor, max_factor } => {
                range(*min_factor, *max_factor, "stretch")?;
                if *min_factor < STRETCH_RANGE.0 || *max_factor > STRETCH_RANGE.1 {
                    return Err(invalid!("stretch factors must lie in [{}, {}]", STRETCH_RANGE.0, STRETCH_RANGE.1));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainEffect {
    pub probability: f64,
    pub effect: Effect,
}

/// Ordered effects with independent activation probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectChain {
    effects: Vec<ChainEffect>,
}

impl EffectChain {
    pub fn new(effects: Vec<ChainEffect>) -> Result<Self> {
        for e in &effects {
            if !(0.0..=1.0).contains(&e.probability) {
                return Err(invalid!("{} probability {} outside [0, 1]", e.effect.name(), e.probability));
            }
            e.effect.validate()?;
        }
        Ok(Self { effects })
    }

    /// Gain 0.2, white noise 0.2, reverberation + noise 0.6, time stretch 0.2.
    pub fn online_default(rirs: Vec<Waveform>, noises: Vec<Waveform>) -> Result<Self> {
        Self::new(vec![
            ChainEffect { probability: 0.2, effect: Effect::Gain { min_db: -6.0, max_db: 6.0 } },
            ChainEffect { probability: 0.2, effect: Effect::WhiteNoise { min_snr_db: 0.0, max_snr_db: 20.0 } },
            ChainEffect {
                probability: 0.6,
                effect: Effect::ReverbNoise { rirs, noises, min_snr_db: 0.0, max_snr_db: 20.0 },
            },
            ChainEffect { probability: 0.2, effect: Effect::TimeStretch { min_factor: 0.9, max_factor: 1.1 } },
        ])
    }

    /// The default chain without the corpus-dependent reverberation stage.
    pub fn basic() -> Result<Self> {
        Self::new(vec![
            ChainEffect { probability: 0.2, effect: Effect::Gain { min_db: -6.0, max_db: 6.0 } },
            ChainEffect { probability: 0.2, effect: Effect::WhiteNoise { min_snr_db: 0.0, max_snr_db: 20.0 } },
            ChainEffect { probability: 0.2, effect: Effect::TimeStretch { min_factor: 0.9, max_factor: 1.1 } },
        ])
    }

    pub fn effects(&self) -> &[ChainEffect] {
        &self.effects
    }

    /// Which effects fire for `seed`.
    pub fn activations(&self, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.draw_activations(&mut rng)
    }

    fn draw_activations(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        self.effects.iter().map(|e| rng.gen::<f64>() < e.probability).collect()
    }
}

/// Runs the chain on `wav`. The output is clamped to `[-1, 1]`.
pub fn chain_apply(wav: &Waveform, chain: &EffectChain, seed: u64) -> Result<Waveform> {
    Ok(chain_apply_traced(wav, chain, seed)?.0)
}

/// Like [`chain_apply`], also returning which effects fired.
pub fn chain_apply_traced(wav: &Waveform, chain: &EffectChain, seed: u64) -> Result<(Waveform, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active = chain.draw_activations(&mut rng);
    let mut out = wav.clone();
    for (e, _) in chain.effects.iter().zip(&active).filter(|(_, &on)| on) {
        out = match &e.effect {
            Effect::Gain { min_db, max_db } => {
                let db = draw(&mut rng, *min_db, *max_db);
                let g = 10f64.powf(db / 20.0);
                out.with_samples(out.samples().iter().map(|s| s * g).collect())?
            }
            Effect::WhiteNoise { min_snr_db, max_snr_db } => {
                let snr = draw(&mut rng, *min_snr_db, *max_snr_db);
                let noise: Vec<f64> = (0..out.len()).map(|_| rng.sample(StandardNormal)).collect();
                add_noise_at_snr(&out, &out.with_samples(noise)?, snr, rng.gen())?
            }
            Effect::ReverbNoise { rirs, noises, min_snr_db, max_snr_db } => {
                let rir = rirs.choose(&mut rng).expect("validated nonempty");
                let noise = noises.choose(&mut rng).expect("validated nonempty");
                let snr = draw(&mut rng, *min_snr_db, *max_snr_db);
                let reverbed = convolve_rir(&out, rir)?;
                add_noise_at_snr(&reverbed, noise, snr, rng.gen())?
            }
            Effect::TimeStretch { min_factor, max_factor } => {
                time_stretch(&out, draw(&mut rng, *min_factor, *max_factor))?
            }
        };
    }
    Ok((out.clamped(), active))
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Amplitude factor that brings noise of power `noise_power` to `snr_db`
/// below a signal of power `signal_power`.
pub fn snr_scale(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds `noise` so that `10 log10(P_signal / P_noise) = snr_db`. The noise is
/// looped from a seeded random offset (or cropped) to the signal length, and
/// its power is measured on exactly the segment that gets mixed in.
pub fn add_noise_at_snr(wav: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if noise.is_empty() || noise.power() == 0.0 {
        return Err(Error::Degenerate("noise recording has zero energy".into()));
    }
    if !snr_db.is_finite() {
        return Err(invalid!("SNR must be finite, got {snr_db}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..noise.len());
    let segment: Vec<f64> = (0..wav.len()).map(|i| noise.samples()[(offset + i) % noise.len()]).collect();
    let seg_power = mean_power(&segment);
    if seg_power == 0.0 {
        // the chosen stretch happens to be silent; fall back to the whole file
        let scale = snr_scale(wav.power(), noise.power(), snr_db);
        let out = wav.samples().iter().enumerate().map(|(i, s)| s + scale * noise.samples()[i % noise.len()]);
        return wav.with_samples(out.collect());
    }
    let scale = snr_scale(wav.power(), seg_power, snr_db);
    wav.with_samples(wav.samples().iter().zip(&segment).map(|(s, n)| s + scale * n).collect())
}

/// Linear convolution, direct for short kernels and FFT-based otherwise.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let n = x.len() + h.len() - 1;
    if h.len().min(x.len()) <= 64 {
        let mut y = vec![0.0; n];
        for (i, &xv) in x.iter().enumerate() {
            for (j, &hv) in h.iter().enumerate() {
                y[i + j] += xv * hv;
            }
        }
        return y;
    }
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Reverberates `wav` with `rir`: full convolution, trimmed to the input length
/// starting at the RIR's peak tap, then rescaled to the input RMS.
pub fn convolve_rir(wav: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(invalid!("room impulse response is empty"));
    }
    let peak = rir
        .samples()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .map(|(i, v)| (i, *v))
        .expect("nonempty");
    if peak.1 == 0.0 {
        return Err(Error::Degenerate("room impulse response is all zeros".into()));
    }
    let full = convolve(wav.samples(), rir.samples());
    let mut y = full[peak.0..peak.0 + wav.len()].to_vec();
    let (before, after) = (wav.rms(), mean_power(&y).sqrt());
    if after > 0.0 {
        let g = before / after;
        y.iter_mut().for_each(|v| *v *= g);
    }
    wav.with_samples(y)
}

/// Resamples by linear interpolation to `round(N / factor)` samples at the
/// same rate, so both tempo and pitch scale by `factor`.
pub fn speed_perturb(wav: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(invalid!("speed factor must be positive, got {factor}"));
    }
    let x = wav.samples();
    let n_out = (x.len() as f64 / factor).round() as usize;
    let out = (0..n_out)
        .map(|i| {
            let pos = i as f64 * factor;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            match (x.get(k), x.get(k + 1)) {
                (Some(&a), Some(&b)) => a + frac * (b - a),
                (Some(&a), None) => a,
                _ => 0.0,
            }
        })
        .collect();
    wav.with_samples(out)
}

/// Waveform-similarity overlap-add (WSOLA) time stretch.
///
/// The output has `round(N / factor)` samples at the original rate and the
/// original pitch. Analysis frames of 20 ms are taken at hop `factor * H_s`
/// and shifted by up to `H_s / 2` to best match the natural continuation of
/// the previous frame; synthesis uses a Hann window at 50 % overlap,
/// normalized by the accumulated window.
pub fn time_stretch(wav: &Waveform, factor: f64) -> Result<Waveform> {
    if !(STRETCH_RANGE.0..=STRETCH_RANGE.1).contains(&factor) {
        return Err(invalid!(
            "time-stretch factor {factor} outside the supported range [{}, {}]",
            STRETCH_RANGE.0,
            STRETCH_RANGE.1
        ));
    }
    let x = wav.samples();
    let n_out = (x.len() as f64 / factor).round() as usize;
    let frame = ((wav.sample_rate() as f64 * 0.02).round() as usize).max(8) & !1;
    let hop = frame / 2;
    let tol = hop / 2;
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n as f64 + 0.5) / frame as f64).cos())
        .collect();
    let at = |i: isize| -> f64 {
        if i >= 0 && (i as usize) < x.len() {
            x[i as usize]
        } else {
            0.0
        }
    };
    // candidate shifts ordered by |delta| so that ties keep the smallest shift
    let mut shifts: Vec<isize> = (-(tol as isize)..=tol as isize).collect();
    shifts.sort_by_key(|d| (d.abs(), *d));

    let mut y = vec![0.0; n_out + frame];
    let mut wsum = vec![0.0; n_out + frame];
    let mut prev_start: isize = 0;
    let mut j = 0usize;
    while j * hop < n_out {
        let nominal = (j as f64 * hop as f64 * factor).round() as isize;
        let start = if j == 0 {
            0
        } else {
            let natural = prev_start + hop as isize;
            let mut best = (f64::NEG_INFINITY, nominal);
            for &d in &shifts {
                let cand = nominal + d;
                let (mut num, mut e1, mut e2) = (0.0, 0.0, 0.0);
                for n in 0..frame as isize {
                    let (a, b) = (at(cand + n), at(natural + n));
                    num += a * b;
                    e1 += a * a;
                    e2 += b * b;
                }
                let score = if e1 > 0.0 && e2 > 0.0 { num / (e1 * e2).sqrt() } else { 0.0 };
                if score > best.0 + 1e-12 {
                    best = (score, cand);
                }
            }
            best.1
        };
        for n in 0..frame {
            y[j * hop + n] += window[n] * at(start + n as isize);
            wsum[j * hop + n] += window[n];
        }
        prev_start = start;
        j += 1;
    }
    y.truncate(n_out);
    for (v, w) in y.iter_mut().zip(&wsum) {
        if *w > 1e-9 {
            *v /= w;
        }
    }
    wav.with_samples(y)
}
