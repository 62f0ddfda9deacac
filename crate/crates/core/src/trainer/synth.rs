//! Synthetic speaker corpus for desk-scale training runs.
//!
//! Each frame is `speaker_center + phone_center[c_t] + channel + noise`,
//! where phone centers are shared by all speakers, the phone index follows a
//! sticky random walk (segments of a few frames), and `channel` is a
//! per-utterance offset. A good utterance embedding has to average the phone
//! content away while keeping the speaker center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::{perturbed_speaker, SPEED_FACTORS};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// Held out per speaker for validation trials.
    pub validation_per_speaker: usize,
    pub input_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub phones: usize,
    pub speaker_scale: f64,
    pub phone_scale: f64,
    pub channel_scale: f64,
    pub noise_scale: f64,
    /// Probability that the phone changes from one frame to the next.
    pub phone_switch: f64,
    /// Adds two speed-perturbed copies of every training speaker as extra classes.
    pub speed_perturb: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speakers: 8,
            utterances_per_speaker: 50,
            validation_per_speaker: 10,
            input_dim: 20,
            min_frames: 300,
            max_frames: 700,
            phones: 6,
            speaker_scale: 1.0,
            phone_scale: 2.0,
            channel_scale: 0.5,
            noise_scale: 1.5,
            phone_switch: 0.15,
            speed_perturb: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(invalid!("synthetic corpus needs at least 2 speakers, got {}", self.speakers));
        }
        if self.validation_per_speaker < 1 || self.validation_per_speaker >= self.utterances_per_speaker {
            return Err(invalid!(
                "validation_per_speaker must lie in [1, utterances_per_speaker - 1], got {}",
                self.validation_per_speaker
            ));
        }
        if self.input_dim == 0 || self.phones == 0 || self.min_frames < 2 || self.min_frames > self.max_frames {
            return Err(invalid!("synthetic corpus needs input_dim >= 1, phones >= 1 and 2 <= min_frames <= max_frames"));
        }
        let scales = [self.speaker_scale, self.phone_scale, self.channel_scale, self.noise_scale];
        if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) || !(0.0..=1.0).contains(&self.phone_switch) {
            return Err(invalid!("synthetic corpus scales must be finite and >= 0, phone_switch in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    /// Training class index (speed-perturbed copies are their own classes).
    pub class: usize,
    /// `[T, input_dim]`.
    pub frames: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    config: SynthConfig,
    class_names: Vec<String>,
    perturbed: Vec<bool>,
    train: Vec<SynthUtterance>,
    validation: Vec<SynthUtterance>,
}

impl SynthCorpus {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.input_dim;
        let gauss = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
            (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let phones: Vec<Vec<f64>> = (0..config.phones).map(|_| gauss(&mut rng, config.phone_scale)).collect();
        let centers: Vec<Vec<f64>> = (0..config.speakers).map(|_| gauss(&mut rng, config.speaker_scale)).collect();

        let mut class_names: Vec<String> = (0..config.speakers).map(|s| format!("spk{s:03}")).collect();
        let mut perturbed = vec![false; config.speakers];
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for (s, center) in centers.iter().enumerate() {
            for u in 0..config.utterances_per_speaker {
                let t_len = rng.gen_range(config.min_frames..=config.max_frames);
                let channel = gauss(&mut rng, config.channel_scale);
                let mut phone = rng.gen_range(0..config.phones);
                let mut data = Vec::with_capacity(t_len * d);
                for _ in 0..t_len {
                    if rng.gen::<f64>() < config.phone_switch {
                        phone = rng.gen_range(0..config.phones);
                    }
                    for k in 0..d {
                        let n: f64 = rng.sample(StandardNormal);
                        data.push(center[k] + phones[phone][k] + channel[k] + config.noise_scale * n);
                    }
                }
                let utt = SynthUtterance {
                    id: format!("{}-u{u:03}", class_names[s]),
                    class: s,
                    frames: Tensor::new(vec![t_len, d], data)?,
                };
                if u < config.utterances_per_speaker - config.validation_per_speaker {
                    train.push(utt);
                } else {
                    validation.push(utt);
                }
            }
        }
        if config.speed_perturb {
            let originals: Vec<SynthUtterance> = train.clone();
            for factor in SPEED_FACTORS {
                let base = class_names.len();
                for s in 0..config.speakers {
                    class_names.push(perturbed_speaker(&class_names[s], factor));
                    perturbed.push(true);
                }
                for utt in &originals {
                    train.push(SynthUtterance {
                        id: format!("{}-sp{factor}", utt.id),
                        class: base + utt.class,
                        frames: speed_warp(&utt.frames, factor)?,
                    });
                }
            }
        }
        Ok(Self { config: config.clone(), class_names, perturbed, train, validation })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn is_perturbed(&self, class: usize) -> bool {
        self.perturbed[class]
    }

    pub fn train(&self) -> &[SynthUtterance] {
        &self.train
    }

    pub fn validation(&self) -> &[SynthUtterance] {
        &self.validation
    }

    /// The corpus without speed-perturbed classes. Remaining classes keep
    /// their relative order and are renumbered densely.
    pub fn without_perturbed(&self) -> Self {
        let keep: Vec<usize> = (0..self.classes()).filter(|&c| !self.perturbed[c]).collect();
        let remap = |c: usize| keep.iter().position(|&k| k == c);
        let train = self
            .train
            .iter()
            .filter_map(|u| remap(u.class).map(|class| SynthUtterance { class, ..u.clone() }))
            .collect();
        let validation = self
            .validation
            .iter()
            .filter_map(|u| remap(u.class).map(|class| SynthUtterance { class, ..u.clone() }))
            .collect();
        Self {
            config: SynthConfig { speed_perturb: false, ..self.config.clone() },
            class_names: keep.iter().map(|&c| self.class_names[c].clone()).collect(),
            perturbed: vec![false; keep.len()],
            train,
            validation,
        }
    }
}

/// Feature-domain analogue of speed perturbation: resamples along time to
/// `round(T / factor)` frames and along the feature axis by `factor` (a
/// speed change scales every frequency), both by linear interpolation.
pub fn speed_warp(frames: &Tensor, factor: f64) -> Result<Tensor> {
    let (t_len, d) = match *frames.shape() {
        [t, d] => (t, d),
        _ => return Err(crate::error::shape_err!("speed_warp expects [T, d], got {:?}", frames.shape())),
    };
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(invalid!("speed factor must be positive, got {factor}"));
    }
    let interp = |get: &dyn Fn(usize) -> f64, n: usize, pos: f64| {
        let k = (pos.floor() as usize).min(n - 1);
        let frac = (pos - k as f64).clamp(0.0, 1.0);
        if k + 1 < n {
            get(k) + frac * (get(k + 1) - get(k))
        } else {
            get(n - 1)
        }
    };
    let x = frames.data();
    let t_out = ((t_len as f64 / factor).round() as usize).max(1);
    let mut out = Vec::with_capacity(t_out * d);
    for i in 0..t_out {
        let tp = i as f64 * factor;
        let row: Vec<f64> = (0..d).map(|k| interp(&|t| x[t * d + k], t_len, tp)).collect();
        for k in 0..d {
            out.push(interp(&|j| row[j], d, k as f64 * factor));
        }
    }
    Tensor::new(vec![t_out, d], out)
}
