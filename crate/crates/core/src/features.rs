//! Log-mel filterbank features and cepstral mean normalization.
//!
//! Frames are Hamming-windowed (no pre-emphasis, no dither), zero-padded to a
//! power-of-two FFT, and reduced to power spectra. Triangular filters are
//! spaced uniformly on the HTK mel scale `2595 log10(1 + f / 700)` with unit
//! peak height. Energies are floored at `log_floor` before the natural log.

use std::fmt;
use std::io::{Read, Seek, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean of the squared samples.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Same sample rate, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }

    /// Clamps every sample into `[-1, 1]`.
    pub fn clamped(mut self) -> Self {
        self.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
        self
    }

    /// Reads 16-bit signed little-endian mono PCM. Anything else is rejected.
    pub fn from_wav_reader<R: Read>(reader: R) -> Result<Self> {
        let reader = hound::WavReader::new(reader)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!(
                "expected 16-bit PCM mono WAV, got {} channel(s), {} bits, {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_wav_reader(std::io::BufReader::new(file))
    }

    /// Writes 16-bit PCM mono, clamping to `[-1, 1]`.
    pub fn to_wav_writer<W: Write + Seek>(&self, writer: W) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::new(writer, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_wav_writer(std::io::BufWriter::new(file))
    }
}

pub(crate) fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Filterbank settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    /// FFT size; the next power of two at or above the window length when unset.
    pub n_fft: Option<usize>,
    pub f_min: f64,
    /// Upper filterbank edge; Nyquist when unset.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self { n_mels: 81, win_ms: 25.0, hop_ms: 10.0, n_fft: None, f_min: 20.0, f_max: None, log_floor: 1e-10 }
    }
}

impl FbankConfig {
    pub fn with_mels(n_mels: usize) -> Self {
        Self { n_mels, ..Self::default() }
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.win_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.n_fft.unwrap_or_else(|| self.window_samples(sample_rate).next_power_of_two())
    }

    pub fn upper_edge(&self, sample_rate: u32) -> f64 {
        self.f_max.unwrap_or(sample_rate as f64 / 2.0)
    }

    /// Reads `key = value` lines (`n_mels`, `win_ms`, `hop_ms`, `n_fft`,
    /// `f_min`, `f_max`, `log_floor`) over the defaults. `n_fft` and `f_max`
    /// accept `auto`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Format(format!("config line {}: cannot parse `{v}`", n + 1));
            let real = |v: &str| v.parse::<f64>().map_err(|_| bad());
            match k {
                "n_mels" => cfg.n_mels = v.parse().map_err(|_| bad())?,
                "win_ms" => cfg.win_ms = real(v)?,
                "hop_ms" => cfg.hop_ms = real(v)?,
                "n_fft" => cfg.n_fft = if v == "auto" { None } else { Some(v.parse().map_err(|_| bad())?) },
                "f_min" => cfg.f_min = real(v)?,
                "f_max" => cfg.f_max = if v == "auto" { None } else { Some(real(v)?) },
                "log_floor" => cfg.log_floor = real(v)?,
                _ => return Err(Error::Format(format!("config line {}: unknown key `{k}`", n + 1))),
            }
        }
        Ok(cfg)
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        let n_fft = self.fft_size(sample_rate);
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = self.upper_edge(sample_rate);
        if self.n_mels == 0 {
            return Err(invalid!("n_mels must be >= 1"));
        }
        if win == 0 || hop == 0 {
            return Err(invalid!("window and hop must span at least one sample"));
        }
        if !n_fft.is_power_of_two() || n_fft < win {
            return Err(invalid!("n_fft = {n_fft} must be a power of two >= window length {win}"));
        }
        if !(self.f_min >= 0.0 && self.f_min < f_max && f_max <= nyquist) {
            return Err(invalid!("need 0 <= f_min < f_max <= {nyquist} Hz, got {} .. {f_max}", self.f_min));
        }
        if !(self.log_floor > 0.0) {
            return Err(invalid!("log_floor must be positive"));
        }
        Ok(())
    }
}

impl fmt::Display for FbankConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let auto = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        writeln!(f, "n_mels = {}", self.n_mels)?;
        writeln!(f, "win_ms = {}", self.win_ms)?;
        writeln!(f, "hop_ms = {}", self.hop_ms)?;
        writeln!(f, "n_fft = {}", auto(self.n_fft.map(|v| v.to_string())))?;
        writeln!(f, "f_min = {}", self.f_min)?;
        writeln!(f, "f_max = {}", auto(self.f_max.map(|v| v.to_string())))?;
        writeln!(f, "log_floor = {}", self.log_floor)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `1 + floor((n - win) / hop)`, or zero if the signal is shorter than a window.
pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if n < win {
        0
    } else {
        1 + (n - win) / hop
    }
}

/// Triangular mel filters over the one-sided spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    centers_hz: Vec<f64>,
    /// `[n_mels][n_fft / 2 + 1]`
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &FbankConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let n_fft = cfg.fft_size(sample_rate);
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_edge(sample_rate)));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { centers_hz: edges[1..=cfg.n_mels].to_vec(), weights })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Symmetric Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// One-sided power spectrum `|X_k|^2`, `k = 0 ..= n_fft / 2`, of a frame
/// zero-padded to `n_fft`.
pub fn power_spectrum(frame: &[f64], n_fft: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n_fft, Complex::new(0.0, 0.0));
    fft.process(&mut buf);
    buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// `[T, n_mels]` natural-log mel energies.
pub fn log_fbank(wav: &Waveform, cfg: &FbankConfig) -> Result<Tensor> {
    let sr = wav.sample_rate();
    let bank = MelFilterbank::new(cfg, sr)?;
    let win = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    let n_fft = cfg.fft_size(sr);
    let frames = frame_count(wav.len(), win, hop);
    if frames == 0 {
        return Err(invalid!(
            "waveform has {} samples; at least {win} (one {} ms window) are required",
            wav.len(),
            cfg.win_ms
        ));
    }
    let window = hamming(win);
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    let mut frame = vec![0.0; win];
    for t in 0..frames {
        let src = &wav.samples()[t * hop..t * hop + win];
        frame.iter_mut().zip(src.iter().zip(&window)).for_each(|(f, (s, w))| *f = s * w);
        let power = power_spectrum(&frame, n_fft, &mut planner);
        for filt in bank.weights() {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(cfg.log_floor).ln());
        }
    }
    Tensor::new(vec![frames, cfg.n_mels], out)
}

/// Subtracts the per-dimension mean over time.
pub fn cmn(feats: &Tensor) -> Result<Tensor> {
    let (t, d) = match *feats.shape() {
        [t, d] => (t, d),
        _ => return Err(shape_err!("features must be [T, n_mels], got {:?}", feats.shape())),
    };
    let mut mean = vec![0.0; d];
    for row in feats.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let data = feats.data().chunks(d).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    Tensor::new(vec![t, d], data)
}
