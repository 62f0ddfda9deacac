//! Acceptance report: one line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the report is printed under a plain
//! `cargo test`.

use std::f64::consts::PI;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svtk::augment::{add_noise_at_snr, speed_perturb, time_stretch, EffectChain};
use svtk::backend::{compute_eer, compute_min_dcf, DcfParams};
use svtk::features::{cmn, log_fbank, FbankConfig, Waveform};
use svtk::gradcheck;
use svtk::losses::{inter_topk_loss, subcenter_cosines, LossHead, MarginKind, MarginParams, ScheduleKind};
use svtk::pipeline::{run_ablation, BackendCorpus, BackendCorpusConfig};
use svtk::pooling::{mqmha_forward, stats_pooling, PoolingConfig, QueryBank};
use svtk::repvgg::{reparameterize_block, RepVggBlockTrain};
use svtk::tensor::{log_sum_exp, Tensor};
use svtk::trainer::{train_toy, Stage, SynthCorpus, TrainConfig};
use svtk_testkit::{peak_frequency, power, sweep_eer, sweep_min_dcf};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Frozen outputs of the default seeded runs.
const ABLATION_EER: [f64; 3] = [0.14281609195402298, 0.12097701149425287, 0.10114942528735632];
const TOY_EER: f64 = 0.0010714285714285715;
const FROZEN_TOL: f64 = 1e-9;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn tone(freq: f64, n: usize, sr: u32, amp: f64) -> Waveform {
    Waveform::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(), sr).unwrap()
}

fn reparameterization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut configs = Vec::new();
    for c in [2usize, 4, 8] {
        let mut groups = vec![1, 2, c];
        groups.dedup();
        for g in groups {
            for stride in [1, 2] {
                configs.push((c, g, stride));
            }
        }
    }
    let (mut worst_rel, mut worst_single) = (0.0f64, 0.0f64);
    for b in 0..200 {
        let (c, g, stride) = configs[b % configs.len()];
        let block = RepVggBlockTrain::random(c, c, stride, g, &mut rng).map_err(|e| e.to_string())?;
        let deploy = reparameterize_block(&block).map_err(|e| e.to_string())?;
        let single = deploy.to_single_precision().map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let x = rand_tensor(&mut rng, vec![c, 6, 6]);
            let y = block.forward(&x).unwrap();
            let scale = y.max_abs().max(1e-300);
            worst_rel = worst_rel.max(deploy.forward(&x).unwrap().max_abs_diff(&y).unwrap() / scale);
            worst_single = worst_single.max(single.forward(&x).unwrap().max_abs_diff(&y).unwrap());
        }
    }
    let t = start.elapsed();
    check(
        worst_rel <= 1e-10 && worst_single <= 1e-4 && t < Duration::from_secs(30),
        format!(
            "200 blocks x 100 inputs over {} configs, relative {worst_rel:.2e}, single {worst_single:.2e}, {:.2} s",
            configs.len(),
            t.as_secs_f64()
        ),
    )
}

fn gradient_suite() -> Outcome {
    let reports = gradcheck::run_all(100, 0).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.worst_relative_error / r.tolerance).fold(0.0, f64::max);
    let status = Command::new(env!("CARGO_BIN_EXE_svtk"))
        .args(["gradcheck", "--seed", "0"])
        .output()
        .map_err(|e| e.to_string())?
        .status;
    check(
        failed.is_empty() && status.success(),
        format!(
            "{} suites x 100 instances, worst error/tolerance {worst:.2e}, failed {failed:?}, `svtk gradcheck` exit {:?}",
            reports.len(),
            status.code()
        ),
    )
}

fn degenerate_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut pool, mut am, mut cosine) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (t, d) = (rng.gen_range(1..40), rng.gen_range(1..12));
        let o = rand_tensor(&mut rng, vec![t, d]);
        let cfg = PoolingConfig::new(d, 1, 1).unwrap();
        let pooled = mqmha_forward(&o, &QueryBank::zeros(&cfg), &cfg).unwrap().concat();
        let stats = stats_pooling(&o).unwrap();
        pool = pool.max(pooled.iter().zip(&stats).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let classes = rng.gen_range(3..10);
        let m = rng.gen_range(0.0..0.4);
        let cos: Vec<f64> = (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label = rng.gen_range(0..classes);
        let params = MarginParams { scale: 30.0, margin: m, topk_penalty: 0.0, top_k: 2, kind: MarginKind::Am };
        let head = LossHead::new(Tensor::zeros(vec![classes, 1, 1]).unwrap(), params).unwrap();
        let (loss, _) = inter_topk_loss(&cos, label, &head, m).unwrap();
        let logits: Vec<f64> = cos.iter().enumerate().map(|(j, c)| 30.0 * if j == label { c - m } else { *c }).collect();
        am = am.max((loss - (log_sum_exp(&logits) - logits[label])).abs());

        let dim = rng.gen_range(2..8);
        let head = LossHead::random(classes, 1, dim, MarginParams { top_k: 1, ..MarginParams::standard() }, &mut rng).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = subcenter_cosines(&x, &head).unwrap();
        for (j, w) in head.weights().data().chunks(dim).enumerate() {
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let plain = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (xn * wn);
            cosine = cosine.max((got[j] - plain).abs());
        }
    }
    check(
        pool <= 1e-12 && am <= 1e-12 && cosine <= 1e-12,
        format!("200 cases each, stats pooling {pool:.1e}, AM-softmax {am:.1e}, cosine head {cosine:.1e}"),
    )
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_eer: f64 = 0.0;
    let mut dcf_mismatches = 0;
    for set in 0..50 {
        let mut scores = Vec::with_capacity(1000);
        let mut labels = Vec::with_capacity(1000);
        for i in 0..1000 {
            let target = if i < 2 { i == 0 } else { rng.gen_bool(0.3) };
            let mut s: f64 = rng.gen_range(-1.0..1.0) + if target { 0.6 } else { 0.0 };
            if set % 5 == 0 {
                s = (s * 20.0).round() / 20.0;
            }
            scores.push(s);
            labels.push(target);
        }
        let (eer, _) = compute_eer(&scores, &labels).map_err(|e| e.to_string())?;
        worst_eer = worst_eer.max((eer - sweep_eer(&scores, &labels)).abs());
        for p in [0.01, 0.05] {
            let (dcf, _) = compute_min_dcf(&scores, &labels, DcfParams::new(p).unwrap()).map_err(|e| e.to_string())?;
            dcf_mismatches += (dcf != sweep_min_dcf(&scores, &labels, p)) as usize;
        }
    }
    let t = start.elapsed();
    check(
        worst_eer <= 1e-12 && dcf_mismatches == 0 && t < Duration::from_secs(5),
        format!(
            "50 sets x 1000 trials, EER max diff {worst_eer:.1e}, minDCF mismatches {dcf_mismatches}, {:.2} s",
            t.as_secs_f64()
        ),
    )
}

fn backend_ablation() -> Outcome {
    let cfg = BackendCorpusConfig::default();
    let run = || -> svtk::Result<_> {
        let corpus = BackendCorpus::generate(&cfg)?;
        run_ablation(&corpus, cfg.top_n, &[0.01, 0.05])
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    let eers = [a.raw.eer, a.asnorm.eer, a.qmf.eer];
    let monotone = eers[1] <= eers[0] + 0.005 && eers[2] <= eers[1] + 0.005;
    let frozen = eers.iter().zip(ABLATION_EER).all(|(e, f)| (e - f).abs() <= FROZEN_TOL);
    check(
        monotone && a == b && frozen,
        format!(
            "{} speakers, EER raw {:.3}% -> AS-Norm {:.3}% -> QMF {:.3}%, deterministic {}, frozen {frozen} ({:?})",
            cfg.eval_speakers,
            100.0 * eers[0],
            100.0 * eers[1],
            100.0 * eers[2],
            a == b,
            eers
        ),
    )
}

fn toy_training() -> Outcome {
    let cfg = TrainConfig::stage1();
    let corpus = SynthCorpus::generate(&cfg.corpus).map_err(|e| e.to_string())?;
    let out = train_toy(&corpus, &cfg, 0).map_err(|e| e.to_string())?;
    let eer = out.final_eer().ok_or("no validation ran")?;
    let last = out.history.last().map(|r| r.step).unwrap_or(0);

    let mut trace_ok = true;
    for stage in [cfg.clone(), TrainConfig::stage2()] {
        let s = stage.margin;
        let rows = if stage.stage == Stage::FineTune {
            let corpus2 = SynthCorpus::generate(&stage.corpus).map_err(|e| e.to_string())?;
            train_toy(&corpus2, &TrainConfig { steps: 50, ..stage.clone() }, 1).map_err(|e| e.to_string())?.history
        } else {
            out.history.clone()
        };
        for row in &rows {
            let r = (row.step as f64 / s.total_steps as f64).min(1.0);
            let want = if row.step >= s.total_steps {
                s.end
            } else {
                match s.kind {
                    ScheduleKind::Linear => s.start + (s.end - s.start) * r,
                    ScheduleKind::Exponential => s.start * (s.end / s.start).powf(r),
                }
            };
            trace_ok &= row.margin == want;
        }
    }
    let s2 = TrainConfig::stage2();
    let preset_ok = !s2.inter_topk_enabled()
        && s2.loss.kind == MarginKind::Aam
        && s2.margin.kind == ScheduleKind::Exponential
        && (s2.margin.start, s2.margin.end) == (0.2, 0.5);
    let frozen = (eer - TOY_EER).abs() <= FROZEN_TOL;
    check(
        cfg.steps <= 200 && eer <= 0.05 && trace_ok && preset_ok && frozen,
        format!(
            "{} steps, held-out EER {:.3}% (last validation at step {last}), frozen {frozen} ({eer:?}), margin trace exact {trace_ok}, stage-2 preset {preset_ok}",
            cfg.steps,
            100.0 * eer
        ),
    )
}

fn dsp() -> Outcome {
    const SR: u32 = 16000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let speech = tone(220.0, 16000, SR, 0.3);
    let mut snr_err: f64 = 0.0;
    for (seed, snr) in [(1u64, -5.0), (2, 0.0), (3, 5.0), (4, 10.0), (5, 20.0), (6, 35.0)] {
        let noise = Waveform::new((0..5000).map(|_| rng.gen_range(-0.4..0.4)).collect(), SR).unwrap();
        let mixed = add_noise_at_snr(&speech, &noise, snr, seed).map_err(|e| e.to_string())?;
        let added: Vec<f64> = mixed.samples().iter().zip(speech.samples()).map(|(m, s)| m - s).collect();
        let measured = 10.0 * (power(speech.samples()) / power(&added)).log10();
        snr_err = snr_err.max((measured - snr).abs());
    }

    let src = tone(100.0, 32000, SR, 0.5);
    let mut speed_err: f64 = 0.0;
    for factor in [0.9, 1.1] {
        let f = peak_frequency(speed_perturb(&src, factor).map_err(|e| e.to_string())?.samples(), SR as f64);
        speed_err = speed_err.max((f / (100.0 * factor) - 1.0).abs());
    }

    let src = tone(200.0, 32000, SR, 0.5);
    let mut stretch_err: f64 = 0.0;
    for factor in [0.8, 0.9, 1.1, 1.25] {
        let f = peak_frequency(time_stretch(&src, factor).map_err(|e| e.to_string())?.samples(), SR as f64);
        stretch_err = stretch_err.max((f / 200.0 - 1.0).abs());
    }

    let chain = EffectChain::online_default(
        vec![Waveform::new(vec![1.0], SR).unwrap()],
        vec![Waveform::new(vec![0.1, -0.1], SR).unwrap()],
    )
    .map_err(|e| e.to_string())?;
    let mut hits = [0usize; 4];
    for seed in 0..10_000u64 {
        for (h, a) in hits.iter_mut().zip(chain.activations(seed)) {
            *h += a as usize;
        }
    }
    let freqs: Vec<f64> = hits.iter().map(|&h| h as f64 / 10_000.0).collect();
    let act_err = freqs.iter().zip([0.2, 0.2, 0.6, 0.2]).map(|(f, p)| (f - p).abs()).fold(0.0, f64::max);
    check(
        snr_err <= 0.5 && speed_err <= 0.01 && stretch_err <= 0.02 && act_err <= 0.02,
        format!(
            "SNR error {snr_err:.3} dB, speed peak {:.3}%, stretch peak {:.3}%, activations {freqs:?}",
            100.0 * speed_err,
            100.0 * stretch_err
        ),
    )
}

fn features() -> Outcome {
    let cfg = FbankConfig::default();
    let mut frames_ok = true;
    for (n, sr) in [(16000usize, 16000u32), (400, 16000), (401, 16000), (16159, 16000), (8000, 8000), (12345, 16000)] {
        let win = (sr as f64 * 0.025).round() as usize;
        let hop = (sr as f64 * 0.010).round() as usize;
        let t = log_fbank(&tone(300.0, n, sr, 0.5), &cfg).map_err(|e| e.to_string())?.shape()[0];
        frames_ok &= t == 1 + (n - win) / hop;
    }

    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let mut bins_ok = true;
    for n_mels in [24, 40, 81, 96] {
        let c = FbankConfig::with_mels(n_mels);
        let (a, b) = (mel(c.f_min), mel(8000.0));
        let center = |i: usize| hz(a + (b - a) * (i + 1) as f64 / (n_mels + 1) as f64);
        let want = (0..n_mels).min_by(|&x, &y| (center(x) - 1000.0).abs().total_cmp(&(center(y) - 1000.0).abs())).unwrap();
        let feats = log_fbank(&tone(1000.0, 16000, 16000, 0.5), &c).map_err(|e| e.to_string())?;
        for row in feats.data().chunks(n_mels) {
            bins_ok &= (0..n_mels).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap() == want;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_mean: f64 = 0.0;
    for (t, d) in [(1, 5), (37, 81), (500, 96)] {
        let y = cmn(&Tensor::from_fn(vec![t, d], |_| rng.gen_range(-30.0..10.0)).unwrap()).unwrap();
        for j in 0..d {
            worst_mean = worst_mean.max(((0..t).map(|i| y.data()[i * d + j]).sum::<f64>() / t as f64).abs());
        }
    }
    check(
        frames_ok && bins_ok && worst_mean <= 1e-10,
        format!("frame counts exact {frames_ok}, 1 kHz bin matches {bins_ok}, CMN max column mean {worst_mean:.1e}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("reparameterization exactness", reparameterization),
        ("gradient suite", gradient_suite),
        ("degenerate-case equivalences", degenerate_cases),
        ("metric oracle", metric_oracle),
        ("back-end ablation", backend_ablation),
        ("toy training", toy_training),
        ("DSP checks", dsp),
        ("feature checks", features),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
