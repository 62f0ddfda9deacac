use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use svtk::archive::{format_manifest, load_archive, load_manifest, save_archive, FeatureRecord, ManifestEntry};
use svtk::augment::{chain_apply, perturbed_speaker, speed_perturb, utterance_seed, EffectChain, SPEED_FACTORS};
use svtk::backend::io::{
    format_scores, label_scores, load_embeddings, parse_scores, parse_trials, save_embeddings, EmbeddingStore,
    ScoredTrial,
};
use svtk::backend::{
    build_cohort, fuse_scores, imposter_stats, train_qmf, DcfParams, EmbeddingRecord, ImposterStats, QmfModel,
    QmfTrainConfig,
};
use svtk::features::{cmn, log_fbank, FbankConfig, Waveform};
use svtk::gradcheck;
use svtk::model::{max_probe_deviation, ModelConfig, SpeakerModel};
use svtk::modelfile::ParamFile;
use svtk::pipeline::{apply_qmf, asnorm_trials, evaluate, score_trials, trial_features};
use svtk::repvgg::Mode;
use svtk::trainer::{history_csv, train_from, train_toy, HistoryRow, SynthCorpus, TrainConfig};

use crate::*;

type Run = Result<(), Failure>;

const SCORE_CHUNK: usize = 4096;

pub fn dispatch(cmd: Command) -> Run {
    match cmd {
        Command::Extract(a) => extract(a),
        Command::Augment(a) => augment(a),
        Command::Embed(a) => embed(a),
        Command::InitModel(a) => init_model(a),
        Command::FuseModel(a) => fuse_model(a),
        Command::Score(a) => score(a),
        Command::Asnorm(a) => asnorm(a),
        Command::QmfTrain(a) => qmf_train(a),
        Command::QmfApply(a) => qmf_apply(a),
        Command::FuseScores(a) => fuse(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::TrainToy(a) => train(a),
        Command::Gradcheck(a) => grad(a),
    }
}

fn in_file(path: &Path, e: svtk::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn in_utterance(id: &str, e: svtk::Error) -> Failure {
    Failure::Data(format!("utterance `{id}`: {e}"))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| in_file(path, e.into()))
}

/// Writes to `path`, or stdout when there is none.
fn write_text(path: Option<&Path>, text: &str) -> Run {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| in_file(p, e.into())),
        None => io::stdout().lock().write_all(text.as_bytes()).map_err(|e| Failure::Data(e.to_string())),
    }
}

fn set_threads(t: &Threads) {
    // Fails only if the global pool already exists, which cannot happen in one run.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(t.threads).build_global();
}

fn echo_config(title: &str, text: &str) {
    eprintln!("[{title}]");
    eprint!("{text}");
}

fn extract(a: ExtractArgs) -> Run {
    set_threads(&a.threads);
    let mut cfg = match &a.config {
        Some(p) => FbankConfig::parse(&read_text(p)?).map_err(|e| in_file(p, e))?,
        None => FbankConfig::default(),
    };
    if let Some(n) = a.n_mels {
        cfg.n_mels = n;
    }
    echo_config("fbank", &cfg.to_string());
    let entries = load_manifest(&a.manifest).map_err(|e| in_file(&a.manifest, e))?;
    let records = entries
        .par_iter()
        .map(|e| {
            let wav = Waveform::read_wav(&e.path).map_err(|err| in_utterance(&e.id, err))?;
            let feats = log_fbank(&wav, &cfg).map_err(|err| in_utterance(&e.id, err))?;
            let feats = if a.no_cmn { feats } else { cmn(&feats)? };
            Ok(FeatureRecord { id: e.id.clone(), speaker: Some(e.speaker.clone()), duration_s: wav.duration_s(), features: feats })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    save_archive(&a.output, &records).map_err(|e| in_file(&a.output, e))?;
    eprintln!("extracted {} utterances", records.len());
    Ok(())
}

fn augment(a: AugmentArgs) -> Run {
    set_threads(&a.threads);
    let load = |paths: &[PathBuf]| {
        paths.iter().map(|p| Waveform::read_wav(p).map_err(|e| in_file(p, e))).collect::<Result<Vec<_>, _>>()
    };
    let chain = match a.preset {
        Preset::Online => {
            if a.rir.is_empty() || a.noise.is_empty() {
                return Err(Failure::Usage("the online preset needs at least one --rir and one --noise".into()));
            }
            EffectChain::online_default(load(&a.rir)?, load(&a.noise)?)?
        }
        Preset::Basic => {
            if !a.rir.is_empty() || !a.noise.is_empty() {
                return Err(Failure::Usage("--rir and --noise apply only to the online preset".into()));
            }
            EffectChain::basic()?
        }
    };
    let entries = load_manifest(&a.manifest).map_err(|e| in_file(&a.manifest, e))?;
    let factors: &[f64] = if a.speed_perturb { &SPEED_FACTORS } else { &[] };
    let mut jobs = Vec::new();
    for e in &entries {
        if e.id.contains(['/', '\\']) {
            return Err(Failure::Data(format!("utterance id `{}` cannot be used as a file name", e.id)));
        }
        jobs.push((e, None));
        jobs.extend(factors.iter().map(|&f| (e, Some(f))));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| in_file(&a.out_dir, e.into()))?;
    let out = jobs
        .par_iter()
        .map(|&(e, factor)| {
            let wav = Waveform::read_wav(&e.path).map_err(|err| in_utterance(&e.id, err))?;
            let (wav, id, speaker) = match factor {
                None => (wav, e.id.clone(), e.speaker.clone()),
                Some(f) => (speed_perturb(&wav, f)?, format!("{}-sp{f}", e.id), perturbed_speaker(&e.speaker, f)),
            };
            let wav = chain_apply(&wav, &chain, utterance_seed(a.seed, &id)).map_err(|err| in_utterance(&id, err))?;
            let file = PathBuf::from(format!("{id}.wav"));
            let full = a.out_dir.join(&file);
            wav.write_wav(&full).map_err(|err| in_file(&full, err))?;
            Ok(ManifestEntry { id, speaker, path: file })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let manifest = a.out_dir.join("manifest.tsv");
    write_text(Some(&manifest), &format_manifest(&out))?;
    eprintln!("wrote {} utterances to {}", out.len(), a.out_dir.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<SpeakerModel, Failure> {
    ParamFile::load(path).and_then(|p| SpeakerModel::from_params(&p)).map_err(|e| in_file(path, e))
}

fn save_model(model: &SpeakerModel, path: &Path) -> Run {
    model.to_params().and_then(|p| p.save(path)).map_err(|e| in_file(path, e))
}

fn embed(a: EmbedArgs) -> Run {
    set_threads(&a.threads);
    let model = load_model(&a.model)?;
    let records = load_archive(&a.features).map_err(|e| in_file(&a.features, e))?;
    let out = records
        .par_iter()
        .map(|r| {
            let raw = model.embed(&r.features).map_err(|e| in_utterance(&r.id, e))?;
            EmbeddingRecord::from_raw(r.id.clone(), r.speaker.clone(), &raw, r.duration_s).map_err(|e| in_utterance(&r.id, e))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    save_embeddings(&a.output, &out).map_err(|e| in_file(&a.output, e))?;
    eprintln!("embedded {} utterances", out.len());
    Ok(())
}

fn init_model(a: InitModelArgs) -> Run {
    let cfg = match &a.config {
        Some(p) => ModelConfig::parse(&read_text(p)?).map_err(|e| in_file(p, e))?,
        None => ModelConfig::default(),
    };
    echo_config("model", &cfg.to_string());
    let model = SpeakerModel::random(&cfg, a.seed)?;
    save_model(&model, &a.output)?;
    eprintln!("wrote {} parameters", model.param_count());
    Ok(())
}

fn fuse_model(a: FuseModelArgs) -> Run {
    let model = load_model(&a.model)?;
    if model.mode() == Mode::Deploy {
        return Err(Failure::Data(format!("{}: model is already in deploy form", a.model.display())));
    }
    let fused = model.fuse()?.to_single_precision()?;
    let dev = max_probe_deviation(&model, &fused, a.probes, a.frames, a.seed)?;
    save_model(&fused, &a.output)?;
    println!("parameters {} -> {}", model.param_count(), fused.param_count());
    println!("max deviation {dev:.3e}");
    Ok(())
}

fn load_store(path: &Path) -> Result<Vec<EmbeddingRecord>, Failure> {
    load_embeddings(path).map_err(|e| in_file(path, e))
}

fn score(a: ScoreArgs) -> Run {
    set_threads(&a.threads);
    let records = load_store(&a.embeddings)?;
    let store = EmbeddingStore::new(&records).map_err(|e| in_file(&a.embeddings, e))?;
    let trials = parse_trials(&read_text(&a.trials)?).map_err(|e| in_file(&a.trials, e))?;
    let scored: Vec<ScoredTrial> = trials
        .par_chunks(SCORE_CHUNK)
        .map(|c| score_trials(&store, c))
        .collect::<svtk::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    write_text(a.output.as_deref(), &format_scores(&scored))
}

fn load_scores(path: &Path) -> Result<Vec<ScoredTrial>, Failure> {
    parse_scores(&read_text(path)?).map_err(|e| in_file(path, e))
}

/// Imposter statistics for every id that appears in `scores`.
fn imposter_table(
    store: &EmbeddingStore,
    scores: &[ScoredTrial],
    c: &CohortArgs,
) -> Result<HashMap<String, ImposterStats>, Failure> {
    let cohort = build_cohort(&load_store(&c.cohort)?).map_err(|e| in_file(&c.cohort, e))?;
    if c.top_n == 0 || c.top_n > cohort.len() {
        return Err(Failure::Usage(format!("--top-n {} must be between 1 and the cohort size {}", c.top_n, cohort.len())));
    }
    let mut seen = HashSet::new();
    let ids: Vec<&str> = scores
        .iter()
        .flat_map(|s| [s.enroll.as_str(), s.test.as_str()])
        .filter(|id| seen.insert(*id))
        .collect();
    Ok(ids
        .par_iter()
        .map(|&id| Ok((id.to_string(), imposter_stats(&store.get(id)?.vector, &cohort, c.top_n)?)))
        .collect::<svtk::Result<HashMap<_, _>>>()?)
}

fn asnorm(a: AsnormArgs) -> Run {
    set_threads(&a.threads);
    let records = load_store(&a.embeddings)?;
    let store = EmbeddingStore::new(&records).map_err(|e| in_file(&a.embeddings, e))?;
    let scores = load_scores(&a.scores)?;
    let stats = imposter_table(&store, &scores, &a.cohort)?;
    write_text(a.output.as_deref(), &format_scores(&asnorm_trials(&scores, &stats)?))
}

fn qmf_train(a: QmfTrainArgs) -> Run {
    set_threads(&a.threads);
    let records = load_store(&a.embeddings)?;
    let store = EmbeddingStore::new(&records).map_err(|e| in_file(&a.embeddings, e))?;
    let scores = load_scores(&a.scores)?;
    let trials = parse_trials(&read_text(&a.trials)?).map_err(|e| in_file(&a.trials, e))?;
    let labels = label_scores(&scores, &trials)?;
    let stats = imposter_table(&store, &scores, &a.cohort)?;
    let features = trial_features(&store, &scores, &stats)?;
    let fit = train_qmf(&features, &labels, QmfTrainConfig { l2: a.l2, iterations: a.iterations })?;
    let (first, last) = (fit.loss_trace[0], fit.loss_trace[fit.loss_trace.len() - 1]);
    eprintln!("trained on {} trials, loss {first:.6} -> {last:.6}", labels.len());
    write_text(a.output.as_deref(), &fit.model.to_text())
}

fn qmf_apply(a: QmfApplyArgs) -> Run {
    set_threads(&a.threads);
    let model = QmfModel::from_text(&read_text(&a.model)?).map_err(|e| in_file(&a.model, e))?;
    let records = load_store(&a.embeddings)?;
    let store = EmbeddingStore::new(&records).map_err(|e| in_file(&a.embeddings, e))?;
    let scores = load_scores(&a.scores)?;
    let stats = imposter_table(&store, &scores, &a.cohort)?;
    let features = trial_features(&store, &scores, &stats)?;
    write_text(a.output.as_deref(), &format_scores(&apply_qmf(&model, &scores, &features)?))
}

fn fuse(a: FuseScoresArgs) -> Run {
    let weights = if a.weights.is_empty() { vec![1.0 / a.scores.len() as f64; a.scores.len()] } else { a.weights };
    if weights.len() != a.scores.len() {
        return Err(Failure::Usage(format!("{} weights given for {} score files", weights.len(), a.scores.len())));
    }
    let lists = a.scores.iter().map(|p| load_scores(p)).collect::<Result<Vec<_>, _>>()?;
    let first = &lists[0];
    for (path, list) in a.scores.iter().zip(&lists).skip(1) {
        if list.len() != first.len() {
            return Err(Failure::Data(format!("{}: {} trials, expected {}", path.display(), list.len(), first.len())));
        }
        if let Some(i) = list.iter().zip(first).position(|(s, t)| s.enroll != t.enroll || s.test != t.test) {
            return Err(Failure::Data(format!("{}: trial {} differs from the first score file", path.display(), i + 1)));
        }
    }
    let values: Vec<Vec<f64>> = lists.iter().map(|l| l.iter().map(|s| s.score).collect()).collect();
    let fused = fuse_scores(&values, &weights)?;
    let out: Vec<ScoredTrial> = first.iter().zip(fused).map(|(s, v)| ScoredTrial { score: v, ..s.clone() }).collect();
    write_text(a.output.as_deref(), &format_scores(&out))
}

fn evaluate_cmd(a: EvaluateArgs) -> Run {
    for &p in &a.p_target {
        DcfParams::new(p).map_err(|e| Failure::Usage(format!("--p-target: {e}")))?;
    }
    let scores = load_scores(&a.scores)?;
    let trials = parse_trials(&read_text(&a.trials)?).map_err(|e| in_file(&a.trials, e))?;
    let labels = label_scores(&scores, &trials)?;
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let m = evaluate(&values, &labels, &a.p_target)?;
    println!("EER {:.4}", 100.0 * m.eer);
    for (p, v) in m.min_dcf {
        println!("minDCF {v:.4} p_target={p}");
    }
    Ok(())
}

fn train_config(path: Option<&Path>, prefix: &str, fallback: TrainConfig) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => TrainConfig::parse(&format!("{prefix}{}", read_text(p)?)).map_err(|e| in_file(p, e)),
        None => Ok(fallback),
    }
}

fn print_history(rows: &[HistoryRow], offset: u64) {
    for r in rows.iter().filter(|r| r.val_eer.is_some()) {
        println!(
            "step {} loss {:.4} margin {:.4} lr {} val_eer {:.4}",
            r.step + offset,
            r.loss,
            r.margin,
            r.lr,
            100.0 * r.val_eer.unwrap_or(f64::NAN)
        );
    }
}

fn train(a: TrainToyArgs) -> Run {
    let base = train_config(a.config.as_deref(), "", TrainConfig::stage1())?;
    echo_config("stage 1", &base.to_string());
    let corpus = SynthCorpus::generate(&base.corpus)?;
    let first = train_toy(&corpus, &base, a.seed)?;
    print_history(&first.history, 0);
    let mut history = first.history.clone();
    let mut outcome = first;
    if a.fine_tune {
        let ft = train_config(a.fine_tune_config.as_deref(), "stage = 2\n", TrainConfig::stage2())?;
        echo_config("stage 2", &ft.to_string());
        let second = train_from(Some(outcome.model.clone()), &corpus, &ft, a.seed.wrapping_add(1))?;
        print_history(&second.history, base.steps);
        history.extend(second.history.iter().map(|r| HistoryRow { step: r.step + base.steps, ..r.clone() }));
        outcome = second;
    }
    if let Some(p) = &a.history {
        write_text(Some(p), &history_csv(&history))?;
    }
    match outcome.final_eer() {
        Some(eer) => println!("EER {:.4}", 100.0 * eer),
        None => println!("EER n/a (no validation step)"),
    }
    Ok(())
}

fn grad(a: GradcheckArgs) -> Run {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let reports = gradcheck::run_all(a.instances, a.seed)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.worst_relative_error);
        println!(
            "{:<30} instances {:>4}  worst {:.3e}  tolerance {:.0e}  {}",
            r.name,
            r.instances,
            r.worst_relative_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    println!("worst relative error {worst:.3e}");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!("gradient check failed: {}", failed.join(", "))))
    }
}
