//! Trial-level back-end pipeline: raw cosine scoring, AS-Norm, and QMF
//! calibration, plus a synthetic embedding corpus for exercising it.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backend::io::{EmbeddingStore, ScoredTrial, Trial};
use crate::backend::{
    asnorm_with_stats, build_cohort, compute_eer, compute_min_dcf, cosine_score, imposter_stats, qmf_features,
    train_qmf, Cohort, DcfParams, EmbeddingRecord, ImposterStats, QmfModel, QmfTrainConfig, QMF_FEATURES,
};
use crate::error::{invalid, Error, Result};
use crate::tensor::l2_normalize;

/// Raw cosine score of every trial, in trial order.
pub fn score_trials(store: &EmbeddingStore, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    trials
        .iter()
        .map(|t| {
            let score = cosine_score(&store.get(&t.enroll)?.vector, &store.get(&t.test)?.vector)?;
            Ok(ScoredTrial { enroll: t.enroll.clone(), test: t.test.clone(), score })
        })
        .collect()
}

/// Imposter statistics of every embedding referenced by `trials`, computed once per id.
pub fn trial_imposter_stats(
    store: &EmbeddingStore,
    trials: &[Trial],
    cohort: &Cohort,
    top_n: usize,
) -> Result<HashMap<String, ImposterStats>> {
    let mut stats = HashMap::new();
    for t in trials {
        for id in [&t.enroll, &t.test] {
            if !stats.contains_key(id.as_str()) {
                stats.insert(id.clone(), imposter_stats(&store.get(id)?.vector, cohort, top_n)?);
            }
        }
    }
    Ok(stats)
}

/// AS-Norm applied to already scored trials.
pub fn asnorm_trials(scores: &[ScoredTrial], stats: &HashMap<String, ImposterStats>) -> Result<Vec<ScoredTrial>> {
    let get = |id: &str| stats.get(id).copied().ok_or_else(|| Error::MissingField(format!("imposter statistics for `{id}`")));
    scores
        .iter()
        .map(|s| Ok(ScoredTrial { score: asnorm_with_stats(s.score, get(&s.enroll)?, get(&s.test)?), ..s.clone() }))
        .collect()
}

/// QMF feature rows for scored trials (the score column is taken from `scores`).
pub fn trial_features(
    store: &EmbeddingStore,
    scores: &[ScoredTrial],
    stats: &HashMap<String, ImposterStats>,
) -> Result<Vec<Vec<f64>>> {
    let get = |id: &str| stats.get(id).copied().ok_or_else(|| Error::MissingField(format!("imposter statistics for `{id}`")));
    scores
        .iter()
        .map(|s| {
            let f = qmf_features(s.score, store.get(&s.enroll)?, store.get(&s.test)?, get(&s.enroll)?, get(&s.test)?)?;
            Ok(f.to_vec())
        })
        .collect()
}

/// Replaces each score with the QMF logit.
pub fn apply_qmf(model: &QmfModel, scores: &[ScoredTrial], features: &[Vec<f64>]) -> Result<Vec<ScoredTrial>> {
    scores
        .iter()
        .zip(features)
        .map(|(s, f)| Ok(ScoredTrial { score: model.logit(f)?, ..s.clone() }))
        .collect()
}

/// EER and minDCF of one score list.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub eer: f64,
    /// `(p_target, minDCF)` pairs.
    pub min_dcf: Vec<(f64, f64)>,
}

pub fn evaluate(scores: &[f64], labels: &[bool], p_targets: &[f64]) -> Result<Metrics> {
    let (eer, _) = compute_eer(scores, labels)?;
    let min_dcf = p_targets
        .iter()
        .map(|&p| Ok((p, compute_min_dcf(scores, labels, DcfParams::new(p)?)?.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics { eer, min_dcf })
}

/// Synthetic embedding corpus parameters.
///
/// Every utterance embedding is `center_s + b_u * bias + noise`, where the
/// noise standard deviation shrinks with the square root of the duration and
/// `b_u` is a per-utterance strength along one shared direction. The shared
/// component shifts all scores of an utterance together, which is what
/// adaptive normalization removes; the duration-dependent noise is what the
/// quality measures see.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendCorpusConfig {
    pub dim: usize,
    pub eval_speakers: usize,
    pub eval_utterances: usize,
    pub cohort_speakers: usize,
    pub cohort_utterances: usize,
    pub qmf_speakers: usize,
    pub qmf_utterances: usize,
    pub qmf_trials: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Noise standard deviation per dimension at a 1 s duration.
    pub noise_at_1s: f64,
    pub bias_strength: f64,
    pub top_n: usize,
    pub seed: u64,
}

impl Default for BackendCorpusConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            eval_speakers: 8,
            eval_utterances: 30,
            cohort_speakers: 300,
            cohort_utterances: 3,
            qmf_speakers: 40,
            qmf_utterances: 12,
            qmf_trials: 30_000,
            min_duration_s: 1.0,
            max_duration_s: 20.0,
            noise_at_1s: 0.5,
            bias_strength: 0.8,
            top_n: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendCorpus {
    pub eval: Vec<EmbeddingRecord>,
    pub eval_trials: Vec<Trial>,
    pub cohort: Vec<EmbeddingRecord>,
    pub qmf: Vec<EmbeddingRecord>,
    pub qmf_trials: Vec<Trial>,
}

impl BackendCorpus {
    pub fn generate(cfg: &BackendCorpusConfig) -> Result<Self> {
        if cfg.eval_speakers < 2 || cfg.qmf_speakers < 2 || cfg.eval_utterances < 2 || cfg.qmf_utterances < 2 {
            return Err(invalid!("need at least 2 speakers with 2 utterances in the evaluation and QMF sets"));
        }
        if cfg.top_n == 0 || cfg.top_n > cfg.cohort_speakers {
            return Err(invalid!("top_n must lie in [1, cohort_speakers = {}]", cfg.cohort_speakers));
        }
        if !(cfg.min_duration_s > 0.0 && cfg.min_duration_s <= cfg.max_duration_s) {
            return Err(invalid!("durations must satisfy 0 < min <= max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect() };
        let bias = l2_normalize(&gauss(&mut rng))?;
        let make_set = |prefix: &str, speakers: usize, utts: usize, rng: &mut ChaCha8Rng| -> Result<Vec<EmbeddingRecord>> {
            let mut out = Vec::with_capacity(speakers * utts);
            for s in 0..speakers {
                let center = l2_normalize(&gauss(rng))?;
                let spk = format!("{prefix}{s:03}");
                for u in 0..utts {
                    let dur = rng.gen_range(cfg.min_duration_s..=cfg.max_duration_s);
                    let sigma = cfg.noise_at_1s / dur.sqrt();
                    let b = cfg.bias_strength * rng.gen::<f64>();
                    let raw: Vec<f64> = (0..cfg.dim)
                        .map(|k| center[k] + b * bias[k] + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    out.push(EmbeddingRecord::from_raw(format!("{spk}-{u:03}"), Some(spk.clone()), &raw, dur)?);
                }
            }
            Ok(out)
        };
        let eval = make_set("eval", cfg.eval_speakers, cfg.eval_utterances, &mut rng)?;
        let cohort = make_set("coh", cfg.cohort_speakers, cfg.cohort_utterances, &mut rng)?;
        let qmf = make_set("qmf", cfg.qmf_speakers, cfg.qmf_utterances, &mut rng)?;

        let all_pairs = |set: &[EmbeddingRecord]| -> Vec<Trial> {
            let mut v = Vec::new();
            for i in 0..set.len() {
                for j in i + 1..set.len() {
                    v.push(Trial {
                        enroll: set[i].id.clone(),
                        test: set[j].id.clone(),
                        label: Some(set[i].speaker == set[j].speaker),
                    });
                }
            }
            v
        };
        let eval_trials = all_pairs(&eval);
        // every target pair plus random nontargets, up to `qmf_trials`
        let (mut targets, mut nontargets): (Vec<Trial>, Vec<Trial>) =
            all_pairs(&qmf).into_iter().partition(|t| t.label == Some(true));
        nontargets.shuffle(&mut rng);
        nontargets.truncate(cfg.qmf_trials.saturating_sub(targets.len()));
        targets.extend(nontargets);
        Ok(Self { eval, eval_trials, cohort, qmf, qmf_trials: targets })
    }
}

/// Metrics of the three back-end stages on the same evaluation trials.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub raw: Metrics,
    pub asnorm: Metrics,
    pub qmf: Metrics,
    pub raw_scores: Vec<ScoredTrial>,
    pub asnorm_scores: Vec<ScoredTrial>,
    pub qmf_scores: Vec<ScoredTrial>,
    pub qmf_model: QmfModel,
}

/// raw cosine -> AS-Norm -> QMF on one corpus. The QMF is trained on the
/// corpus's separate QMF trials, using AS-Norm scores as its score feature.
pub fn run_ablation(corpus: &BackendCorpus, top_n: usize, p_targets: &[f64]) -> Result<AblationReport> {
    let cohort = build_cohort(&corpus.cohort)?;
    let labels_of = |trials: &[Trial]| -> Result<Vec<bool>> {
        trials
            .iter()
            .map(|t| t.label.ok_or_else(|| Error::MissingField(format!("label for trial `{} {}`", t.enroll, t.test))))
            .collect()
    };

    let qmf_store = EmbeddingStore::new(&corpus.qmf)?;
    let qmf_raw = score_trials(&qmf_store, &corpus.qmf_trials)?;
    let qmf_stats = trial_imposter_stats(&qmf_store, &corpus.qmf_trials, &cohort, top_n)?;
    let qmf_norm = asnorm_trials(&qmf_raw, &qmf_stats)?;
    let qmf_x = trial_features(&qmf_store, &qmf_norm, &qmf_stats)?;
    let fit = train_qmf(&qmf_x, &labels_of(&corpus.qmf_trials)?, QmfTrainConfig::default())?;
    debug_assert_eq!(fit.model.dim(), QMF_FEATURES);

    let store = EmbeddingStore::new(&corpus.eval)?;
    let labels = labels_of(&corpus.eval_trials)?;
    let raw_scores = score_trials(&store, &corpus.eval_trials)?;
    let stats = trial_imposter_stats(&store, &corpus.eval_trials, &cohort, top_n)?;
    let asnorm_scores = asnorm_trials(&raw_scores, &stats)?;
    let x = trial_features(&store, &asnorm_scores, &stats)?;
    let qmf_scores = apply_qmf(&fit.model, &asnorm_scores, &x)?;

    let values = |s: &[ScoredTrial]| s.iter().map(|t| t.score).collect::<Vec<_>>();
    Ok(AblationReport {
        raw: evaluate(&values(&raw_scores), &labels, p_targets)?,
        asnorm: evaluate(&values(&asnorm_scores), &labels, p_targets)?,
        qmf: evaluate(&values(&qmf_scores), &labels, p_targets)?,
        raw_scores,
        asnorm_scores,
        qmf_scores,
        qmf_model: fit.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackendCorpusConfig {
        BackendCorpusConfig {
            eval_utterances: 6,
            cohort_speakers: 20,
            qmf_speakers: 6,
            qmf_utterances: 5,
            qmf_trials: 300,
            top_n: 10,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_shapes() {
        let c = BackendCorpus::generate(&small()).unwrap();
        assert_eq!(c.eval.len(), 48);
        assert_eq!(c.eval_trials.len(), 48 * 47 / 2);
        assert_eq!(c.qmf_trials.len(), 300);
        assert_eq!(c.qmf_trials.iter().filter(|t| t.label == Some(true)).count(), 6 * 10);
        assert!(c.eval.iter().all(|r| (r.vector.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ablation_is_deterministic() {
        let c = BackendCorpus::generate(&small()).unwrap();
        let a = run_ablation(&c, 10, &[0.01]).unwrap();
        let b = run_ablation(&c, 10, &[0.01]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.qmf_scores.len(), c.eval_trials.len());
    }
}
