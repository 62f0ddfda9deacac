//! Scoring back-end: cosine scoring, adaptive score normalization, quality
//! calibration, score fusion and detection metrics.

pub mod io;
pub mod metrics;
pub mod qmf;

pub use metrics::{compute_eer, compute_min_dcf, DcfParams};
pub use qmf::{qmf_features, train_qmf, QmfModel, QmfTrainConfig, QMF_FEATURES};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{dot, l2_normalize, norm};

/// Default number of top imposter scores used by AS-Norm.
pub const DEFAULT_TOP_N: usize = 400;

/// Floor applied to imposter standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// A stored embedding with the metadata used by quality measures.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub speaker: Option<String>,
    /// Length-normalized embedding.
    pub vector: Vec<f64>,
    /// Norm of the embedding before normalization.
    pub raw_magnitude: f64,
    pub duration_s: f64,
}

impl EmbeddingRecord {
    /// Normalizes `raw` and remembers its magnitude.
    pub fn from_raw(id: impl Into<String>, speaker: Option<String>, raw: &[f64], duration_s: f64) -> Result<Self> {
        let id = id.into();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding `{id}`")));
        }
        let vector = l2_normalize(raw).map_err(|_| Error::Degenerate(format!("embedding `{id}` is the zero vector")))?;
        Ok(Self { id, speaker, vector, raw_magnitude: norm(raw), duration_s })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("embedding dims differ: {} vs {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker-wise averaged, length-normalized imposter embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    speakers: Vec<String>,
    members: Vec<Vec<f64>>,
}

impl Cohort {
    /// One group of embeddings per speaker. Each member is length-normalized
    /// before averaging, and the mean is normalized again.
    pub fn from_groups(groups: Vec<(String, Vec<Vec<f64>>)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(invalid!("cohort needs at least one speaker"));
        }
        let dim = groups.iter().flat_map(|(_, g)| g.first()).map(Vec::len).next().unwrap_or(0);
        let mut speakers = Vec::with_capacity(groups.len());
        let mut members = Vec::with_capacity(groups.len());
        for (spk, group) in groups {
            if group.is_empty() {
                return Err(invalid!("cohort speaker `{spk}` has no embeddings"));
            }
            let mut mean = vec![0.0; dim];
            for e in &group {
                if e.len() != dim {
                    return Err(shape_err!("cohort speaker `{spk}`: embedding dim {} != {dim}", e.len()));
                }
                let u = l2_normalize(e).map_err(|_| Error::Degenerate(format!("cohort speaker `{spk}` has a zero embedding")))?;
                mean.iter_mut().zip(&u).for_each(|(m, v)| *m += v / group.len() as f64);
            }
            let unit = l2_normalize(&mean)
                .map_err(|_| Error::Degenerate(format!("cohort speaker `{spk}` averages to the zero vector")))?;
            speakers.push(spk);
            members.push(unit);
        }
        Ok(Self { speakers, members })
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn members(&self) -> &[Vec<f64>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }
}

/// Groups records by speaker, in order of first appearance.
pub fn build_cohort(records: &[EmbeddingRecord]) -> Result<Cohort> {
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for r in records {
        let spk = r.speaker.as_ref().ok_or_else(|| Error::MissingField(format!("{}.speaker", r.id)))?;
        match groups.iter_mut().find(|(s, _)| s == spk) {
            Some((_, g)) => g.push(r.vector.clone()),
            None => groups.push((spk.clone(), vec![r.vector.clone()])),
        }
    }
    Cohort::from_groups(groups)
}

/// Mean and (population) standard deviation of the top-N imposter scores of
/// one embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImposterStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics of the `top_n` largest cosines between `e` and the cohort. The
/// deviation is floored at [`SIGMA_FLOOR`].
pub fn imposter_stats(e: &[f64], cohort: &Cohort, top_n: usize) -> Result<ImposterStats> {
    if top_n == 0 || top_n > cohort.len() {
        return Err(invalid!("top-N must lie in [1, cohort size = {}], got {top_n}", cohort.len()));
    }
    if e.len() != cohort.dim() {
        return Err(shape_err!("embedding dim {} does not match cohort dim {}", e.len(), cohort.dim()));
    }
    let mut scores = cohort.members.iter().map(|c| cosine_score(e, c)).collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| b.total_cmp(a));
    let top = &scores[..top_n];
    let mean = top.iter().sum::<f64>() / top_n as f64;
    let var = top.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / top_n as f64;
    Ok(ImposterStats { mean, std: var.sqrt().max(SIGMA_FLOOR) })
}

/// Symmetric adaptive normalization from precomputed imposter statistics.
pub fn asnorm_with_stats(raw: f64, enroll: ImposterStats, test: ImposterStats) -> f64 {
    0.5 * ((raw - enroll.mean) / enroll.std + (raw - test.mean) / test.std)
}

/// `0.5 [(raw - mu_e) / sigma_e + (raw - mu_t) / sigma_t]` with statistics over
/// the `top_n` closest cohort speakers of each side.
pub fn asnorm_score(raw: f64, enroll: &[f64], test: &[f64], cohort: &Cohort, top_n: usize) -> Result<f64> {
    let se = imposter_stats(enroll, cohort, top_n)?;
    let st = imposter_stats(test, cohort, top_n)?;
    Ok(asnorm_with_stats(raw, se, st))
}

/// Weighted elementwise sum of aligned score lists.
pub fn fuse_scores(lists: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if lists.is_empty() {
        return Err(invalid!("nothing to fuse"));
    }
    if lists.len() != weights.len() {
        return Err(shape_err!("{} score lists but {} weights", lists.len(), weights.len()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(invalid!("fusion weights must be finite"));
    }
    let n = lists[0].len();
    if let Some((i, l)) = lists.iter().enumerate().find(|(_, l)| l.len() != n) {
        return Err(shape_err!("score list {i} has {} trials, list 0 has {n}", l.len()));
    }
    Ok((0..n).map(|t| lists.iter().zip(weights).map(|(l, w)| w * l[t]).sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cohort_construction() {
        let c = Cohort::from_groups(vec![("a".into(), vec![vec![3.0, 4.0]]), ("b".into(), vec![vec![0.0, 2.0], vec![0.0, 2.0]])])
            .unwrap();
        assert_eq!(c.members()[0], vec![0.6, 0.8]);
        assert_eq!(c.members()[1], vec![0.0, 1.0]);
        let err = Cohort::from_groups(vec![("x".into(), vec![vec![1.0, 0.0], vec![-1.0, 0.0]])]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(m) if m.contains("`x`")));
        assert!(Cohort::from_groups(vec![("e".into(), vec![])]).is_err());
    }

    #[test]
    fn asnorm_basics() {
        let cohort = Cohort::from_groups(
            (0..5).map(|i| (format!("s{i}"), vec![vec![(i as f64).cos(), (i as f64).sin(), 0.3]])).collect(),
        )
        .unwrap();
        let e = [1.0, 0.2, 0.1];
        let t = [0.1, 1.0, -0.2];
        assert!(asnorm_score(0.1, &e, &t, &cohort, 6).is_err());
        let lo = asnorm_score(0.1, &e, &t, &cohort, 3).unwrap();
        let hi = asnorm_score(0.2, &e, &t, &cohort, 3).unwrap();
        assert!(hi > lo);
        let se = imposter_stats(&e, &cohort, 3).unwrap();
        assert_eq!(asnorm_with_stats(se.mean, se, se), 0.0);
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(fuse_scores(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[2.0, 1.0]).unwrap(), vec![5.0, 8.0]);
        assert_eq!(fuse_scores(&[vec![0.3, -1.0]], &[1.0]).unwrap(), vec![0.3, -1.0]);
        assert!(fuse_scores(&[vec![1.0], vec![1.0, 2.0]], &[1.0, 1.0]).is_err());
    }
}
