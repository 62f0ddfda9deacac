//! Equal error rate and minimum detection cost.
//!
//! A trial is accepted when its score is `>=` the threshold. Candidate
//! thresholds are every distinct score plus `+inf` (reject everything), so the
//! sweep visits every operating point of the empirical ROC exactly once.

use crate::error::{invalid, shape_err, Error, Result};

/// One point of the ROC sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of trial {i}")));
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::Degenerate(format!(
            "metrics need both target and nontarget trials (got {n_tar} targets, {n_non} nontargets)"
        )));
    }
    Ok((n_tar, n_non))
}

/// The ROC in order of increasing threshold: from `(P_miss, P_fa) = (0, 1)` at
/// the lowest score to `(1, 0)` at `+inf`.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    let (n_tar, n_non) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    // Trials strictly below the current threshold.
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        points.push(OperatingPoint {
            threshold,
            p_miss: tar_below as f64 / n_tar as f64,
            p_fa: (n_non - non_below) as f64 / n_non as f64,
        });
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, p_miss: 1.0, p_fa: 0.0 });
    Ok(points)
}

/// Equal error rate, interpolated linearly between the two operating points
/// where `P_miss - P_fa` changes sign. Returns `(eer, threshold)` where the
/// threshold is that of the first point with `P_miss >= P_fa`.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    Ok(eer_from_points(&roc_points(scores, labels)?))
}

/// EER on an already computed ROC (see [`roc_points`]).
pub fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    let i = points.iter().position(|p| p.p_miss >= p.p_fa).expect("the last point has P_miss = 1 >= P_fa = 0");
    let cur = points[i];
    if cur.p_miss == cur.p_fa || i == 0 {
        return (cur.p_miss, cur.threshold);
    }
    let prev = points[i - 1];
    let (dm, df) = (cur.p_miss - prev.p_miss, cur.p_fa - prev.p_fa);
    let alpha = (prev.p_fa - prev.p_miss) / (dm - df);
    (prev.p_miss + alpha * dm, cur.threshold)
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl DcfParams {
    pub fn new(p_target: f64) -> Result<Self> {
        Self::with_costs(p_target, 1.0, 1.0)
    }

    pub fn with_costs(p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self> {
        if !(p_target > 0.0 && p_target < 1.0) {
            return Err(invalid!("p_target must lie in (0, 1), got {p_target}"));
        }
        if !(c_miss > 0.0 && c_fa > 0.0) || !c_miss.is_finite() || !c_fa.is_finite() {
            return Err(invalid!("detection costs must be positive and finite"));
        }
        Ok(Self { p_target, c_miss, c_fa })
    }

    /// Cost of one operating point, normalized by the best trivial system.
    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        let raw = self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa;
        raw / (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum normalized detection cost and the threshold achieving it (the
/// lowest such threshold on ties).
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], params: DcfParams) -> Result<(f64, f64)> {
    Ok(min_dcf_from_points(&roc_points(scores, labels)?, params))
}

pub fn min_dcf_from_points(points: &[OperatingPoint], params: DcfParams) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::INFINITY), |best, p| {
        let c = params.normalized_cost(p.p_miss, p.p_fa);
        if c < best.0 {
            (c, p.threshold)
        } else {
            best
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eer_examples() {
        let eer = |t: &[f64], n: &[f64]| {
            let scores: Vec<f64> = t.iter().chain(n).copied().collect();
            let labels: Vec<bool> = t.iter().map(|_| true).chain(n.iter().map(|_| false)).collect();
            compute_eer(&scores, &labels).unwrap().0
        };
        assert_eq!(eer(&[0.9, 0.8], &[0.1, 0.2]), 0.0);
        assert_eq!(eer(&[0.1], &[0.9]), 1.0);
        assert_eq!(eer(&[0.8, 0.4], &[0.6, 0.2]), 0.5);
    }

    #[test]
    fn interpolated_eer() {
        // P_miss is flat at 1/2 while P_fa drops from 2/3 to 1/3 across the crossing.
        let scores = [0.1, 0.2, 0.3, 0.4, 0.5];
        let labels = [false, true, false, true, false];
        let (eer, _) = compute_eer(&scores, &labels).unwrap();
        assert!((eer - 0.5).abs() < 1e-15);
        let pts = roc_points(&scores, &labels).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].p_fa, 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(compute_eer(&[0.1, 0.2], &[true, true]).is_err());
        assert!(compute_min_dcf(&[0.1], &[false], DcfParams::new(0.01).unwrap()).is_err());
        assert!(DcfParams::new(1.0).is_err());
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::new(0.05).unwrap();
        let (sep, _) = compute_min_dcf(&[0.9, 0.8, 0.1], &[true, true, false], p).unwrap();
        assert_eq!(sep, 0.0);
        let (flat, _) = compute_min_dcf(&[0.5; 4], &[true, false, true, false], p).unwrap();
        assert!((flat - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_count_as_accepts() {
        // At threshold 0.5 both tied trials are accepted: P_miss 0, P_fa 1.
        let pts = roc_points(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(pts, vec![
            OperatingPoint { threshold: 0.5, p_miss: 0.0, p_fa: 1.0 },
            OperatingPoint { threshold: f64::INFINITY, p_miss: 1.0, p_fa: 0.0 },
        ]);
    }
}
