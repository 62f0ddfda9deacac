//! Quality measure function: logistic regression over trial quality features.

use super::{EmbeddingRecord, ImposterStats};
use crate::error::{invalid, shape_err, Error, Result};

/// Number of quality features per trial.
pub const QMF_FEATURES: usize = 7;

/// Feature names, in vector order.
pub const FEATURE_NAMES: [&str; QMF_FEATURES] = [
    "score",
    "log_duration_enroll",
    "log_duration_test",
    "imposter_mean_enroll",
    "imposter_mean_test",
    "magnitude_enroll",
    "magnitude_test",
];

/// `[score, ln dur_e, ln dur_t, mu_e, mu_t, |e|, |t|]` for one trial, where
/// the magnitudes are the norms before length normalization.
pub fn qmf_features(
    score: f64,
    enroll: &EmbeddingRecord,
    test: &EmbeddingRecord,
    enroll_stats: ImposterStats,
    test_stats: ImposterStats,
) -> Result<[f64; QMF_FEATURES]> {
    for r in [enroll, test] {
        if !(r.duration_s > 0.0) || !r.duration_s.is_finite() {
            return Err(Error::MissingField(format!("{}.duration_s", r.id)));
        }
        if !(r.raw_magnitude > 0.0) || !r.raw_magnitude.is_finite() {
            return Err(Error::MissingField(format!("{}.raw_magnitude", r.id)));
        }
    }
    Ok([
        score,
        enroll.duration_s.ln(),
        test.duration_s.ln(),
        enroll_stats.mean,
        test_stats.mean,
        enroll.raw_magnitude,
        test.raw_magnitude,
    ])
}

/// Standardization statistics plus logistic-regression weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QmfModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl QmfModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Log-odds of a target trial. This is the calibrated score.
    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dim() {
            return Err(shape_err!("QMF expects {} features, got {}", self.dim(), features.len()));
        }
        Ok(self.bias
            + features
                .iter()
                .zip(&self.mean)
                .zip(&self.std)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>())
    }

    pub fn probability(&self, features: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(features)?))
    }

    /// Text form: one `key v1 v2 ...` line each for mean, std, weights, bias.
    pub fn to_text(&self) -> String {
        let row = |name: &str, v: &[f64]| {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            format!("{name} {}\n", vals.join(" "))
        };
        row("mean", &self.mean) + &row("std", &self.std) + &row("weights", &self.weights) + &row("bias", &[self.bias])
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: [Option<Vec<f64>>; 4] = Default::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let slot = match key {
                "mean" => 0,
                "std" => 1,
                "weights" => 2,
                "bias" => 3,
                _ => return Err(Error::Format(format!("QMF model line {}: unknown key `{key}`", n + 1))),
            };
            let vals = parts
                .map(|p| p.parse::<f64>().map_err(|e| Error::Format(format!("QMF model line {}: {e}", n + 1))))
                .collect::<Result<Vec<_>>>()?;
            fields[slot] = Some(vals);
        }
        let [mean, std, weights, bias] = fields;
        let get = |f: Option<Vec<f64>>, name: &str| f.ok_or_else(|| Error::MissingField(name.into()));
        let (mean, std, weights, bias) = (get(mean, "mean")?, get(std, "std")?, get(weights, "weights")?, get(bias, "bias")?);
        if bias.len() != 1 || mean.len() != weights.len() || std.len() != weights.len() {
            return Err(Error::Format("QMF model has inconsistent lengths".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) || mean.iter().chain(&weights).chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Format("QMF model has non-finite or non-positive entries".into()));
        }
        Ok(Self { mean, std, weights, bias: bias[0] })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmfTrainConfig {
    pub l2: f64,
    pub iterations: usize,
}

impl Default for QmfTrainConfig {
    fn default() -> Self {
        Self { l2: 1e-4, iterations: 1000 }
    }
}

/// Result of [`train_qmf`].
#[derive(Debug, Clone, PartialEq)]
pub struct QmfFit {
    pub model: QmfModel,
    /// Regularized training loss before each iteration and after the last.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on standardized features with an L2 penalty
/// on the weights (not the bias).
///
/// The step is `1 / (0.25 (d + 1) + l2)`. After standardization the Hessian of
/// the mean log-loss is bounded by `0.25 (d + 1)`, so this step never
/// increases the loss.
pub fn train_qmf(features: &[Vec<f64>], labels: &[bool], cfg: QmfTrainConfig) -> Result<QmfFit> {
    if features.len() != labels.len() {
        return Err(shape_err!("{} feature rows but {} labels", features.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Degenerate("QMF training needs both target and nontarget trials".into()));
    }
    if !(cfg.l2 >= 0.0) || !cfg.l2.is_finite() {
        return Err(invalid!("L2 strength must be >= 0, got {}", cfg.l2));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(invalid!("QMF needs at least one feature"));
    }
    if let Some(i) = features.iter().position(|r| r.len() != d) {
        return Err(shape_err!("feature row {i} has {} values, row 0 has {d}", features[i].len()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QMF training features".into()));
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| features.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let v = features.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            // a constant feature carries nothing; keep it inert
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = features.iter().map(|r| (0..d).map(|k| (r[k] - mean[k]) / std[k]).collect()).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();

    let step = 1.0 / (0.25 * (d as f64 + 1.0) + cfg.l2);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..=cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (row, &yi) in z.iter().zip(&y) {
            let s = b + row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
            // log(1 + e^s) - y s, computed stably
            loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - yi * s;
            let r = sigmoid(s) - yi;
            gb += r;
            gw.iter_mut().zip(row).for_each(|(g, x)| *g += r * x);
        }
        let reg = 0.5 * cfg.l2 * w.iter().map(|v| v * v).sum::<f64>();
        trace.push(loss / n + reg);
        if trace.len() > cfg.iterations {
            break;
        }
        for (wk, gk) in w.iter_mut().zip(&gw) {
            *wk -= step * (gk / n + cfg.l2 * *wk);
        }
        b -= step * gb / n;
    }
    Ok(QmfFit { model: QmfModel { mean, std, weights: w, bias: b }, loss_trace: trace })
}
