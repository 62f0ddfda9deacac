//! Subcenter AM/AAM-Softmax with the Inter-TopK penalty, and margin schedules.
//!
//! Each class `j` owns `K` subcenter vectors `W[j, k]`; the class cosine is the
//! largest cosine between the embedding and any of its subcenters. Logits are
//! then built from the class cosines:
//!
//! | kind | target `y`            | top-K non-targets        | other non-targets |
//! |------|-----------------------|--------------------------|-------------------|
//! | AM   | `s (cos y - m)`       | `s (cos j + m')`         | `s cos j`         |
//! | AAM  | `s cos(theta_y + m)`  | `s cos(theta_j - m')`    | `s cos j`         |
//!
//! The top-K set holds the `K` largest non-target cosines (ties broken towards
//! the lower class index). `m' = 0` recovers the plain margin loss. The loss of
//! one example is the negative log-softmax of the target logit; callers
//! average over a batch.
//!
//! Gradients flow only through the selected (argmax) subcenter of each class.

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{dot, log_sum_exp, norm, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    /// Additive cosine margin.
    Am,
    /// Additive angular margin.
    Aam,
}

/// Scale, margins and Inter-TopK settings of a margin softmax head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams {
    pub scale: f64,
    pub margin: f64,
    pub topk_penalty: f64,
    pub top_k: usize,
    pub kind: MarginKind,
}

impl MarginParams {
    /// AM-Softmax with `s = 35`, `m = 0.2` and an Inter-TopK penalty of
    /// `0.06` on the five closest non-target classes.
    pub fn standard() -> Self {
        Self { scale: 35.0, margin: 0.2, topk_penalty: 0.06, top_k: 5, kind: MarginKind::Am }
    }

    /// Large-margin fine-tuning: AAM-Softmax, Inter-TopK removed. The margin
    /// itself is driven by an exponential 0.2 -> 0.5 schedule.
    pub fn fine_tune() -> Self {
        Self { scale: 35.0, margin: 0.2, topk_penalty: 0.0, top_k: 5, kind: MarginKind::Aam }
    }
}

/// Number of subcenters per class in the default head.
pub const DEFAULT_SUBCENTERS: usize = 3;

/// Subcenter classification head plus its margin hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHead {
    weights: Tensor,
    pub scale: f64,
    pub margin: f64,
    pub topk_penalty: f64,
    pub top_k: usize,
    pub kind: MarginKind,
}

impl LossHead {
    /// `weights` is `[C, K, d]`.
    pub fn new(weights: Tensor, params: MarginParams) -> Result<Self> {
        let MarginParams { scale, margin, topk_penalty, top_k, kind } = params;
        let classes = match *weights.shape() {
            [c, k, d] if c >= 2 && k >= 1 && d >= 1 => c,
            _ => return Err(shape_err!("subcenter weights must be [C >= 2, K, d], got {:?}", weights.shape())),
        };
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(invalid!("scale must be positive, got {scale}"));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(invalid!("margin must lie in [0, 1), got {margin}"));
        }
        if !(topk_penalty >= 0.0) || !topk_penalty.is_finite() {
            return Err(invalid!("Inter-TopK penalty must be >= 0, got {topk_penalty}"));
        }
        if top_k == 0 || top_k >= classes {
            return Err(invalid!("top_k must lie in [1, C - 1] = [1, {}], got {top_k}", classes - 1));
        }
        Ok(Self { weights, scale, margin, topk_penalty, top_k, kind })
    }

    /// Uniform random subcenters.
    pub fn random(classes: usize, subcenters: usize, dim: usize, params: MarginParams, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let w = Tensor::from_fn(vec![classes, subcenters, dim], |_| rng.gen_range(-bound..bound))?;
        Self::new(w, params)
    }

    pub fn params(&self) -> MarginParams {
        MarginParams {
            scale: self.scale,
            margin: self.margin,
            topk_penalty: self.topk_penalty,
            top_k: self.top_k,
            kind: self.kind,
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.data_mut()
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn subcenters(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn inter_topk_enabled(&self) -> bool {
        self.topk_penalty > 0.0
    }

    fn subcenter(&self, class: usize, k: usize) -> &[f64] {
        let d = self.dim();
        let start = (class * self.subcenters() + k) * d;
        &self.weights.data()[start..start + d]
    }

    /// Full forward/backward for one example: loss, gradient with respect to
    /// the embedding, and gradient with respect to the subcenter weights.
    pub fn forward_backward(&self, x: &[f64], label: usize, margin: f64) -> Result<LossGrad> {
        let sel = subcenter_select(x, self)?;
        let (loss, grad_cos) = inter_topk_loss(&sel.cos, label, self, margin)?;
        let d = self.dim();
        let xn = norm(x);
        let mut grad_x = vec![0.0; d];
        let mut grad_w = vec![0.0; self.weights.numel()];
        for (j, (&g, &k)) in grad_cos.iter().zip(&sel.selected).enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = self.subcenter(j, k);
            let wn = norm(w);
            let c = sel.cos[j];
            let start = (j * self.subcenters() + k) * d;
            let gw = &mut grad_w[start..start + d];
            for i in 0..d {
                grad_x[i] += g * (w[i] / (xn * wn) - c * x[i] / (xn * xn));
                gw[i] += g * (x[i] / (xn * wn) - c * w[i] / (wn * wn));
            }
        }
        Ok(LossGrad { loss, grad_cos, grad_x, grad_weights: Tensor::new(self.weights.shape().to_vec(), grad_w)? })
    }
}

/// Output of [`LossHead::forward_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_cos: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_weights: Tensor,
}

/// Class cosines and the subcenter index that produced each.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcenterSelection {
    pub cos: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Per-class max-over-subcenters cosine and the winning subcenter.
pub fn subcenter_select(x: &[f64], head: &LossHead) -> Result<SubcenterSelection> {
    if x.len() != head.dim() {
        return Err(shape_err!("embedding dim {} does not match head dim {}", x.len(), head.dim()));
    }
    let xn = norm(x);
    if !(xn > 0.0) {
        return Err(Error::Degenerate("zero embedding has no direction".into()));
    }
    let mut cos = Vec::with_capacity(head.classes());
    let mut selected = Vec::with_capacity(head.classes());
    for j in 0..head.classes() {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..head.subcenters() {
            let w = head.subcenter(j, k);
            let wn = norm(w);
            if !(wn > 0.0) {
                return Err(Error::Degenerate(format!("subcenter {k} of class {j} is the zero vector")));
            }
            let c = (dot(x, w) / (xn * wn)).clamp(-1.0, 1.0);
            if c > best.0 {
                best = (c, k);
            }
        }
        cos.push(best.0);
        selected.push(best.1);
    }
    Ok(SubcenterSelection { cos, selected })
}

/// `cos(theta_j) = max_k cosine(x, W[j, k])` for every class.
pub fn subcenter_cosines(x: &[f64], head: &LossHead) -> Result<Vec<f64>> {
    Ok(subcenter_select(x, head)?.cos)
}

/// Indices of the `k` largest non-target cosines, ties broken by lower index.
pub fn top_k_non_target(cos: &[f64], target: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cos.len()).filter(|&j| j != target).collect();
    idx.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn sin_of(c: f64) -> f64 {
    (1.0 - c * c).max(0.0).sqrt()
}

/// Loss and gradient with respect to the class cosines.
pub fn inter_topk_loss(cos: &[f64], label: usize, head: &LossHead, margin: f64) -> Result<(f64, Vec<f64>)> {
    let c = cos.len();
    if c < 2 {
        return Err(invalid!("need at least two classes, got {c}"));
    }
    if label >= c {
        return Err(invalid!("label {label} out of range for {c} classes"));
    }
    if head.top_k >= c {
        return Err(invalid!("top_k = {} must be < C = {c}", head.top_k));
    }
    if let Some(v) = cos.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(invalid!("cosine {v} outside [-1, 1]"));
    }
    if !(0.0..1.0).contains(&margin) {
        return Err(invalid!("margin must lie in [0, 1), got {margin}"));
    }
    let s = head.scale;
    let mp = head.topk_penalty;
    let mut penalized = vec![false; c];
    if mp > 0.0 {
        for j in top_k_non_target(cos, label, head.top_k) {
            penalized[j] = true;
        }
    }
    // logits and d logit / d cos
    let mut logits = vec![0.0; c];
    let mut dlogit = vec![s; c];
    for j in 0..c {
        let cj = cos[j];
        logits[j] = match (head.kind, j == label, penalized[j]) {
            (MarginKind::Am, true, _) => s * (cj - margin),
            (MarginKind::Am, false, true) => s * (cj + mp),
            (MarginKind::Aam, true, _) => {
                // cos(theta + m) = c cos m - sin(theta) sin m
                let st = sin_of(cj);
                dlogit[j] = s * (margin.cos() + cj / st.max(1e-12) * margin.sin());
                s * (cj * margin.cos() - st * margin.sin())
            }
            (MarginKind::Aam, false, true) => {
                // cos(theta - m') = c cos m' + sin(theta) sin m'
                let st = sin_of(cj);
                dlogit[j] = s * (mp.cos() - cj / st.max(1e-12) * mp.sin());
                s * (cj * mp.cos() + st * mp.sin())
            }
            (_, false, false) => s * cj,
        };
    }
    let loss = log_sum_exp(&logits) - logits[label];
    let p = softmax(&logits)?;
    let grad = (0..c)
        .map(|j| (p[j] - if j == label { 1.0 } else { 0.0 }) * dlogit[j])
        .collect();
    if !loss.is_finite() {
        return Err(Error::NonFinite("margin softmax loss".into()));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Exponential,
}

/// Margin ramp from `start` to `end` over `total_steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSchedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl MarginSchedule {
    pub fn new(kind: ScheduleKind, start: f64, end: f64, total_steps: u64) -> Result<Self> {
        if !(start >= 0.0) || !(start <= end) || !(end < 1.0) {
            return Err(invalid!("margin schedule needs 0 <= start <= end < 1, got {start} -> {end}"));
        }
        if total_steps == 0 {
            return Err(invalid!("margin schedule needs total_steps >= 1"));
        }
        if kind == ScheduleKind::Exponential && start == 0.0 {
            return Err(invalid!("an exponential margin schedule cannot start at 0"));
        }
        Ok(Self { kind, start, end, total_steps })
    }

    pub fn constant(margin: f64) -> Result<Self> {
        Self::new(ScheduleKind::Linear, margin, margin, 1)
    }

    pub fn value(&self, step: u64) -> f64 {
        margin_value(self, step)
    }
}

/// Linear: `start + (end - start) * r`; exponential: `start * (end / start)^r`,
/// with `r = min(step / total_steps, 1)`. Exactly `end` from `total_steps` on.
pub fn margin_value(sched: &MarginSchedule, step: u64) -> f64 {
    if step >= sched.total_steps {
        return sched.end;
    }
    let r = step as f64 / sched.total_steps as f64;
    match sched.kind {
        ScheduleKind::Linear => sched.start + (sched.end - sched.start) * r,
        ScheduleKind::Exponential => sched.start * (sched.end / sched.start).powf(r),
    }
}
