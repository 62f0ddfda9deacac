//! Central finite-difference checks of the analytic gradients.
//!
//! Every suite draws seeded random instances, computes the analytic gradient
//! and compares it with `(f(x + h e_i) - f(x - h e_i)) / 2h` coordinate by
//! coordinate. The reported error of one instance is the norm-wise relative
//! error `|g_a - g_n| / max(|g_a|, |g_n|)`; a suite reports its worst instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{inter_topk_loss, subcenter_select, LossHead, MarginKind, MarginParams};
use crate::pooling::{mqmha_backward, mqmha_forward, PoolingConfig, QueryBank};
use crate::tensor::{dot, Tensor};
use crate::trainer::{ToyModel, ToyModelConfig};

/// Step for the pooling and end-to-end suites.
pub const POOLING_STEP: f64 = 1e-5;
/// Step for the loss suites.
pub const LOSS_STEP: f64 = 1e-6;
pub const POOLING_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = dot(analytic, analytic).sqrt().max(dot(numeric, numeric).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.worst_relative_error <= self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// MQMHA backward against finite differences of the scalar
/// `<g_m, e_m> + <g_std, e_std>` over both the sequence and the queries.
pub fn pooling_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [(5, 4, 2, 2), (3, 6, 1, 3), (7, 8, 4, 1), (4, 8, 2, 3), (1, 4, 2, 2), (6, 6, 3, 2)];
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (t, d, h, q) = shapes[i % shapes.len()];
        let cfg = PoolingConfig::new(d, h, q)?;
        let o = Tensor::new(vec![t, d], uniform(&mut rng, t * d, 1.0))?;
        let bank = QueryBank::new(Tensor::new(vec![h, q, d / h], uniform(&mut rng, h * q * (d / h), 1.0))?, &cfg)?;
        let gm = uniform(&mut rng, q * d, 1.0);
        let gs = uniform(&mut rng, q * d, 1.0);
        let (go, gmu) = mqmha_backward(&o, &bank, &cfg, &gm, &gs)?;

        let objective = |o: &Tensor, bank: &QueryBank| {
            let p = mqmha_forward(o, bank, &cfg).expect("finite probe");
            dot(&p.e_m, &gm) + dot(&p.e_std, &gs)
        };
        let num_o = central_difference(
            |x| objective(&Tensor::new(vec![t, d], x.to_vec()).unwrap(), &bank),
            o.data(),
            POOLING_STEP,
        );
        let num_mu = central_difference(
            |x| {
                let b = QueryBank::new(Tensor::new(vec![h, q, d / h], x.to_vec()).unwrap(), &cfg).unwrap();
                objective(&o, &b)
            },
            bank.tensor().data(),
            POOLING_STEP,
        );
        let mut analytic = go.into_data();
        analytic.extend_from_slice(gmu.data());
        let mut numeric = num_o;
        numeric.extend(num_mu);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(SuiteReport { name: "mqmha".into(), instances, worst_relative_error: worst, tolerance: POOLING_TOLERANCE })
}

/// Cosines in a band of width `8 / scale` around a random center, pairwise at
/// least `gap` apart so that the top-K set cannot change under a
/// finite-difference probe. The band keeps the logits from saturating the
/// softmax, where the true gradient falls below the differencing noise.
fn separated_cosines(rng: &mut ChaCha8Rng, n: usize, gap: f64, scale: f64) -> Vec<f64> {
    let half = (4.0 / scale).min(0.4);
    loop {
        let center = rng.gen_range(-0.4..0.4);
        let v: Vec<f64> = (0..n).map(|_| center + rng.gen_range(-half..half)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] > gap) {
            return v;
        }
    }
}

/// Draws a head and embedding whose class cosines and subcenter choices are
/// separated enough that a probe of size `LOSS_STEP` cannot reorder them.
/// Saturated draws (loss below 0.05) are redrawn.
fn well_separated_head(
    rng: &mut ChaCha8Rng,
    classes: usize,
    k: usize,
    dim: usize,
    params: MarginParams,
    label: usize,
) -> Result<(LossHead, Vec<f64>)> {
    loop {
        let head = LossHead::random(classes, k, dim, params, rng)?;
        let x = uniform(rng, dim, 1.0);
        let sel = subcenter_select(&x, &head)?;
        let mut s = sel.cos.clone();
        s.sort_by(f64::total_cmp);
        let classes_ok = s.windows(2).all(|w| w[1] - w[0] > 1e-3) && s.iter().all(|c| c.abs() < 0.9);
        let subs_ok = (0..classes).all(|j| {
            let d = head.dim();
            let xn = dot(&x, &x).sqrt();
            let mut cs: Vec<f64> = (0..k)
                .map(|kk| {
                    let w = &head.weights().data()[(j * k + kk) * d..(j * k + kk + 1) * d];
                    dot(&x, w) / (xn * dot(w, w).sqrt())
                })
                .collect();
            cs.sort_by(f64::total_cmp);
            cs.windows(2).all(|w| w[1] - w[0] > 1e-3)
        });
        if classes_ok && subs_ok && head.forward_backward(&x, label, params.margin)?.loss > 0.05 {
            return Ok((head, x));
        }
    }
}

/// Margin loss gradients for one `(kind, K, Inter-TopK)` combination, checked
/// with respect to the class cosines, the embedding and the subcenters.
pub fn loss_suite(kind: MarginKind, subcenters: usize, inter_topk: bool, instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 6;
    let dim = 5;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let params = MarginParams {
            scale: rng.gen_range(10.0..40.0),
            margin: rng.gen_range(0.0..0.5),
            topk_penalty: if inter_topk { rng.gen_range(0.02..0.2) } else { 0.0 },
            top_k: rng.gen_range(1..classes),
            kind,
        };
        let label = rng.gen_range(0..classes);
        let margin = params.margin;

        // with respect to the cosines
        let cos = separated_cosines(&mut rng, classes, 1e-3, params.scale);
        let head = LossHead::new(Tensor::zeros(vec![classes, 1, 1])?, params)?;
        let (_, g) = inter_topk_loss(&cos, label, &head, margin)?;
        let n = central_difference(|c| inter_topk_loss(c, label, &head, margin).unwrap().0, &cos, LOSS_STEP);
        worst = worst.max(relative_error(&g, &n));

        // with respect to the embedding and the subcenter weights
        let (head, x) = well_separated_head(&mut rng, classes, subcenters, dim, params, label)?;
        let out = head.forward_backward(&x, label, margin)?;
        let nx = central_difference(|v| head.forward_backward(v, label, margin).unwrap().loss, &x, LOSS_STEP);
        let shape = head.weights().shape().to_vec();
        let nw = central_difference(
            |w| {
                let h = LossHead::new(Tensor::new(shape.clone(), w.to_vec()).unwrap(), params).unwrap();
                h.forward_backward(&x, label, margin).unwrap().loss
            },
            head.weights().data(),
            LOSS_STEP,
        );
        let mut analytic = out.grad_x.clone();
        analytic.extend_from_slice(out.grad_weights.data());
        let mut numeric = nx;
        numeric.extend(nw);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    let name = format!(
        "{}-softmax K={subcenters} inter-topk={}",
        match kind {
            MarginKind::Am => "am",
            MarginKind::Aam => "aam",
        },
        if inter_topk { "on" } else { "off" }
    );
    Ok(SuiteReport { name, instances, worst_relative_error: worst, tolerance: LOSS_TOLERANCE })
}

/// End-to-end check of the toy model: projection -> MQMHA -> embedding layer
/// -> subcenter margin loss, every parameter group at once.
pub fn toy_model_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let cfg = ToyModelConfig {
            input_dim: 3,
            dim: 4,
            heads: 2,
            queries: 2,
            embedding_dim: 5,
            classes: 4,
            subcenters: 2,
            margin: MarginParams { scale: 8.0, margin: 0.1, topk_penalty: 0.05, top_k: 2, kind: MarginKind::Am },
        };
        let model = ToyModel::random(&cfg, &mut rng)?;
        let t = rng.gen_range(2..6);
        let frames = Tensor::new(vec![t, 3], uniform(&mut rng, t * 3, 1.0))?;
        let label = rng.gen_range(0..cfg.classes);
        let margin = 0.1;
        let (_, grads) = model.loss_and_grad(&frames, label, margin)?;
        let params = model.flat_params();
        let numeric = central_difference(
            |p| {
                let mut m = model.clone();
                m.set_flat_params(p).unwrap();
                m.loss(&frames, label, margin).unwrap()
            },
            &params,
            POOLING_STEP,
        );
        worst = worst.max(relative_error(&grads.flatten(), &numeric));
    }
    Ok(SuiteReport { name: "toy-model end-to-end".into(), instances, worst_relative_error: worst, tolerance: MODEL_TOLERANCE })
}

/// Every suite: MQMHA, the eight loss variants and the end-to-end model.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut reports = vec![pooling_suite(instances, seed)?];
    let mut offset = 1;
    for kind in [MarginKind::Am, MarginKind::Aam] {
        for k in [1, 3] {
            for topk in [false, true] {
                reports.push(loss_suite(kind, k, topk, instances, seed.wrapping_add(offset))?);
                offset += 1;
            }
        }
    }
    reports.push(toy_model_suite(instances, seed.wrapping_add(offset))?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[1.5, -1.0], 1e-5);
        assert!((g[0] - 6.75).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn small_suites_pass() {
        assert!(pooling_suite(6, 1).unwrap().passed());
        assert!(loss_suite(MarginKind::Aam, 3, true, 4, 2).unwrap().passed());
    }
}
