//! Multi-query multi-head attention pooling (MQMHA) with attentive standard
//! deviation, and plain statistics pooling.
//!
//! Each frame `o_t` of a `[T, d]` sequence is split into `H` slices of width
//! `d / H`. Every head owns `Q` query vectors. For head `h` and query `q` the
//! attention weights are a softmax over time of `o_t^h . mu_h^q`; the pooled
//! mean `m_{h,q}` is the attention-weighted sum of the slices and the
//! attentive standard deviation is the elementwise weighted deviation around
//! it, floored at [`EPS_VAR`] before the square root.
//!
//! `H = 1, Q > 1` reproduces multi-head self-attentive pooling and
//! `H > 1, Q = 1` reproduces split-feature multi-head attention pooling.
//!
//! Output layout: `e_m` and `e_std` are both `Q * d` long, ordered by head,
//! then query, then slice coordinate: index `(h * Q + q) * (d / H) + k`.

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{softmax, Tensor};

/// Variance floor applied before the square root.
pub const EPS_VAR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolingConfig {
    dim: usize,
    heads: usize,
    queries: usize,
}

impl PoolingConfig {
    pub fn new(dim: usize, heads: usize, queries: usize) -> Result<Self> {
        if heads == 0 || queries == 0 || dim == 0 {
            return Err(invalid!("pooling needs dim, heads and queries >= 1 (got {dim}, {heads}, {queries})"));
        }
        if !dim.is_multiple_of(heads) {
            return Err(invalid!("feature dim {dim} is not divisible by {heads} heads"));
        }
        Ok(Self { dim, heads, queries })
    }

    /// 16 heads with 4 queries each.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(dim, 16, 4)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Length of `[e_m, e_std]`: `2 * Q * d`.
    pub fn output_dim(&self) -> usize {
        2 * self.queries * self.dim
    }
}

/// Trainable query vectors, `[H, Q, d / H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank {
    mu: Tensor,
}

impl QueryBank {
    pub fn new(mu: Tensor, cfg: &PoolingConfig) -> Result<Self> {
        let expect = [cfg.heads, cfg.queries, cfg.head_dim()];
        if mu.shape() != expect {
            return Err(shape_err!("query bank must be {expect:?}, got {:?}", mu.shape()));
        }
        Ok(Self { mu })
    }

    pub fn zeros(cfg: &PoolingConfig) -> Self {
        Self { mu: Tensor::zeros(vec![cfg.heads, cfg.queries, cfg.head_dim()]).expect("positive extents") }
    }

    /// Zero-mean uniform initialization with half-width `1 / sqrt(d / H)`.
    pub fn random(cfg: &PoolingConfig, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mu = Tensor::from_fn(vec![cfg.heads, cfg.queries, cfg.head_dim()], |_| rng.gen_range(-bound..bound))
            .expect("positive extents");
        Self { mu }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mu
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        self.mu.data_mut()
    }

    fn query(&self, cfg: &PoolingConfig, h: usize, q: usize) -> &[f64] {
        let dh = cfg.head_dim();
        let start = (h * cfg.queries + q) * dh;
        &self.mu.data()[start..start + dh]
    }
}

/// Result of [`mqmha_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub e_m: Vec<f64>,
    pub e_std: Vec<f64>,
    /// Attention weights `[T, H, Q]`.
    pub weights: Tensor,
}

impl PooledEmbedding {
    /// `[e_m, e_std]`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.e_m.clone();
        v.extend_from_slice(&self.e_std);
        v
    }
}

fn frames(o: &Tensor, cfg: &PoolingConfig) -> Result<usize> {
    match *o.shape() {
        [t, d] if d == cfg.dim => Ok(t),
        [_, d] => Err(shape_err!("feature dim: sequence has {d} but pooling is configured for {}", cfg.dim)),
        _ => Err(shape_err!("pooling input must be [T, d], got {:?}", o.shape())),
    }
}

/// Attention weights over time for one `(h, q)` pair.
fn head_weights(o: &Tensor, mu: &[f64], h: usize, dh: usize) -> Result<Vec<f64>> {
    let d = o.shape()[1];
    let logits: Vec<f64> = o
        .data()
        .chunks(d)
        .map(|row| row[h * dh..(h + 1) * dh].iter().zip(mu).map(|(a, b)| a * b).sum())
        .collect();
    softmax(&logits)
}

pub fn mqmha_forward(o: &Tensor, queries: &QueryBank, cfg: &PoolingConfig) -> Result<PooledEmbedding> {
    let t_len = frames(o, cfg)?;
    let (h_n, q_n, dh, d) = (cfg.heads, cfg.queries, cfg.head_dim(), cfg.dim);
    let mut e_m = vec![0.0; q_n * d];
    let mut e_std = vec![0.0; q_n * d];
    let mut weights = vec![0.0; t_len * h_n * q_n];
    for h in 0..h_n {
        for q in 0..q_n {
            let w = head_weights(o, queries.query(cfg, h, q), h, dh)?;
            let base = (h * q_n + q) * dh;
            let mean = &mut e_m[base..base + dh];
            for (t, row) in o.data().chunks(d).enumerate() {
                weights[(t * h_n + h) * q_n + q] = w[t];
                for (m, x) in mean.iter_mut().zip(&row[h * dh..(h + 1) * dh]) {
                    *m += w[t] * x;
                }
            }
            let mean = e_m[base..base + dh].to_vec();
            let std = &mut e_std[base..base + dh];
            for (t, row) in o.data().chunks(d).enumerate() {
                for ((s, x), m) in std.iter_mut().zip(&row[h * dh..(h + 1) * dh]).zip(&mean) {
                    *s += w[t] * (x - m) * (x - m);
                }
            }
            std.iter_mut().for_each(|s| *s = s.max(EPS_VAR).sqrt());
        }
    }
    if e_m.iter().chain(&e_std).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pooled embedding".into()));
    }
    Ok(PooledEmbedding { e_m, e_std, weights: Tensor::new(vec![t_len, h_n, q_n], weights)? })
}

/// Analytic gradients of [`mqmha_forward`] with respect to the sequence and
/// the queries, given upstream gradients for `e_m` and `e_std`.
pub fn mqmha_backward(
    o: &Tensor,
    queries: &QueryBank,
    cfg: &PoolingConfig,
    grad_e_m: &[f64],
    grad_e_std: &[f64],
) -> Result<(Tensor, Tensor)> {
    let t_len = frames(o, cfg)?;
    let (h_n, q_n, dh, d) = (cfg.heads, cfg.queries, cfg.head_dim(), cfg.dim);
    if grad_e_m.len() != q_n * d || grad_e_std.len() != q_n * d {
        return Err(shape_err!(
            "upstream gradients must have length Q * d = {} (got {} and {})",
            q_n * d,
            grad_e_m.len(),
            grad_e_std.len()
        ));
    }
    let x = o.data();
    let mut grad_o = vec![0.0; t_len * d];
    let mut grad_mu = vec![0.0; h_n * q_n * dh];
    for h in 0..h_n {
        let cols = h * dh..(h + 1) * dh;
        for q in 0..q_n {
            let mu = queries.query(cfg, h, q);
            let w = head_weights(o, mu, h, dh)?;
            let base = (h * q_n + q) * dh;
            let g_m = &grad_e_m[base..base + dh];

            let mut mean = vec![0.0; dh];
            for (t, row) in x.chunks(d).enumerate() {
                for (m, v) in mean.iter_mut().zip(&row[cols.clone()]) {
                    *m += w[t] * v;
                }
            }
            let mut var = vec![0.0; dh];
            for (t, row) in x.chunks(d).enumerate() {
                for ((s, v), m) in var.iter_mut().zip(&row[cols.clone()]).zip(&mean) {
                    *s += w[t] * (v - m) * (v - m);
                }
            }
            // d std / d var vanishes where the floor is active.
            let g_v: Vec<f64> = var
                .iter()
                .zip(&grad_e_std[base..base + dh])
                .map(|(&v, &g)| if v > EPS_VAR { g / (2.0 * v.sqrt()) } else { 0.0 })
                .collect();

            // Sensitivity of the loss to each weight, then through the softmax.
            let a: Vec<f64> = x
                .chunks(d)
                .map(|row| {
                    row[cols.clone()]
                        .iter()
                        .zip(&mean)
                        .enumerate()
                        .map(|(k, (v, m))| g_m[k] * v + g_v[k] * (v - m) * (v - m))
                        .sum()
                })
                .collect();
            let a_bar: f64 = w.iter().zip(&a).map(|(wi, ai)| wi * ai).sum();

            let gmu = &mut grad_mu[base..base + dh];
            for t in 0..t_len {
                let g_logit = w[t] * (a[t] - a_bar);
                let row = &x[t * d..(t + 1) * d];
                let grow = &mut grad_o[t * d..(t + 1) * d];
                for k in 0..dh {
                    let v = row[h * dh + k];
                    grow[h * dh + k] += w[t] * g_m[k] + 2.0 * w[t] * g_v[k] * (v - mean[k]) + g_logit * mu[k];
                    gmu[k] += g_logit * v;
                }
            }
        }
    }
    Ok((Tensor::new(vec![t_len, d], grad_o)?, Tensor::new(vec![h_n, q_n, dh], grad_mu)?))
}

/// Mean and standard deviation over time, `[mean, std]` of length `2d`.
/// The variance is floored at [`EPS_VAR`].
pub fn stats_pooling(o: &Tensor) -> Result<Vec<f64>> {
    let (t_len, d) = match *o.shape() {
        [t, d] => (t, d),
        _ => return Err(shape_err!("pooling input must be [T, d], got {:?}", o.shape())),
    };
    let n = t_len as f64;
    let mut mean = vec![0.0; d];
    for row in o.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in o.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut out = mean;
    out.extend(var.into_iter().map(|s| (s / n).max(EPS_VAR).sqrt()));
    Ok(out)
}
