//! Desk-scale training harness.
//!
//! The toy model is `frames [T, d_in] -> projection [d_in, d] -> MQMHA ->
//! linear [2Qd, d_emb] -> subcenter margin head`, trained with momentum SGD,
//! weight decay, reduce-on-plateau learning-rate decay and a margin schedule.
//! Validation EER is computed on all pairs of held-out utterances.

pub mod config;
pub mod synth;

pub use config::{Stage, TrainConfig};
pub use synth::{SynthConfig, SynthCorpus, SynthUtterance};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{compute_eer, cosine_score};
use crate::error::{invalid, shape_err, Error, Result};
use crate::losses::{LossHead, MarginParams};
use crate::pooling::{mqmha_backward, mqmha_forward, PoolingConfig, QueryBank};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub embedding_dim: usize,
    pub classes: usize,
    pub subcenters: usize,
    pub margin: MarginParams,
}

impl ToyModelConfig {
    pub fn from_train(cfg: &TrainConfig, input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            dim: cfg.dim,
            heads: cfg.heads,
            queries: cfg.queries,
            embedding_dim: cfg.embedding_dim,
            classes,
            subcenters: cfg.subcenters,
            margin: cfg.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    projection: Tensor,
    pooling: PoolingConfig,
    queries: QueryBank,
    final_linear: Tensor,
    head: LossHead,
}

/// Gradients of every trainable tensor, in the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrads {
    pub projection: Vec<f64>,
    pub queries: Vec<f64>,
    pub final_linear: Vec<f64>,
    pub head: Vec<f64>,
}

impl ToyGrads {
    /// Projection, queries, final linear, head: the order of [`ToyModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        [&self.projection, &self.queries, &self.final_linear, &self.head].into_iter().flatten().copied().collect()
    }

    fn zeros_like(m: &ToyModel) -> Self {
        Self {
            projection: vec![0.0; m.projection.numel()],
            queries: vec![0.0; m.queries.tensor().numel()],
            final_linear: vec![0.0; m.final_linear.numel()],
            head: vec![0.0; m.head.weights().numel()],
        }
    }

    fn accumulate(&mut self, other: &Self, w: f64) {
        for (a, b) in [
            (&mut self.projection, &other.projection),
            (&mut self.queries, &other.queries),
            (&mut self.final_linear, &other.final_linear),
            (&mut self.head, &other.head),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
        }
    }
}

impl ToyModel {
    pub fn random(cfg: &ToyModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let pooling = PoolingConfig::new(cfg.dim, cfg.heads, cfg.queries)?;
        if cfg.input_dim == 0 || cfg.embedding_dim == 0 {
            return Err(invalid!("input_dim and embedding_dim must be >= 1"));
        }
        let b = 1.0 / (cfg.input_dim as f64).sqrt();
        let projection = Tensor::from_fn(vec![cfg.input_dim, cfg.dim], |_| rng.gen_range(-b..b))?;
        let queries = QueryBank::random(&pooling, rng);
        let pooled = pooling.output_dim();
        let b = 1.0 / (pooled as f64).sqrt();
        let final_linear = Tensor::from_fn(vec![pooled, cfg.embedding_dim], |_| rng.gen_range(-b..b))?;
        let head = LossHead::random(cfg.classes, cfg.subcenters, cfg.embedding_dim, cfg.margin, rng)?;
        Ok(Self { projection, pooling, queries, final_linear, head })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.final_linear.shape()[1]
    }

    pub fn pooling(&self) -> &PoolingConfig {
        &self.pooling
    }

    pub fn head(&self) -> &LossHead {
        &self.head
    }

    pub fn param_count(&self) -> usize {
        self.projection.numel() + self.queries.tensor().numel() + self.final_linear.numel() + self.head.weights().numel()
    }

    /// Replaces the margin hyperparameters (scale, kind, Inter-TopK) of the head.
    pub fn set_margin_params(&mut self, params: MarginParams) -> Result<()> {
        self.head = LossHead::new(self.head.weights().clone(), params)?;
        Ok(())
    }

    /// Keeps only the listed classifier rows, in the given order.
    pub fn retain_classes(&mut self, classes: &[usize]) -> Result<()> {
        let (c, k, d) = (self.head.classes(), self.head.subcenters(), self.head.dim());
        if let Some(bad) = classes.iter().find(|&&j| j >= c) {
            return Err(invalid!("class {bad} out of range (head has {c})"));
        }
        let w = self.head.weights().data();
        let data: Vec<f64> = classes.iter().flat_map(|&j| w[j * k * d..(j + 1) * k * d].iter().copied()).collect();
        let mut params = self.head.params();
        params.top_k = params.top_k.min(classes.len().saturating_sub(1)).max(1);
        self.head = LossHead::new(Tensor::new(vec![classes.len(), k, d], data)?, params)?;
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [self.projection.data(), self.queries.tensor().data(), self.final_linear.data(), self.head.weights().data()]
            .concat()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(shape_err!("expected {} parameters, got {}", self.param_count(), p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let mut rest = p;
        for dst in [
            self.projection.data_mut(),
            self.queries.data_mut(),
            self.final_linear.data_mut(),
            self.head.weights_mut(),
        ] {
            let (now, later) = rest.split_at(dst.len());
            dst.copy_from_slice(now);
            rest = later;
        }
        Ok(())
    }

    fn project(&self, frames: &Tensor) -> Result<Tensor> {
        let (t_len, d_in) = match *frames.shape() {
            [t, d] => (t, d),
            _ => return Err(shape_err!("frames must be [T, d_in], got {:?}", frames.shape())),
        };
        if d_in != self.input_dim() {
            return Err(shape_err!("frame dim {d_in} does not match model input dim {}", self.input_dim()));
        }
        let d = self.pooling.dim();
        let (x, p) = (frames.data(), self.projection.data());
        let mut o = vec![0.0; t_len * d];
        for t in 0..t_len {
            let orow = &mut o[t * d..(t + 1) * d];
            for (a, &xv) in x[t * d_in..(t + 1) * d_in].iter().enumerate() {
                orow.iter_mut().zip(&p[a * d..(a + 1) * d]).for_each(|(ov, pv)| *ov += xv * pv);
            }
        }
        Tensor::new(vec![t_len, d], o)
    }

    fn linear(&self, z: &[f64]) -> Vec<f64> {
        let e_dim = self.embedding_dim();
        let f = self.final_linear.data();
        let mut e = vec![0.0; e_dim];
        for (i, &zv) in z.iter().enumerate() {
            e.iter_mut().zip(&f[i * e_dim..(i + 1) * e_dim]).for_each(|(ev, fv)| *ev += zv * fv);
        }
        e
    }

    /// Utterance embedding (the input of the margin head).
    pub fn embed(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let o = self.project(frames)?;
        let pooled = mqmha_forward(&o, &self.queries, &self.pooling)?;
        Ok(self.linear(&pooled.concat()))
    }

    pub fn loss(&self, frames: &Tensor, label: usize, margin: f64) -> Result<f64> {
        let e = self.embed(frames)?;
        Ok(self.head.forward_backward(&e, label, margin)?.loss)
    }

    /// Loss and gradients for one utterance.
    pub fn loss_and_grad(&self, frames: &Tensor, label: usize, margin: f64) -> Result<(f64, ToyGrads)> {
        let o = self.project(frames)?;
        let pooled = mqmha_forward(&o, &self.queries, &self.pooling)?;
        let z = pooled.concat();
        let e = self.linear(&z);
        let lg = self.head.forward_backward(&e, label, margin)?;

        let e_dim = self.embedding_dim();
        let f = self.final_linear.data();
        let mut g_f = vec![0.0; f.len()];
        let mut g_z = vec![0.0; z.len()];
        for (i, &zv) in z.iter().enumerate() {
            let row = &f[i * e_dim..(i + 1) * e_dim];
            let grow = &mut g_f[i * e_dim..(i + 1) * e_dim];
            for j in 0..e_dim {
                grow[j] = zv * lg.grad_x[j];
                g_z[i] += row[j] * lg.grad_x[j];
            }
        }
        let half = z.len() / 2;
        let (g_o, g_mu) = mqmha_backward(&o, &self.queries, &self.pooling, &g_z[..half], &g_z[half..])?;

        let (d_in, d) = (self.input_dim(), self.pooling.dim());
        let (x, go) = (frames.data(), g_o.data());
        let mut g_p = vec![0.0; d_in * d];
        for t in 0..frames.shape()[0] {
            let gorow = &go[t * d..(t + 1) * d];
            for (a, &xv) in x[t * d_in..(t + 1) * d_in].iter().enumerate() {
                g_p[a * d..(a + 1) * d].iter_mut().zip(gorow).for_each(|(g, v)| *g += xv * v);
            }
        }
        Ok((
            lg.loss,
            ToyGrads { projection: g_p, queries: g_mu.into_data(), final_linear: g_f, head: lg.grad_weights.into_data() },
        ))
    }

    /// Mean loss and mean gradients over a batch, summed in batch order.
    pub fn batch_loss_and_grad(&self, batch: &[(Tensor, usize)], margin: f64) -> Result<(f64, ToyGrads)> {
        if batch.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let w = 1.0 / batch.len() as f64;
        let mut total = ToyGrads::zeros_like(self);
        let mut loss = 0.0;
        for (frames, label) in batch {
            let (l, g) = self.loss_and_grad(frames, *label, margin)?;
            loss += w * l;
            total.accumulate(&g, w);
        }
        Ok((loss, total))
    }
}

/// Reduce-on-plateau state. Lower metrics are better.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub bad_validations: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl PlateauState {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Self { best: None, bad_validations: 0, patience, factor, min_lr }
    }
}

/// Momentum buffers, learning rate and plateau state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau: PlateauState,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64, momentum: f64, weight_decay: f64, plateau: PlateauState) -> Self {
        Self { velocity: vec![0.0; n_params], lr: lr.max(plateau.min_lr), momentum, weight_decay, plateau }
    }

    pub fn from_config(n_params: usize, cfg: &TrainConfig) -> Self {
        let plateau = PlateauState::new(cfg.patience, cfg.plateau_factor, cfg.min_lr);
        let mut s = Self::new(n_params, cfg.lr, cfg.momentum, cfg.weight_decay, plateau);
        // a zero learning rate freezes the model, even below the floor
        s.lr = cfg.lr;
        s
    }
}

/// `v <- momentum v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(shape_err!(
            "parameter, gradient and momentum lengths differ: {}, {}, {}",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = state.momentum * *v + (g + state.weight_decay * *p);
        *p -= state.lr * *v;
    }
    Ok(())
}

/// Records one validation metric. An improvement resets the patience
/// counter; more than `patience` validations without improvement decay the
/// learning rate by `factor` (never below `min_lr`) and reset the counter.
/// Returns whether the rate was decayed.
pub fn plateau_step(state: &mut OptimState, metric: f64) -> bool {
    let pl = &mut state.plateau;
    if metric.is_finite() && pl.best.is_none_or(|b| metric < b) {
        pl.best = Some(metric);
        pl.bad_validations = 0;
        return false;
    }
    pl.bad_validations += 1;
    if pl.bad_validations > pl.patience {
        pl.bad_validations = 0;
        let next = (state.lr * pl.factor).max(pl.min_lr);
        let decayed = next < state.lr;
        state.lr = next.min(state.lr);
        return decayed;
    }
    false
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: f64,
    pub val_eer: Option<f64>,
    pub margin: f64,
    pub lr: f64,
}

/// `step,loss,val_eer`, with an empty EER field on steps without validation.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("step,loss,val_eer\n");
    for r in rows {
        let eer = r.val_eer.map(|e| e.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, eer));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub history: Vec<HistoryRow>,
    /// Class names of the model's head rows.
    pub classes: Vec<String>,
}

impl TrainOutcome {
    pub fn final_eer(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.val_eer)
    }
}

/// EER over all pairs of validation utterances, scored by embedding cosine.
pub fn validation_eer(model: &ToyModel, utts: &[SynthUtterance]) -> Result<f64> {
    let emb = utts.iter().map(|u| model.embed(&u.frames)).collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            scores.push(cosine_score(&emb[i], &emb[j])?);
            labels.push(utts[i].class == utts[j].class);
        }
    }
    Ok(compute_eer(&scores, &labels)?.0)
}

/// Trains a freshly initialized toy model on `corpus`.
pub fn train_toy(corpus: &SynthCorpus, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_from(None, corpus, cfg, seed)
}

/// Continues training `model` (or a fresh model when `None`). With
/// `drop_perturbed` set, speed-perturbed classes are removed from both the
/// corpus and the head before the first step. The head takes the margin
/// settings of `cfg`.
pub fn train_from(model: Option<ToyModel>, corpus: &SynthCorpus, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dropped;
    let corpus = if cfg.drop_perturbed {
        dropped = corpus.without_perturbed();
        &dropped
    } else {
        corpus
    };
    let input_dim = corpus.config().input_dim;
    let mut model = match model {
        Some(mut m) => {
            if cfg.drop_perturbed && m.head.classes() != corpus.classes() {
                let keep: Vec<usize> = (0..m.head.classes()).filter(|&c| c < corpus.classes()).collect();
                m.retain_classes(&keep)?;
            }
            if m.head.classes() != corpus.classes() {
                return Err(shape_err!("model has {} classes, corpus has {}", m.head.classes(), corpus.classes()));
            }
            let mut params = cfg.loss;
            params.top_k = params.top_k.min(corpus.classes() - 1);
            m.set_margin_params(params)?;
            m
        }
        None => {
            let mut mcfg = ToyModelConfig::from_train(cfg, input_dim, corpus.classes());
            mcfg.margin.top_k = mcfg.margin.top_k.min(corpus.classes() - 1);
            ToyModel::random(&mcfg, &mut rng)?
        }
    };
    let mut params = model.flat_params();
    let mut state = OptimState::from_config(params.len(), cfg);
    let train = corpus.train();
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let margin = cfg.margin.value(step);
        let idx: Vec<usize> = if cfg.batch_size >= train.len() {
            (0..train.len()).collect()
        } else {
            (0..cfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect()
        };
        let batch = idx
            .iter()
            .map(|&i| {
                let u = &train[i];
                let t_len = u.frames.shape()[0];
                let len = cfg.frames.min(t_len);
                let start = rng.gen_range(0..=t_len - len);
                let d = input_dim;
                let crop = Tensor::new(vec![len, d], u.frames.data()[start * d..(start + len) * d].to_vec())?;
                Ok((crop, u.class))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = model.batch_loss_and_grad(&batch, margin)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at step {step}")));
        }
        let lr = state.lr;
        sgd_step(&mut params, &grads.flatten(), &mut state)?;
        model.set_flat_params(&params).map_err(|_| Error::NonFinite(format!("parameters diverged at step {step}")))?;
        let val_eer = if (step + 1) % cfg.validate_every == 0 || step + 1 == cfg.steps {
            let eer = validation_eer(&model, corpus.validation())?;
            plateau_step(&mut state, eer);
            Some(eer)
        } else {
            None
        };
        history.push(HistoryRow { step, loss, val_eer, margin, lr });
    }
    Ok(TrainOutcome { model, history, classes: corpus.class_names().to_vec() })
}

/// Base training followed by large-margin fine-tuning of the same model.
pub fn train_two_stage(
    corpus: &SynthCorpus,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    seed: u64,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let first = train_toy(corpus, stage1, seed)?;
    let second = train_from(Some(first.model.clone()), corpus, stage2, seed.wrapping_add(1))?;
    Ok((first, second))
}
