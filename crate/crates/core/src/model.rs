//! Full speaker-embedding network: RepVGG backbone, MQMHA pooling and an
//! affine embedding layer, with (de)serialization to the parameter file.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::modelfile::ParamFile;
use crate::pooling::{mqmha_forward, PoolingConfig, QueryBank};
use crate::repvgg::{Backbone, BackboneConfig, Block, Mode, RepVggBlockDeploy, RepVggBlockTrain};
use crate::tensor::{BatchNormParams, Tensor};

/// Architecture description, also readable from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Stage list in `blocks:channels:stride[:groups]` form, comma separated.
    pub stages: String,
    pub heads: usize,
    pub queries: usize,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_mels: 81, stages: "1:8:2,2:16:2".into(), heads: 16, queries: 4, embedding_dim: 512 }
    }
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("config line {}: cannot parse `{v}`", n + 1)));
            match k {
                "n_mels" => cfg.n_mels = num(v)?,
                "stages" => cfg.stages = v.to_string(),
                "heads" => cfg.heads = num(v)?,
                "queries" => cfg.queries = num(v)?,
                "embedding_dim" => cfg.embedding_dim = num(v)?,
                _ => return Err(Error::Format(format!("config line {}: unknown key `{k}`", n + 1))),
            }
        }
        Ok(cfg)
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        BackboneConfig::new(1, BackboneConfig::parse_stages(&self.stages)?)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_mels = {}", self.n_mels)?;
        writeln!(f, "stages = {}", self.stages)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "queries = {}", self.queries)?;
        writeln!(f, "embedding_dim = {}", self.embedding_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel {
    n_mels: usize,
    backbone: Backbone,
    pooling: PoolingConfig,
    queries: QueryBank,
    embedding: Tensor,
    embedding_bias: Vec<f64>,
}

impl SpeakerModel {
    pub fn new(
        n_mels: usize,
        backbone: Backbone,
        queries: QueryBank,
        pooling: PoolingConfig,
        embedding: Tensor,
        embedding_bias: Vec<f64>,
    ) -> Result<Self> {
        if backbone.in_channels() != 1 {
            return Err(shape_err!("backbone must take one input channel, takes {}", backbone.in_channels()));
        }
        let d = backbone.output_dim(n_mels);
        if pooling.dim() != d {
            return Err(shape_err!("pooling dim {} does not match backbone output dim {d}", pooling.dim()));
        }
        match *embedding.shape() {
            [i, o] if i == pooling.output_dim() && o == embedding_bias.len() => {}
            _ => {
                return Err(shape_err!(
                    "embedding layer must be [{}, d_emb] with a d_emb bias, got {:?} and {}",
                    pooling.output_dim(),
                    embedding.shape(),
                    embedding_bias.len()
                ))
            }
        }
        Ok(Self { n_mels, backbone, pooling, queries, embedding, embedding_bias })
    }

    /// Seeded random training-mode model.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::random(&cfg.backbone()?, &mut rng)?;
        let d = backbone.output_dim(cfg.n_mels);
        let pooling = PoolingConfig::new(d, cfg.heads, cfg.queries)
            .map_err(|e| invalid!("backbone output dim {d} with {} heads: {e}", cfg.heads))?;
        let queries = QueryBank::random(&pooling, &mut rng);
        let b = 1.0 / (pooling.output_dim() as f64).sqrt();
        let embedding = Tensor::from_fn(vec![pooling.output_dim(), cfg.embedding_dim], |_| rng.gen_range(-b..b))?;
        let bias = (0..cfg.embedding_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self::new(cfg.n_mels, backbone, queries, pooling, embedding, bias)
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_bias.len()
    }

    pub fn mode(&self) -> Mode {
        if self.backbone.is_deploy() {
            Mode::Deploy
        } else {
            Mode::Train
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.queries.tensor().numel() + self.embedding.numel() + self.embedding_bias.len()
    }

    /// The same network with every backbone block re-parameterized.
    pub fn fuse(&self) -> Result<Self> {
        Ok(Self { backbone: self.backbone.reparameterize()?, ..self.clone() })
    }

    /// Raw (unnormalized) embedding of a `[T, n_mels]` feature matrix.
    pub fn embed(&self, features: &Tensor) -> Result<Vec<f64>> {
        let (t_len, f) = match *features.shape() {
            [t, f] => (t, f),
            _ => return Err(shape_err!("features must be [T, n_mels], got {:?}", features.shape())),
        };
        if f != self.n_mels {
            return Err(shape_err!("feature dim {f} does not match model n_mels {}", self.n_mels));
        }
        let src = features.data();
        let map = Tensor::from_fn(vec![1, f, t_len], |i| {
            let (fi, ti) = (i / t_len, i % t_len);
            src[ti * f + fi]
        })?;
        let frames = self.backbone.forward(&map)?;
        let z = mqmha_forward(&frames, &self.queries, &self.pooling)?.concat();
        let e_dim = self.embedding_dim();
        let w = self.embedding.data();
        let mut e = self.embedding_bias.clone();
        for (i, &zv) in z.iter().enumerate() {
            e.iter_mut().zip(&w[i * e_dim..(i + 1) * e_dim]).for_each(|(ev, wv)| *ev += zv * wv);
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(e)
    }

    /// All parameters rounded to single precision, as stored on disk.
    pub fn to_single_precision(&self) -> Result<Self> {
        Self::from_params(&self.to_params()?.to_single_precision())
    }

    pub fn to_params(&self) -> Result<ParamFile> {
        let mut p = ParamFile::new();
        p.push_scalar("mode", if self.mode() == Mode::Deploy { 1.0 } else { 0.0 });
        p.push_scalar("n_mels", self.n_mels as f64);
        p.push_scalar("blocks", self.backbone.blocks().len() as f64);
        for (i, b) in self.backbone.blocks().iter().enumerate() {
            let pre = format!("block{i}");
            p.push_scalar(format!("{pre}.stride"), b.stride() as f64);
            match b {
                Block::Train(t) => {
                    p.push_scalar(format!("{pre}.groups"), t.groups() as f64);
                    p.push(format!("{pre}.conv3"), t.conv3().clone());
                    push_bn(&mut p, &format!("{pre}.bn3"), t.bn3())?;
                    p.push(format!("{pre}.conv1"), t.conv1().clone());
                    push_bn(&mut p, &format!("{pre}.bn1"), t.bn1())?;
                    if let Some(bn) = t.id_bn() {
                        push_bn(&mut p, &format!("{pre}.id_bn"), bn)?;
                    }
                }
                Block::Deploy(d) => {
                    p.push_scalar(format!("{pre}.groups"), d.groups() as f64);
                    p.push(format!("{pre}.weight"), d.weight().clone());
                    p.push_vec(format!("{pre}.bias"), d.bias())?;
                }
            }
        }
        p.push("pooling.queries", self.queries.tensor().clone());
        p.push("embedding.weight", self.embedding.clone());
        p.push_vec("embedding.bias", &self.embedding_bias)?;
        Ok(p)
    }

    pub fn from_params(p: &ParamFile) -> Result<Self> {
        let mode = match p.count("mode")? {
            0 => Mode::Train,
            1 => Mode::Deploy,
            m => return Err(Error::Format(format!("unknown mode {m}"))),
        };
        let n_mels = p.count("n_mels")?;
        let mut blocks = Vec::new();
        for i in 0..p.count("blocks")? {
            let pre = format!("block{i}");
            let stride = p.count(&format!("{pre}.stride"))?;
            let groups = p.count(&format!("{pre}.groups"))?;
            let block = match mode {
                Mode::Train => {
                    let id_name = format!("{pre}.id_bn");
                    let id_bn = if p.contains(&format!("{id_name}.gamma")) { Some(read_bn(p, &id_name)?) } else { None };
                    Block::Train(RepVggBlockTrain::new(
                        p.get(&format!("{pre}.conv3"))?.clone(),
                        read_bn(p, &format!("{pre}.bn3"))?,
                        p.get(&format!("{pre}.conv1"))?.clone(),
                        read_bn(p, &format!("{pre}.bn1"))?,
                        id_bn,
                        stride,
                        groups,
                    )?)
                }
                Mode::Deploy => Block::Deploy(RepVggBlockDeploy::new(
                    p.get(&format!("{pre}.weight"))?.clone(),
                    p.get(&format!("{pre}.bias"))?.data().to_vec(),
                    stride,
                    groups,
                )?),
            };
            blocks.push(block);
        }
        let backbone = Backbone::from_blocks(blocks)?;
        let mu = p.get("pooling.queries")?.clone();
        let (heads, queries) = match *mu.shape() {
            [h, q, _] => (h, q),
            _ => return Err(Error::Format(format!("pooling.queries must be [H, Q, d/H], got {:?}", mu.shape()))),
        };
        let pooling = PoolingConfig::new(backbone.output_dim(n_mels), heads, queries)?;
        let bank = QueryBank::new(mu, &pooling)?;
        let embedding = p.get("embedding.weight")?.clone();
        let bias = p.get("embedding.bias")?.data().to_vec();
        Self::new(n_mels, backbone, bank, pooling, embedding, bias)
    }
}

fn push_bn(p: &mut ParamFile, pre: &str, bn: &BatchNormParams) -> Result<()> {
    p.push_vec(format!("{pre}.gamma"), &bn.gamma)?;
    p.push_vec(format!("{pre}.beta"), &bn.beta)?;
    p.push_vec(format!("{pre}.mean"), &bn.mean)?;
    p.push_vec(format!("{pre}.var"), &bn.var)?;
    p.push_scalar(format!("{pre}.eps"), bn.eps);
    Ok(())
}

fn read_bn(p: &ParamFile, pre: &str) -> Result<BatchNormParams> {
    let v = |k: &str| p.get(&format!("{pre}.{k}")).map(|t| t.data().to_vec());
    BatchNormParams::new(v("gamma")?, v("beta")?, v("mean")?, v("var")?, p.scalar(&format!("{pre}.eps"))?)
}

/// Largest absolute embedding difference between two models over `probes`
/// random `[frames, n_mels]` inputs drawn from `seed`.
pub fn max_probe_deviation(a: &SpeakerModel, b: &SpeakerModel, probes: usize, frames: usize, seed: u64) -> Result<f64> {
    if a.n_mels() != b.n_mels() {
        return Err(shape_err!("models disagree on n_mels: {} vs {}", a.n_mels(), b.n_mels()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = Tensor::from_fn(vec![frames, a.n_mels()], |_| rng.gen_range(-1.0..1.0))?;
        let (ea, eb) = (a.embed(&x)?, b.embed(&x)?);
        worst = ea.iter().zip(&eb).fold(worst, |m, (p, q)| m.max((p - q).abs()));
    }
    Ok(worst)
}
