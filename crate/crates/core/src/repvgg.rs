//! RepVGG blocks and their structural re-parameterization.
//!
//! A training-time block sums three branches, each followed by batch
//! normalization:
//!
//! * a 3x3 convolution (padding 1),
//! * a 1x1 convolution (padding 0),
//! * an identity branch (batch norm only), present when the block keeps its
//!   channel count and uses stride 1.
//!
//! Because inference-mode batch norm is affine, every branch can be folded into
//! a biased 3x3 kernel, and the three kernels then add filter-wise into one.
//! [`reparameterize_block`] performs that fold; the resulting
//! [`RepVggBlockDeploy`] computes the same function as the training block.
//!
//! Branch convolutions carry no bias. Biases only appear after fusion.

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{batchnorm_inference, conv2d, relu, BatchNormParams, Conv2dParams, Tensor};

/// Folds inference-mode batch norm into the preceding convolution.
///
/// Returns `(weight', bias')` with
/// `weight'[o] = weight[o] * gamma[o] / sqrt(var[o] + eps)` and
/// `bias'[o] = beta[o] + (bias[o] - mean[o]) * gamma[o] / sqrt(var[o] + eps)`,
/// where a missing bias counts as zero.
pub fn fuse_conv_bn(weight: &Tensor, bias: Option<&[f64]>, bn: &BatchNormParams) -> Result<(Tensor, Vec<f64>)> {
    if weight.rank() != 4 {
        return Err(shape_err!("conv weight must be rank 4, got {:?}", weight.shape()));
    }
    let c_out = weight.shape()[0];
    if bn.channels() != c_out {
        return Err(shape_err!("C_out: weight has {c_out} filters but batch-norm has {}", bn.channels()));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(shape_err!("C_out: bias has length {} but weight has {c_out} filters", b.len()));
        }
    }
    let per_filter = weight.numel() / c_out;
    let scale = bn.scale_factors();
    let mut w = weight.data().to_vec();
    for (o, filter) in w.chunks_mut(per_filter).enumerate() {
        filter.iter_mut().for_each(|v| *v *= scale[o]);
    }
    let b = (0..c_out)
        .map(|o| bn.beta[o] + (bias.map_or(0.0, |b| b[o]) - bn.mean[o]) * scale[o])
        .collect();
    Ok((Tensor::new(weight.shape().to_vec(), w)?, b))
}

/// Embeds a 1x1 kernel at the centre of an otherwise zero 3x3 kernel.
pub fn pad_1x1_to_3x3(weight: &Tensor) -> Result<Tensor> {
    match *weight.shape() {
        [c_out, c_in, 1, 1] => {
            let mut out = vec![0.0; c_out * c_in * 9];
            for (i, &v) in weight.data().iter().enumerate() {
                out[i * 9 + 4] = v;
            }
            Tensor::new(vec![c_out, c_in, 3, 3], out)
        }
        _ => Err(shape_err!("expected a [C_out, C_in, 1, 1] kernel, got {:?}", weight.shape())),
    }
}

/// Dirac 3x3 kernel for a grouped identity map: with padding 1 and stride 1 the
/// convolution returns its input unchanged.
pub fn identity_to_3x3(channels: usize, groups: usize) -> Result<Tensor> {
    if groups == 0 || channels == 0 || !channels.is_multiple_of(groups) {
        return Err(invalid!("channels = {channels} is not divisible by groups = {groups}"));
    }
    let per_group = channels / groups;
    let mut out = vec![0.0; channels * per_group * 9];
    for o in 0..channels {
        let slot = o % per_group;
        out[(o * per_group + slot) * 9 + 4] = 1.0;
    }
    Tensor::new(vec![channels, per_group, 3, 3], out)
}

/// Training-time RepVGG block.
#[derive(Debug, Clone, PartialEq)]
pub struct RepVggBlockTrain {
    conv3: Conv2dParams,
    bn3: BatchNormParams,
    conv1: Conv2dParams,
    bn1: BatchNormParams,
    id_bn: Option<BatchNormParams>,
    stride: usize,
    groups: usize,
}

impl RepVggBlockTrain {
    /// `conv3` is `[C_out, C_in/groups, 3, 3]`, `conv1` is `[C_out, C_in/groups, 1, 1]`.
    /// `id_bn` must be given exactly when `C_in == C_out` and `stride == 1`.
    pub fn new(
        conv3: Tensor,
        bn3: BatchNormParams,
        conv1: Tensor,
        bn1: BatchNormParams,
        id_bn: Option<BatchNormParams>,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        match (conv3.shape(), conv1.shape()) {
            ([o3, i3, 3, 3], [o1, i1, 1, 1]) if o3 == o1 && i3 == i1 => {}
            (s3, s1) => {
                return Err(shape_err!(
                    "branch kernels must be [C_out, C_in/g, 3, 3] and [C_out, C_in/g, 1, 1] with equal channels, got {s3:?} and {s1:?}"
                ))
            }
        }
        let conv3 = Conv2dParams::new(conv3, None, (stride, stride), (1, 1), groups, (1, 1))?;
        let conv1 = Conv2dParams::new(conv1, None, (stride, stride), (0, 0), groups, (1, 1))?;
        let c_out = conv3.out_channels();
        let c_in = conv3.in_channels();
        for (name, bn) in [("bn3", &bn3), ("bn1", &bn1)] {
            if bn.channels() != c_out {
                return Err(shape_err!("C_out: {name} has {} channels, block has {c_out}", bn.channels()));
            }
        }
        let wants_identity = c_in == c_out && stride == 1;
        match (&id_bn, wants_identity) {
            (Some(bn), true) if bn.channels() != c_out => {
                return Err(shape_err!("C_out: identity batch-norm has {} channels, block has {c_out}", bn.channels()))
            }
            (Some(_), false) => {
                return Err(invalid!(
                    "identity branch requires C_in == C_out and stride 1 (C_in = {c_in}, C_out = {c_out}, stride = {stride})"
                ))
            }
            (None, true) => return Err(invalid!("identity branch is required when C_in == C_out and stride is 1")),
            _ => {}
        }
        Ok(Self { conv3, bn3, conv1, bn1, id_bn, stride, groups })
    }

    /// A block with seeded random kernels and batch-norm statistics.
    pub fn random(in_channels: usize, out_channels: usize, stride: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(invalid!(
                "channels ({in_channels} -> {out_channels}) must be divisible by groups = {groups}"
            ));
        }
        let per_group = in_channels / groups;
        let bound = 1.0 / ((per_group * 9) as f64).sqrt();
        let mut kernel = |k: usize| {
            Tensor::from_fn(vec![out_channels, per_group, k, k], |_| rng.gen_range(-bound..bound))
        };
        let conv3 = kernel(3)?;
        let conv1 = kernel(1)?;
        let mut bn = |c: usize| {
            let mut v = |lo: f64, hi: f64| (0..c).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
            BatchNormParams::new(v(0.5, 1.5), v(-0.5, 0.5), v(-0.5, 0.5), v(0.5, 1.5), 1e-5)
        };
        let bn3 = bn(out_channels)?;
        let bn1 = bn(out_channels)?;
        let id_bn = if in_channels == out_channels && stride == 1 { Some(bn(out_channels)?) } else { None };
        Self::new(conv3, bn3, conv1, bn1, id_bn, stride, groups)
    }

    /// Views a fused block as a training block whose only live branch is the
    /// 3x3 one (identity batch norm carrying the bias). The 1x1 kernel is zero
    /// and the identity branch, when its presence is required, has `gamma = 0`.
    pub fn from_deploy(block: &RepVggBlockDeploy) -> Result<Self> {
        let c_out = block.conv.out_channels();
        let c_in = block.conv.in_channels();
        let weight = block.conv.weight().clone();
        let per_group = weight.shape()[1];
        let bias = block.conv.bias().expect("deploy block always carries a bias").to_vec();
        let bn3 = BatchNormParams::new(vec![1.0; c_out], bias, vec![0.0; c_out], vec![1.0; c_out], 0.0)?;
        let conv1 = Tensor::zeros(vec![c_out, per_group, 1, 1])?;
        let bn1 = BatchNormParams::identity(c_out);
        let id_bn = (c_in == c_out && block.stride == 1).then(|| BatchNormParams {
            gamma: vec![0.0; c_out],
            ..BatchNormParams::identity(c_out)
        });
        Self::new(weight, bn3, conv1, bn1, id_bn, block.stride, block.groups)
    }

    pub fn in_channels(&self) -> usize {
        self.conv3.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn conv3(&self) -> &Tensor {
        self.conv3.weight()
    }

    pub fn conv1(&self) -> &Tensor {
        self.conv1.weight()
    }

    pub fn bn3(&self) -> &BatchNormParams {
        &self.bn3
    }

    pub fn bn1(&self) -> &BatchNormParams {
        &self.bn1
    }

    pub fn id_bn(&self) -> Option<&BatchNormParams> {
        self.id_bn.as_ref()
    }

    pub fn param_count(&self) -> usize {
        let bn = 4 * self.out_channels();
        self.conv3.weight().numel() + self.conv1.weight().numel() + 2 * bn + self.id_bn.as_ref().map_or(0, |_| bn)
    }

    /// `ReLU(bn3(conv3(x)) + bn1(conv1(x)) + id_bn(x))`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut sum = batchnorm_inference(&conv2d(x, &self.conv3)?, &self.bn3)?;
        sum = sum.add(&batchnorm_inference(&conv2d(x, &self.conv1)?, &self.bn1)?)?;
        if let Some(bn) = &self.id_bn {
            sum = sum.add(&batchnorm_inference(x, bn)?)?;
        }
        Ok(relu(&sum))
    }
}

/// Inference-time block: one biased 3x3 convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct RepVggBlockDeploy {
    conv: Conv2dParams,
    stride: usize,
    groups: usize,
}

impl RepVggBlockDeploy {
    pub fn new(weight: Tensor, bias: Vec<f64>, stride: usize, groups: usize) -> Result<Self> {
        if !matches!(weight.shape(), [_, _, 3, 3]) {
            return Err(shape_err!("deploy kernel must be [C_out, C_in/g, 3, 3], got {:?}", weight.shape()));
        }
        let conv = Conv2dParams::new(weight, Some(bias), (stride, stride), (1, 1), groups, (1, 1))?;
        Ok(Self { conv, stride, groups })
    }

    pub fn conv(&self) -> &Conv2dParams {
        &self.conv
    }

    pub fn weight(&self) -> &Tensor {
        self.conv.weight()
    }

    pub fn bias(&self) -> &[f64] {
        self.conv.bias().expect("deploy block always carries a bias")
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight().numel() + self.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu(&conv2d(x, &self.conv)?))
    }

    /// Same block with every parameter rounded to `f32`.
    pub fn to_single_precision(&self) -> Result<Self> {
        let bias = self.bias().iter().map(|&b| b as f32 as f64).collect();
        Self::new(self.weight().to_single_precision(), bias, self.stride, self.groups)
    }
}

/// Folds the three branches of a training block into one biased 3x3 kernel.
pub fn reparameterize_block(block: &RepVggBlockTrain) -> Result<RepVggBlockDeploy> {
    let (k3, b3) = fuse_conv_bn(block.conv3.weight(), None, &block.bn3)?;
    let (k1, b1) = fuse_conv_bn(block.conv1.weight(), None, &block.bn1)?;
    let mut kernel = k3.add(&pad_1x1_to_3x3(&k1)?)?;
    let mut bias: Vec<f64> = b3.iter().zip(&b1).map(|(a, b)| a + b).collect();
    if let Some(bn) = &block.id_bn {
        let dirac = identity_to_3x3(block.out_channels(), block.groups)?;
        let (kid, bid) = fuse_conv_bn(&dirac, None, bn)?;
        kernel = kernel.add(&kid)?;
        bias.iter_mut().zip(&bid).for_each(|(a, b)| *a += b);
    }
    RepVggBlockDeploy::new(kernel, bias, block.stride, block.groups)
}

/// Which forward path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Deploy,
}

/// A block in either of its two states.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Block {
    Train(RepVggBlockTrain),
    Deploy(RepVggBlockDeploy),
}

impl Block {
    pub fn mode(&self) -> Mode {
        match self {
            Block::Train(_) => Mode::Train,
            Block::Deploy(_) => Mode::Deploy,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Block::Train(b) => b.in_channels(),
            Block::Deploy(b) => b.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Train(b) => b.out_channels(),
            Block::Deploy(b) => b.out_channels(),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Block::Train(b) => b.stride(),
            Block::Deploy(b) => b.stride(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Train(b) => b.param_count(),
            Block::Deploy(b) => b.param_count(),
        }
    }

    /// Fused form of this block. Deploy blocks are returned unchanged.
    pub fn reparameterize(&self) -> Result<Block> {
        match self {
            Block::Train(b) => Ok(Block::Deploy(reparameterize_block(b)?)),
            Block::Deploy(b) => Ok(Block::Deploy(b.clone())),
        }
    }
}

/// Runs `block` on a `[C, H, W]` map in the requested mode. Asking for the
/// deploy path of an unfused block (or the train path of a fused one) is an
/// error.
pub fn block_forward(block: &Block, x: &Tensor, mode: Mode) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[0] != block.in_channels() {
        return Err(shape_err!(
            "channels: block expects [{}, H, W] input, got {:?}",
            block.in_channels(),
            x.shape()
        ));
    }
    match (block, mode) {
        (Block::Train(b), Mode::Train) => b.forward(x),
        (Block::Deploy(b), Mode::Deploy) => b.forward(x),
        (Block::Train(_), Mode::Deploy) => {
            Err(invalid!("deploy mode requested on an unfused block; call reparameterize first"))
        }
        (Block::Deploy(_), Mode::Train) => {
            Err(invalid!("train mode requested on a fused block; the training branches no longer exist"))
        }
    }
}

/// One stage of the backbone: `num_blocks` blocks of width `channels`, the
/// first of which uses `first_stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub first_stride: usize,
    pub groups: usize,
}

/// Explicit stage layout of a RepVGG backbone over a single-channel
/// spectrogram.
///
/// Named variants are not hardcoded. For reference, the widths used by the
/// original RepVGG family scale a `[64, 128, 256, 512]` ladder; with 64 base
/// channels a B1-like layout is
///
/// ```text
/// stages = 1:64:1, 4:128:2, 6:256:2, 16:512:2, 1:1024:2
/// ```
///
/// while desk-scale experiments use a handful of narrow blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    pub fn new(input_channels: usize, stages: Vec<StageConfig>) -> Result<Self> {
        if input_channels == 0 {
            return Err(invalid!("input_channels must be positive"));
        }
        if stages.is_empty() {
            return Err(invalid!("backbone needs at least one stage"));
        }
        let mut prev = input_channels;
        for (i, s) in stages.iter().enumerate() {
            if s.num_blocks == 0 || s.channels == 0 || s.first_stride == 0 || s.groups == 0 {
                return Err(invalid!("stage {i}: blocks, channels, stride and groups must be positive"));
            }
            if s.channels % s.groups != 0 || !prev.is_multiple_of(s.groups) {
                return Err(invalid!(
                    "stage {i}: channels {prev} -> {} not divisible by groups = {}",
                    s.channels,
                    s.groups
                ));
            }
            prev = s.channels;
        }
        Ok(Self { input_channels, stages })
    }

    /// Channels of the first stage.
    pub fn base_channels(&self) -> usize {
        self.stages[0].channels
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.channels)
    }

    /// Product of the stage strides.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.first_stride).product()
    }

    /// Parses `num_blocks:channels:stride[:groups]` entries separated by commas.
    pub fn parse_stages(text: &str) -> Result<Vec<StageConfig>> {
        text.split(',')
            .map(|entry| {
                let parts: Vec<&str> = entry.trim().split(':').collect();
                let num = |i: usize| -> Result<usize> {
                    parts[i]
                        .trim()
                        .parse()
                        .map_err(|_| invalid!("bad stage entry `{}`", entry.trim()))
                };
                match parts.len() {
                    3 | 4 => Ok(StageConfig {
                        num_blocks: num(0)?,
                        channels: num(1)?,
                        first_stride: num(2)?,
                        groups: if parts.len() == 4 { num(3)? } else { 1 },
                    }),
                    _ => Err(invalid!(
                        "stage entry `{}` must be num_blocks:channels:stride[:groups]",
                        entry.trim()
                    )),
                }
            })
            .collect()
    }
}

/// A stack of RepVGG blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid!("backbone needs at least one block"));
        }
        for (i, pair) in blocks.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(shape_err!(
                    "channels: block {i} emits {} but block {} expects {}",
                    pair[0].out_channels(),
                    i + 1,
                    pair[1].in_channels()
                ));
            }
        }
        Ok(Self { blocks })
    }

    /// Seeded random training-time backbone.
    pub fn random(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut prev = config.input_channels;
        for s in &config.stages {
            for b in 0..s.num_blocks {
                let stride = if b == 0 { s.first_stride } else { 1 };
                blocks.push(Block::Train(RepVggBlockTrain::random(prev, s.channels, stride, s.groups, rng)?));
                prev = s.channels;
            }
        }
        Self::from_blocks(blocks)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().expect("nonempty").out_channels()
    }

    pub fn is_deploy(&self) -> bool {
        self.blocks.iter().all(|b| b.mode() == Mode::Deploy)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    pub fn reparameterize(&self) -> Result<Self> {
        Ok(Self { blocks: self.blocks.iter().map(Block::reparameterize).collect::<Result<_>>()? })
    }

    /// Frequency extent after the backbone for an input with `freq` bins.
    pub fn output_freq(&self, freq: usize) -> usize {
        self.blocks.iter().fold(freq, |f, b| f.div_ceil(b.stride()))
    }

    /// Feature dimension `C * F'` of each output frame.
    pub fn output_dim(&self, freq: usize) -> usize {
        self.out_channels() * self.output_freq(freq)
    }

    /// Runs every block in its own mode on a `[C_in, F, T]` map and flattens
    /// the final `[C, F', T']` map to `[T', C * F']` (index `c * F' + f`).
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (f, t) = match *features.shape() {
            [c, f, t] if c == self.in_channels() => (f, t),
            _ => {
                return Err(shape_err!(
                    "channels: backbone expects [{}, F, T] features, got {:?}",
                    self.in_channels(),
                    features.shape()
                ))
            }
        };
        let (mut ef, mut et) = (f, t);
        for (i, b) in self.blocks.iter().enumerate() {
            ef = ef.div_ceil(b.stride());
            et = et.div_ceil(b.stride());
            if ef == 0 || et == 0 {
                return Err(Error::Shape(format!("block {i} produces a zero-extent map from {f}x{t} input")));
            }
        }
        let mut x = features.clone();
        for b in &self.blocks {
            x = block_forward(b, &x, b.mode())?;
        }
        flatten_frames(&x)
    }
}

/// Convenience wrapper: `backbone.forward(features)`.
pub fn backbone_forward(backbone: &Backbone, features: &Tensor) -> Result<Tensor> {
    backbone.forward(features)
}

/// `[C, F, T]` to `[T, C * F]`.
pub fn flatten_frames(map: &Tensor) -> Result<Tensor> {
    let (c, f, t) = match *map.shape() {
        [c, f, t] => (c, f, t),
        _ => return Err(shape_err!("expected a [C, F, T] map, got {:?}", map.shape())),
    };
    let d = c * f;
    let src = map.data();
    let mut out = vec![0.0; t * d];
    for ci in 0..c {
        for fi in 0..f {
            let row = &src[(ci * f + fi) * t..(ci * f + fi + 1) * t];
            for (ti, &v) in row.iter().enumerate() {
                out[ti * d + ci * f + fi] = v;
            }
        }
    }
    Tensor::new(vec![t, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn rel_dev(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
    }

    #[test]
    fn fuse_with_identity_bn_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let bias = vec![0.1, 0.2, 0.3];
        let (w2, b2) = fuse_conv_bn(&w, Some(&bias), &BatchNormParams::identity(3)).unwrap();
        assert_eq!(w2, w);
        assert_eq!(b2, bias);
    }

    #[test]
    fn fuse_closed_form() {
        let w = Tensor::zeros(vec![1, 1, 3, 3]).unwrap();
        let bn = BatchNormParams::new(vec![2.0], vec![3.0], vec![5.0], vec![4.0], 0.0).unwrap();
        let (w2, b2) = fuse_conv_bn(&w, None, &bn).unwrap();
        assert!(w2.data().iter().all(|&v| v == 0.0));
        assert_eq!(b2, vec![-2.0]);
    }

    #[test]
    fn fuse_matches_conv_then_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::from_fn(vec![4, 2, 3, 3], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut v = |lo: f64, hi: f64| (0..4).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
        let bn = BatchNormParams::new(v(0.5, 2.0), v(-1.0, 1.0), v(-1.0, 1.0), v(0.2, 2.0), 1e-5).unwrap();
        let (fw, fb) = fuse_conv_bn(&w, Some(&bias), &bn).unwrap();
        let orig = Conv2dParams::simple(w, Some(bias), 1).unwrap();
        let fused = Conv2dParams::simple(fw, Some(fb), 1).unwrap();
        for _ in 0..50 {
            let x = rand_map(&mut rng, 2, 5, 6);
            let reference = batchnorm_inference(&conv2d(&x, &orig).unwrap(), &bn).unwrap();
            assert!(rel_dev(&conv2d(&x, &fused).unwrap(), &reference) <= 1e-10);
        }
    }

    #[test]
    fn fuse_rejects_length_mismatch() {
        let w = Tensor::zeros(vec![2, 1, 3, 3]).unwrap();
        assert!(fuse_conv_bn(&w, None, &BatchNormParams::identity(3)).is_err());
    }

    #[test]
    fn pad_places_value_at_centre() {
        let k = pad_1x1_to_3x3(&Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap()).unwrap();
        let mut expect = vec![0.0; 9];
        expect[4] = 0.7;
        assert_eq!(k.data(), expect.as_slice());
        let z = pad_1x1_to_3x3(&Tensor::zeros(vec![2, 2, 1, 1]).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(pad_1x1_to_3x3(&Tensor::zeros(vec![1, 1, 3, 3]).unwrap()).is_err());
    }

    #[test]
    fn padded_kernel_matches_1x1_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::from_fn(vec![3, 2, 1, 1], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let p1 = Conv2dParams::simple(w.clone(), None, 0).unwrap();
        let p3 = Conv2dParams::simple(pad_1x1_to_3x3(&w).unwrap(), None, 1).unwrap();
        for _ in 0..20 {
            let x = rand_map(&mut rng, 2, 4, 5);
            let d = conv2d(&x, &p1).unwrap().max_abs_diff(&conv2d(&x, &p3).unwrap()).unwrap();
            assert!(d <= 1e-12);
        }
    }

    #[test]
    fn identity_kernel_definition() {
        let k = identity_to_3x3(2, 1).unwrap();
        assert_eq!(k.shape(), &[2, 2, 3, 3]);
        for o in 0..2 {
            for i in 0..2 {
                for s in 0..9 {
                    let v = k.data()[(o * 2 + i) * 9 + s];
                    assert_eq!(v, if o == i && s == 4 { 1.0 } else { 0.0 });
                }
            }
        }
        let dw = identity_to_3x3(2, 2).unwrap();
        assert_eq!(dw.shape(), &[2, 1, 3, 3]);
        assert_eq!(dw.data().iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(dw.data()[4], 1.0);
        assert_eq!(dw.data()[9 + 4], 1.0);
        assert!(identity_to_3x3(3, 2).is_err());
    }

    #[test]
    fn identity_kernel_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for c in [2, 4] {
            for g in [1, 2, c] {
                let p = Conv2dParams::new(identity_to_3x3(c, g).unwrap(), None, (1, 1), (1, 1), g, (1, 1)).unwrap();
                let x = rand_map(&mut rng, c, 5, 4);
                assert_eq!(conv2d(&x, &p).unwrap(), x);
            }
        }
    }

    #[test]
    fn single_branch_block_fuses_to_conv3() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w3 = Tensor::from_fn(vec![4, 2, 3, 3], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let block = RepVggBlockTrain::new(
            w3.clone(),
            BatchNormParams::identity(4),
            Tensor::zeros(vec![4, 2, 1, 1]).unwrap(),
            BatchNormParams::identity(4),
            None,
            1,
            1,
        )
        .unwrap();
        let d = reparameterize_block(&block).unwrap();
        assert_eq!(d.weight(), &w3);
        assert!(d.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn identity_branch_presence_is_enforced() {
        let w3 = Tensor::zeros(vec![2, 2, 3, 3]).unwrap();
        let w1 = Tensor::zeros(vec![2, 2, 1, 1]).unwrap();
        let bn = BatchNormParams::identity(2);
        assert!(RepVggBlockTrain::new(w3.clone(), bn.clone(), w1.clone(), bn.clone(), None, 1, 1).is_err());
        assert!(RepVggBlockTrain::new(w3, bn.clone(), w1, bn.clone(), Some(bn), 2, 1).is_err());
    }

    #[test]
    fn strided_block_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let block = RepVggBlockTrain::random(4, 4, 2, 2, &mut rng).unwrap();
        assert!(block.id_bn().is_none());
        let deploy = reparameterize_block(&block).unwrap();
        for _ in 0..20 {
            let x = rand_map(&mut rng, 4, 7, 9);
            assert!(rel_dev(&deploy.forward(&x).unwrap(), &block.forward(&x).unwrap()) <= 1e-10);
        }
    }

    #[test]
    fn full_block_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for groups in [1, 2] {
            let block = RepVggBlockTrain::random(4, 4, 1, groups, &mut rng).unwrap();
            let deploy = reparameterize_block(&block).unwrap();
            for _ in 0..100 {
                let x = rand_map(&mut rng, 4, 5, 5);
                assert!(rel_dev(&deploy.forward(&x).unwrap(), &block.forward(&x).unwrap()) <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let block = RepVggBlockTrain::new(
            Tensor::zeros(vec![2, 2, 3, 3]).unwrap(),
            BatchNormParams::identity(2),
            Tensor::zeros(vec![2, 2, 1, 1]).unwrap(),
            BatchNormParams::identity(2),
            Some(BatchNormParams::identity(2)),
            1,
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_map(&mut rng, 2, 3, 3);
        let zero = Tensor::zeros(vec![2, 3, 3]).unwrap();
        let b = Block::Train(block);
        assert_eq!(block_forward(&b, &zero, Mode::Train).unwrap(), zero);
        // Only the identity branch is live: the block is ReLU(x).
        assert_eq!(block_forward(&b, &x, Mode::Train).unwrap(), relu(&x));
        assert!(block_forward(&b, &x, Mode::Deploy).is_err());
        let fused = b.reparameterize().unwrap();
        assert_eq!(block_forward(&fused, &x, Mode::Deploy).unwrap(), relu(&x));
        assert!(block_forward(&fused, &x, Mode::Train).is_err());
    }

    #[test]
    fn fusion_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for (cin, cout, stride) in [(4, 4, 1), (2, 4, 1), (4, 4, 2)] {
            let deploy = reparameterize_block(&RepVggBlockTrain::random(cin, cout, stride, 2, &mut rng).unwrap()).unwrap();
            let again = reparameterize_block(&RepVggBlockTrain::from_deploy(&deploy).unwrap()).unwrap();
            assert_eq!(again, deploy);
        }
    }

    #[test]
    fn deploy_has_fewer_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let block = RepVggBlockTrain::random(4, 4, 1, 1, &mut rng).unwrap();
        assert!(reparameterize_block(&block).unwrap().param_count() < block.param_count());
    }

    #[test]
    fn backbone_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cfg = BackboneConfig::new(1, vec![StageConfig { num_blocks: 1, channels: 4, first_stride: 1, groups: 1 }]).unwrap();
        let bb = Backbone::random(&cfg, &mut rng).unwrap();
        let x = rand_map(&mut rng, 1, 8, 13);
        let out = bb.forward(&x).unwrap();
        assert_eq!(out.shape(), &[13, 32]);

        let cfg = BackboneConfig::new(
            1,
            vec![
                StageConfig { num_blocks: 1, channels: 4, first_stride: 2, groups: 1 },
                StageConfig { num_blocks: 2, channels: 8, first_stride: 2, groups: 2 },
            ],
        )
        .unwrap();
        let bb = Backbone::random(&cfg, &mut rng).unwrap();
        let x = rand_map(&mut rng, 1, 9, 14);
        let out = bb.forward(&x).unwrap();
        assert_eq!(out.shape(), &[14usize.div_ceil(4), 8 * 9usize.div_ceil(4)]);
        assert_eq!(bb.output_dim(9), 8 * 3);
    }

    #[test]
    fn fused_backbone_matches_training_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let cfg = BackboneConfig::new(
            1,
            vec![
                StageConfig { num_blocks: 2, channels: 4, first_stride: 1, groups: 1 },
                StageConfig { num_blocks: 2, channels: 8, first_stride: 2, groups: 4 },
            ],
        )
        .unwrap();
        let bb = Backbone::random(&cfg, &mut rng).unwrap();
        let fused = bb.reparameterize().unwrap();
        assert!(fused.is_deploy());
        for _ in 0..5 {
            let x = rand_map(&mut rng, 1, 10, 12);
            let (a, b) = (bb.forward(&x).unwrap(), fused.forward(&x).unwrap());
            assert!(rel_dev(&b, &a) <= 1e-9);
        }
    }

    #[test]
    fn flatten_index_layout() {
        let m = Tensor::from_fn(vec![2, 3, 4], |i| i as f64).unwrap();
        let f = flatten_frames(&m).unwrap();
        assert_eq!(f.shape(), &[4, 6]);
        // frame t, feature c*F + f  <-  map[c, f, t]
        assert_eq!(f.data()[2 * 6 + 3 + 1], m.data()[(3 + 1) * 4 + 2]);
    }

    #[test]
    fn backbone_config_validation() {
        let bad = StageConfig { num_blocks: 1, channels: 6, first_stride: 1, groups: 4 };
        assert!(BackboneConfig::new(4, vec![bad]).is_err());
        let stages = BackboneConfig::parse_stages("1:4:1, 2:8:2:2").unwrap();
        assert_eq!(stages[1], StageConfig { num_blocks: 2, channels: 8, first_stride: 2, groups: 2 });
        assert!(BackboneConfig::parse_stages("1:4").is_err());
    }

    #[test]
    fn seeded_forward_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(2021);
        let block = RepVggBlockTrain::random(2, 2, 1, 1, &mut rng).unwrap();
        let x = rand_map(&mut rng, 2, 4, 4);
        let y = block.forward(&x).unwrap();
        let sum: f64 = y.data().iter().sum();
        assert!((sum - GOLDEN_SUM).abs() <= 1e-12 * GOLDEN_SUM.abs(), "sum = {sum:.17}");
    }

    // Frozen from the first verified run.
    const GOLDEN_SUM: f64 = 7.323_938_519_788_914;
}
