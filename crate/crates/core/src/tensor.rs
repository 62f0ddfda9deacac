//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built on.
//!
//! Values are stored and accumulated in `f64`. Feature maps use the
//! channel-major `[C, H, W]` layout throughout. Convolution is
//! cross-correlation: the kernel is never flipped.

use crate::error::{invalid, shape_err, Error, Result};

/// A dense, row-major array of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i} is {}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    /// Builds a tensor whose element at flat index `i` is `f(i)`.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Applies `f` elementwise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("cannot add {:?} and {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c)
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("cannot compare {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Round-trips every value through `f32`.
    pub fn to_single_precision(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("{what} must be rank 3 [C, H, W], got {:?}", self.shape)),
        }
    }
}

/// Parameters of a 2-D (grouped, strided, dilated) cross-correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    weight: Tensor,
    bias: Option<Vec<f64>>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
    dilation: (usize, usize),
}

impl Conv2dParams {
    /// `weight` is `[C_out, C_in / groups, k_h, k_w]`.
    pub fn new(
        weight: Tensor,
        bias: Option<Vec<f64>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        dilation: (usize, usize),
    ) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(shape_err!(
                "conv weight must be rank 4 [C_out, C_in/groups, k_h, k_w], got {:?}",
                weight.shape()
            ));
        }
        if groups == 0 {
            return Err(invalid!("groups must be positive"));
        }
        let c_out = weight.shape()[0];
        if !c_out.is_multiple_of(groups) {
            return Err(shape_err!("C_out = {c_out} is not divisible by groups = {groups}"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid!("stride must be >= 1, got {stride:?}"));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(invalid!("dilation must be >= 1, got {dilation:?}"));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(shape_err!("bias has length {} but C_out = {c_out}", b.len()));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("conv bias".into()));
            }
        }
        Ok(Self { weight, bias, stride, padding, groups, dilation })
    }

    /// Stride 1, no padding, no dilation, one group.
    pub fn simple(weight: Tensor, bias: Option<Vec<f64>>, padding: usize) -> Result<Self> {
        Self::new(weight, bias, (1, 1), (padding, padding), 1, (1, 1))
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn dilation(&self) -> (usize, usize) {
        self.dilation
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Output spatial extents for an `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let axis = |name: &str, n: usize, k: usize, p: usize, d: usize, s: usize| {
            let span = d * (k - 1) + 1;
            if n + 2 * p < span {
                return Err(shape_err!(
                    "{name}: input extent {n} with padding {p} is smaller than dilated kernel span {span}"
                ));
            }
            Ok((n + 2 * p - span) / s + 1)
        };
        Ok((
            axis("height", h, kh, self.padding.0, self.dilation.0, self.stride.0)?,
            axis("width", w, kw, self.padding.1, self.dilation.1, self.stride.1)?,
        ))
    }
}

/// Inference-mode batch normalization statistics and affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, eps: f64) -> Result<Self> {
        let c = gamma.len();
        for (name, v) in [("beta", &beta), ("mean", &mean), ("var", &var)] {
            if v.len() != c {
                return Err(shape_err!("batch-norm {name} has length {} but gamma has {c}", v.len()));
            }
        }
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(invalid!("batch-norm eps must be finite and >= 0, got {eps}"));
        }
        if let Some(i) = var.iter().position(|&v| !(v >= 0.0) || !(v + eps > 0.0)) {
            return Err(invalid!(
                "batch-norm channel {i}: var + eps must be positive (var = {}, eps = {eps})",
                var[i]
            ));
        }
        let all = gamma.iter().chain(&beta).chain(&mean).chain(&var);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch-norm parameters".into()));
        }
        Ok(Self { gamma, beta, mean, var, eps })
    }

    /// gamma = 1, beta = 0, mean = 0, var = 1, eps = 0.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel multiplier `gamma / sqrt(var + eps)`.
    pub fn scale_factors(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect()
    }
}

/// Grouped, strided, dilated 2-D cross-correlation of a `[C_in, H, W]` map.
pub fn conv2d(input: &Tensor, params: &Conv2dParams) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3("conv2d input")?;
    if c_in != params.in_channels() {
        return Err(shape_err!(
            "channels: input has {c_in} but the kernel expects {} ({} per group x {} groups)",
            params.in_channels(),
            params.weight.shape()[1],
            params.groups
        ));
    }
    let (h_out, w_out) = params.output_extent(h, w)?;
    let c_out = params.out_channels();
    let (kh, kw) = params.kernel_size();
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;
    let (dh, dw) = params.dilation;
    let in_per_group = params.weight.shape()[1];
    let out_per_group = c_out / params.groups;
    let x = input.data();
    let wt = params.weight.data();

    let mut out = vec![0.0; c_out * h_out * w_out];
    for o in 0..c_out {
        let group = o / out_per_group;
        let plane = &mut out[o * h_out * w_out..(o + 1) * h_out * w_out];
        if let Some(b) = &params.bias {
            plane.fill(b[o]);
        }
        for slot in 0..in_per_group {
            let ci = group * in_per_group + slot;
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((o * in_per_group + slot) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..h_out {
                        let iy = (oy * sh + ky * dh) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * w_out..(oy + 1) * w_out];
                        for (ox, acc) in orow.iter_mut().enumerate() {
                            let ix = (ox * sw + kx * dw) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *acc += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, h_out, w_out], out)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel of `[C, H, W]`.
pub fn batchnorm_inference(x: &Tensor, bn: &BatchNormParams) -> Result<Tensor> {
    let (c, h, w) = x.dims3("batch-norm input")?;
    if bn.channels() != c {
        return Err(shape_err!("channels: input has {c} but batch-norm has {}", bn.channels()));
    }
    let plane = h * w;
    let mut out = x.data().to_vec();
    for ch in 0..c {
        let denom = (bn.var[ch] + bn.eps).sqrt();
        for v in &mut out[ch * plane..(ch + 1) * plane] {
            *v = bn.gamma[ch] * (*v - bn.mean[ch]) / denom + bn.beta[ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log(sum(exp(v)))`, computed stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean length. A zero vector is rejected.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot length-normalize a vector of norm {n} (degenerate embedding)"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    // Naive per-output-pixel reference used as the oracle.
    fn conv_oracle(x: &Tensor, p: &Conv2dParams) -> Vec<f64> {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ws = p.weight().shape();
        let (c_out, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let g = p.groups();
        assert_eq!(cpg * g, c_in);
        let (sh, sw) = p.stride();
        let (ph, pw) = p.padding();
        let (dh, dw) = p.dilation();
        let ho = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
        let wo = (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
        let mut out = Vec::new();
        for o in 0..c_out {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = p.bias().map_or(0.0, |b| b[o]);
                    for i in 0..cpg {
                        let ci = (o / (c_out / g)) * cpg + i;
                        for a in 0..kh {
                            for b in 0..kw {
                                let iy = (y * sh + a * dh) as i64 - ph as i64;
                                let ix = (xx * sw + b * dw) as i64 - pw as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x.data()[(ci * h + iy as usize) * w + ix as usize];
                                let wv = p.weight().data()[((o * cpg + i) * kh + a) * kw + b];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, vec![1, 5, 7]);
        let p = Conv2dParams::simple(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), None, 0).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let c = 2.5;
        let x = Tensor::new(vec![1, 4, 4], vec![c; 16]).unwrap();
        let p = Conv2dParams::simple(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(), None, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        let at = |r: usize, col: usize| y.data()[r * 4 + col];
        assert_eq!(at(1, 1), 9.0 * c);
        assert_eq!(at(2, 2), 9.0 * c);
        for (r, col) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
            assert_eq!(at(r, col), 4.0 * c);
        }
        assert_eq!(at(0, 1), 6.0 * c);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, vec![2, 4, 4]);
        let w = random_tensor(&mut rng, vec![3, 2, 3, 3]);
        let p = Conv2dParams::simple(w, Some(vec![0.1, -0.2, 0.3]), 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let expect = conv_oracle(&x, &p);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn conv_oracle_sweep_over_groups_stride_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 4;
        for groups in [1, 2, c] {
            for stride in [1, 2] {
                for dil in [1, 2] {
                    let x = random_tensor(&mut rng, vec![c, 7, 6]);
                    let w = random_tensor(&mut rng, vec![c, c / groups, 3, 3]);
                    let p = Conv2dParams::new(w, Some(vec![0.5; c]), (stride, stride), (1, 1), groups, (dil, dil))
                        .unwrap();
                    let y = conv2d(&x, &p).unwrap();
                    let expect = conv_oracle(&x, &p);
                    assert_eq!(y.numel(), expect.len());
                    for (a, b) in y.data().iter().zip(&expect) {
                        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![2, 5, 5]);
        let z = random_tensor(&mut rng, vec![2, 5, 5]);
        let w = random_tensor(&mut rng, vec![2, 1, 3, 3]);
        let p = Conv2dParams::new(w, None, (1, 1), (1, 1), 2, (1, 1)).unwrap();
        let (a, b) = (1.7, -0.3);
        let lhs = conv2d(&x.scale(a).unwrap().add(&z.scale(b).unwrap()).unwrap(), &p).unwrap();
        let rhs = conv2d(&x, &p).unwrap().scale(a).unwrap().add(&conv2d(&z, &p).unwrap().scale(b).unwrap()).unwrap();
        let scale = rhs.max_abs().max(1.0);
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10 * scale);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(vec![3, 4, 4]).unwrap();
        let p = Conv2dParams::simple(Tensor::zeros(vec![1, 2, 3, 3]).unwrap(), None, 1).unwrap();
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }

    #[test]
    fn conv_rejects_too_small_input() {
        let x = Tensor::zeros(vec![1, 2, 2]).unwrap();
        let p = Conv2dParams::simple(Tensor::zeros(vec![1, 1, 3, 3]).unwrap(), None, 0).unwrap();
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn conv_params_reject_indivisible_groups() {
        assert!(Conv2dParams::new(Tensor::zeros(vec![3, 1, 3, 3]).unwrap(), None, (1, 1), (1, 1), 2, (1, 1)).is_err());
    }

    #[test]
    fn batchnorm_identity_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, vec![2, 3, 3]);
        assert_eq!(batchnorm_inference(&x, &BatchNormParams::identity(2)).unwrap(), x);
        let bn = BatchNormParams::new(vec![2.0; 2], vec![1.0; 2], vec![0.0; 2], vec![1.0; 2], 0.0).unwrap();
        let y = batchnorm_inference(&x, &bn).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b + 1.0);
        }
    }

    #[test]
    fn batchnorm_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, vec![3, 2, 4]);
        let mut v = |n| (0..n).map(|_| rng.gen_range(0.1..2.0)).collect::<Vec<f64>>();
        let bn = BatchNormParams::new(v(3), v(3), v(3), v(3), 1e-5).unwrap();
        let y = batchnorm_inference(&x, &bn).unwrap();
        for c in 0..3 {
            for i in 0..8 {
                let xv = x.data()[c * 8 + i];
                let expect = bn.gamma[c] * (xv - bn.mean[c]) / (bn.var[c] + bn.eps).sqrt() + bn.beta[c];
                assert_eq!(y.data()[c * 8 + i], expect);
            }
        }
    }

    #[test]
    fn batchnorm_rejects_length_mismatch() {
        let x = Tensor::zeros(vec![3, 2, 2]).unwrap();
        assert!(batchnorm_inference(&x, &BatchNormParams::identity(2)).is_err());
        assert!(BatchNormParams::new(vec![1.0; 2], vec![0.0; 3], vec![0.0; 2], vec![1.0; 2], 0.0).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&[0.3; 5]).unwrap();
        assert!(s.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let v = [0.1, -2.0, 3.5];
        let shifted: Vec<f64> = v.iter().map(|x| x + 100.0).collect();
        let (a, b) = (softmax(&v).unwrap(), softmax(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        let once = l2_normalize(&[1.0, -2.0, 0.5]).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!((norm(&once) - 1.0).abs() <= 1e-12);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tensor_rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_shift_invariant_distribution(
                v in prop::collection::vec(-30.0f64..30.0, 1..20),
                c in -50.0f64..50.0,
            ) {
                let p = softmax(&v).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(p.iter().all(|&x| x > 0.0));
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                for (a, b) in p.iter().zip(softmax(&shifted).unwrap()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
