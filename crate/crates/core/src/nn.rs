//! Parameter storage and the small set of layers the networks are built from.
//!
//! Parameters live in a [`ParamStore`] in creation order; initialization draws
//! from the store's seeded generator so a model is a pure function of its seed.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{conv, fused};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; saved and restored, never optimized.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    entries: Vec<ParamEntry>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            device: device.clone(),
            dtype,
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push(ParamEntry {
            name,
            var: var.clone(),
            kind,
        });
        Ok(var)
    }

    /// Trainable parameter drawn from U(-bound, bound).
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-1.0..1.0) * bound)
            .collect();
        self.insert(name.into(), values, shape, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(name.into(), vec![value; n], shape, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(name.into(), vec![value; n], shape, ParamKind::Buffer)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.var)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.var.clone())
            .collect()
    }

    /// Exact number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Detached copies of every parameter and buffer.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.var.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites values by name. Every entry must be present with a matching shape.
    pub fn load(&self, named: &[(String, Tensor)]) -> Result<()> {
        for e in &self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == &e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", e.name)))?;
            if t.dims() != e.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    t.dims(),
                    e.var.dims()
                )));
            }
            e.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::LeakyRelu => leaky_relu(x, LEAKY_SLOPE)?,
        })
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg = (x - &pos)?;
    Ok((pos + neg.affine(slope, 0.0)?)?)
}

/// Row-wise L2 normalization of a `B × E` matrix.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `y = x Wᵀ + b`, weights and bias drawn from U(±1/√fan_in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(format!("{prefix}.weight"), &[d_out, d_in], bound)?,
            bias: ps.uniform(format!("{prefix}.bias"), &[d_out], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        (len + 2 * self.padding)
            .checked_sub(span)
            .map(|v| v / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    pub fn new(ps: &mut ParamStore, prefix: &str, spec: Conv1dSpec) -> Result<Self> {
        let bound = 1.0 / ((spec.c_in * spec.kernel) as f64).sqrt();
        let weight = ps.uniform(format!("{prefix}.weight"), &[spec.c_out, spec.c_in, spec.kernel], bound)?;
        let bias = spec
            .bias
            .then(|| ps.uniform(format!("{prefix}.bias"), &[spec.c_out], bound))
            .transpose()?;
        Ok(Self { weight, bias, spec })
    }

    /// `B × C_in × T → B × C_out × T'`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let y = conv::conv1d(x, self.weight.as_tensor(), s.stride, s.padding, s.dilation)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, s.c_out, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    pub fn out_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        let f = |n: usize, k: usize| (n + 2 * self.padding - k) / self.stride + 1;
        (f(h, self.kernel.0), f(w, self.kernel.1))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, prefix: &str, spec: Conv2dSpec) -> Result<Self> {
        let per_group = spec.c_in / spec.groups;
        let fan_in = per_group * spec.kernel.0 * spec.kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = ps.uniform(
            format!("{prefix}.weight"),
            &[spec.c_out, per_group, spec.kernel.0, spec.kernel.1],
            bound,
        )?;
        let bias = spec
            .bias
            .then(|| ps.uniform(format!("{prefix}.bias"), &[spec.c_out], bound))
            .transpose()?;
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let y = conv::conv2d(
            x,
            self.weight.as_tensor(),
            (s.stride, s.stride),
            (s.padding, s.padding),
            (1, 1),
            s.groups,
        )?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, s.c_out, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over dim 1 of `B × C × …` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    channels: usize,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(format!("{prefix}.weight"), &[channels], 1.0)?,
            beta: ps.constant(format!("{prefix}.bias"), &[channels], 0.0)?,
            running_mean: ps.buffer(format!("{prefix}.running_mean"), &[channels], 0.0)?,
            running_var: ps.buffer(format!("{prefix}.running_var"), &[channels], 1.0)?,
            channels,
        })
    }

    /// Training mode normalizes with biased batch statistics and updates the
    /// running estimates (unbiased variance); eval mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.forward_impl(x, train, false)
    }

    /// `relu(bn(x))`, fused in training mode.
    pub fn forward_relu(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.forward_impl(x, train, true)
    }

    fn forward_impl(&self, x: &Tensor, train: bool, relu: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.len() < 2 || dims[1] != self.channels {
            return Err(Error::shape(format!(
                "batch norm over {} channels got input {dims:?}",
                self.channels
            )));
        }
        let mut bshape = vec![1usize; dims.len()];
        bshape[1] = self.channels;
        if train {
            let (y, mean, var) = fused::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), BN_EPS, relu)?;
            let count: usize = dims[0] * dims[2..].iter().product::<usize>();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let dev = x.device();
            let m = Tensor::from_vec(mean, self.channels, dev)?.to_dtype(x.dtype())?;
            let v = Tensor::from_vec(var, self.channels, dev)?.affine(unbias, 0.0)?.to_dtype(x.dtype())?;
            let rm = self.running_mean.as_tensor();
            let rv = self.running_var.as_tensor();
            self.running_mean
                .set(&(rm.affine(1.0 - BN_MOMENTUM, 0.0)? + m.affine(BN_MOMENTUM, 0.0)?)?)?;
            self.running_var
                .set(&(rv.affine(1.0 - BN_MOMENTUM, 0.0)? + v.affine(BN_MOMENTUM, 0.0)?)?)?;
            return Ok(y);
        }
        let mean = self.running_mean.as_detached_tensor().reshape(bshape.as_slice())?;
        let var = self.running_var.as_detached_tensor().reshape(bshape.as_slice())?;
        let inv_std = (var + BN_EPS)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        let y = y.broadcast_mul(&self.gamma.as_tensor().reshape(bshape.as_slice())?)?;
        let y = y.broadcast_add(&self.beta.as_tensor().reshape(bshape.as_slice())?)?;
        Ok(if relu { y.relu()? } else { y })
    }
}

/// Layer normalization across the channel axis of `B × C × T`, independently per frame.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    pub gamma: Var,
    pub beta: Var,
    channels: usize,
}

const LN_EPS: f64 = 1e-5;

impl ChannelLayerNorm {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(format!("{prefix}.weight"), &[channels], 1.0)?,
            beta: ps.constant(format!("{prefix}.bias"), &[channels], 0.0)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let y = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        let shape = (1, self.channels, 1);
        let y = y.broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?;
        Ok(y.broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

/// Per-channel PReLU for `B × C × H × W`.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub weight: Var,
    channels: usize,
}

impl PRelu {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.constant(format!("{prefix}.weight"), &[channels], 0.25)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pos = x.relu()?;
        let neg = (x - &pos)?;
        let w = self.weight.as_tensor().reshape((1, self.channels, 1, 1))?;
        Ok((pos + neg.broadcast_mul(&w)?)?)
    }
}

/// Non-overlapping max pooling over the last axis; a trailing remainder is dropped.
pub fn max_pool1d(x: &Tensor, kernel: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    let out = t / kernel;
    if out == 0 {
        return Err(Error::shape(format!("max pool of {kernel} over length {t}")));
    }
    Ok(x.narrow(2, 0, out * kernel)?
        .reshape((b, c, out, kernel))?
        .max(3)?)
}

/// Bin `i` of an adaptive pool from `input` to `output` spans
/// `[⌊i·input/output⌋, ⌈(i+1)·input/output⌉)`.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Adaptive max pooling over the last axis of `B × C × T`.
///
/// Implemented as a gather into a padded `O × W` window grid followed by a max,
/// so gradients flow through the standard index-select/max backward passes.
/// Short bins are padded with a sentinel column that can never win.
pub fn adaptive_max_pool1d(x: &Tensor, output: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    if output == 0 || output > t {
        return Err(Error::shape(format!(
            "adaptive max pool to {output} needs 0 < {output} <= input length {t}"
        )));
    }
    if output == t {
        return Ok(x.clone());
    }
    let bins = adaptive_bins(t, output);
    let width = bins.iter().map(|(s, e)| e - s).max().unwrap_or(1);
    let sentinel = t as u32;
    let mut idx = Vec::with_capacity(output * width);
    for &(s, e) in &bins {
        idx.extend((s..e).map(|v| v as u32));
        idx.extend(std::iter::repeat_n(sentinel, width - (e - s)));
    }
    let floor = Tensor::full(f32::MIN, (b, c, 1), x.device())?.to_dtype(x.dtype())?;
    let padded = Tensor::cat(&[x, &floor], 2)?;
    let idx = Tensor::from_vec(idx, output * width, x.device())?;
    Ok(padded
        .index_select(&idx, 2)?
        .reshape((b, c, output, width))?
        .max(3)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn adaptive_bins_cover_input() {
        let bins = adaptive_bins(8000, 626);
        assert_eq!(bins.len(), 626);
        assert_eq!(bins[0].0, 0);
        assert_eq!(bins[625].1, 8000);
        for w in bins.windows(2) {
            assert!(w[1].0 <= w[0].1, "gap between bins");
        }
    }

    #[test]
    fn adaptive_max_pool_of_increasing_sequence_takes_bin_ends() {
        let n = 8000;
        let x: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let y = adaptive_max_pool1d(&t(&x, &[1, 1, n]), 626).unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (i, (_, end)) in adaptive_bins(n, 626).into_iter().enumerate() {
            assert_eq!(y[i], (end - 1) as f32);
        }
    }

    #[test]
    fn adaptive_max_pool_identity_and_errors() {
        let x = t(&[3.0, -1.0, 2.0, 5.0], &[1, 1, 4]);
        let y = adaptive_max_pool1d(&x, 4).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![3.0, -1.0, 2.0, 5.0]);
        assert!(adaptive_max_pool1d(&x, 5).is_err());
        let y = adaptive_max_pool1d(&x, 3).unwrap();
        // bins [0,2) [1,3) [2,4)
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![3.0, 2.0, 5.0]);
    }

    #[test]
    fn max_pool_drops_remainder() {
        let x = t(&[1.0, 4.0, 2.0, 3.0, 9.0], &[1, 1, 5]);
        let y = max_pool1d(&x, 2).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![4.0, 3.0]);
    }

    #[test]
    fn conv_out_len_matches_stem_arithmetic() {
        let spec = Conv1dSpec::new(1, 64, 11).stride(5).padding(5);
        assert_eq!(spec.out_len(160_000), Some((160_000 + 2 * 5 - 11) / 5 + 1));
        assert_eq!(spec.out_len(160_000), Some(32_000));
        let dil = Conv1dSpec::new(64, 64, 3).padding(2).dilation(2);
        assert_eq!(dil.out_len(8000), Some(8000));
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks_stats() {
        let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm::new(&mut ps, "bn", 2).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 3.0, 10.0, 20.0, 5.0, 7.0, 30.0, 40.0], (2, 2, 2), &Device::Cpu)
            .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y.transpose(0, 1).unwrap().contiguous().unwrap().reshape((2, 4)).unwrap();
        for row in mean.to_vec2::<f64>().unwrap() {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.1 * 4.0).abs() < 1e-12);
        assert_eq!(ps.num_trainable(), 4);
    }

    #[test]
    fn store_snapshot_and_load_round_trip() {
        let mut ps = ParamStore::new(1, DType::F32, &Device::Cpu);
        let lin = Linear::new(&mut ps, "fc", 3, 2).unwrap();
        let snap = ps.snapshot().unwrap();
        lin.weight.set(&lin.weight.zeros_like().unwrap()).unwrap();
        ps.load(&snap).unwrap();
        assert_eq!(
            lin.weight.as_tensor().to_vec2::<f32>().unwrap(),
            snap[0].1.to_vec2::<f32>().unwrap()
        );
        assert!(ps.uniform("fc.weight", &[1], 1.0).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let make = |seed| {
            let mut ps = ParamStore::new(seed, DType::F32, &Device::Cpu);
            Linear::new(&mut ps, "fc", 4, 4).unwrap().weight.as_tensor().to_vec2::<f32>().unwrap()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3), make(4));
    }
}
