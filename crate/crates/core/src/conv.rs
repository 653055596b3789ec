//! Convolution as one custom op: receptive fields are copied into a column
//! matrix (im2col) and multiplied with the weights; the backward pass reuses
//! the same columns for the weight gradient and scatters `Wᵀ·grad` back onto
//! the input grid (col2im). One graph node per convolution keeps candle's
//! per-node backward overhead off the hot path.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Storage, Tensor, WithDType};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub out: (usize, usize),
}

impl Geometry {
    pub fn new(
        (c, h, w): (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        let out = |n: usize, k: usize, s: usize, p: usize, d: usize| {
            (n + 2 * p).checked_sub(d * (k - 1) + 1).map(|v| v / s + 1)
        };
        match (
            out(h, kernel.0, stride.0, padding.0, dilation.0),
            out(w, kernel.1, stride.1, padding.1, dilation.1),
        ) {
            (Some(oh), Some(ow)) => Ok(Self {
                c,
                h,
                w,
                kernel,
                stride,
                padding,
                dilation,
                out: (oh, ow),
            }),
            _ => Err(Error::shape(format!(
                "input {h}×{w} is smaller than the {}×{} kernel span",
                kernel.0, kernel.1
            ))),
        }
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    fn out_len(&self) -> usize {
        self.out.0 * self.out.1
    }

    /// Output columns `[lo, hi)` whose input coordinate `o·stride + offset − pad`
    /// lands inside `[0, n)`.
    fn valid_range(n: usize, out: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
        // smallest o with o·stride + offset ≥ pad
        let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
        // largest o with o·stride + offset − pad ≤ n − 1, plus one
        let hi = if n + pad > offset { (n + pad - offset - 1) / stride + 1 } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }

    /// Calls `f(input row start, column row start, lo, hi, step)` for every
    /// contiguous run of one channel plane; within a run, output column `ox`
    /// reads input `row + ox·step`.
    fn for_each_run(&self, mut f: impl FnMut(isize, usize, usize, usize)) {
        let (oh, ow) = self.out;
        let l = self.out_len();
        for ki in 0..self.kernel.0 {
            let (ylo, yhi) = Self::valid_range(self.h, oh, self.stride.0, ki * self.dilation.0, self.padding.0);
            for kj in 0..self.kernel.1 {
                let col_base = (ki * self.kernel.1 + kj) * l;
                let x_off = (kj * self.dilation.1) as isize - self.padding.1 as isize;
                let (xlo, xhi) = Self::valid_range(self.w, ow, self.stride.1, kj * self.dilation.1, self.padding.1);
                for oy in ylo..yhi {
                    let iy = oy * self.stride.0 + ki * self.dilation.0 - self.padding.0;
                    f((iy * self.w) as isize + x_off, col_base + oy * ow, xlo, xhi);
                }
            }
        }
    }

    /// One sample `C × H × W` → columns `(C·kh·kw) × (oh·ow)`; `dst` must be zeroed.
    fn im2col<T: Copy>(&self, src: &[T], dst: &mut [T]) {
        let (plane_in, plane_out) = (self.h * self.w, self.taps() * self.out_len());
        let sw = self.stride.1;
        for c in 0..self.c {
            let (s, d) = (&src[c * plane_in..(c + 1) * plane_in], &mut dst[c * plane_out..(c + 1) * plane_out]);
            self.for_each_run(|row, col, lo, hi| {
                let start = (row + (lo * sw) as isize) as usize;
                let out = &mut d[col + lo..col + hi];
                if sw == 1 {
                    out.copy_from_slice(&s[start..start + out.len()]);
                } else {
                    for (o, v) in out.iter_mut().zip(s[start..].iter().step_by(sw)) {
                        *o = *v;
                    }
                }
            });
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into `dst`.
    fn col2im<T: Copy + AddAssign>(&self, src: &[T], dst: &mut [T]) {
        let (plane_in, plane_out) = (self.h * self.w, self.taps() * self.out_len());
        let sw = self.stride.1;
        for c in 0..self.c {
            let (s, d) = (&src[c * plane_out..(c + 1) * plane_out], &mut dst[c * plane_in..(c + 1) * plane_in]);
            self.for_each_run(|row, col, lo, hi| {
                let start = (row + (lo * sw) as isize) as usize;
                for (o, v) in d[start..].iter_mut().step_by(sw).zip(&s[col + lo..col + hi]) {
                    *o += *v;
                }
            });
        }
    }
}

trait Elem: WithDType + LinalgScalar + AddAssign {}
impl Elem for f32 {}
impl Elem for f64 {}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("convolution needs contiguous inputs"),
    }
}

/// Runs `f` on the contiguous host data of `t`.
pub(crate) fn with_slice<T: WithDType, R>(t: &Tensor, f: impl FnOnce(&[T]) -> R) -> candle_core::Result<R> {
    let t = t.contiguous()?;
    let (storage, layout) = t.storage_and_layout();
    let Storage::Cpu(cpu) = &*storage else {
        candle_core::bail!("only CPU tensors are supported")
    };
    Ok(f(contiguous(T::cpu_storage_as_slice(cpu)?, layout)?))
}

struct ConvOp {
    geom: Geometry,
    groups: usize,
    c_out: usize,
    batch: usize,
}

impl ConvOp {
    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let g = &self.geom;
        let cg = g.c / self.groups;
        (cg * g.taps(), self.c_out / self.groups, g.out_len(), g.c * g.h * g.w, g.c * g.taps() * g.out_len())
    }

    fn forward<T: Elem>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (ck, og, l, x_len, cols_len) = self.dims();
        let mut y = vec![T::zero(); self.batch * self.c_out * l];
        let mut cols = vec![T::zero(); cols_len];
        for b in 0..self.batch {
            cols.iter_mut().for_each(|v| *v = T::zero());
            self.geom.im2col(&x[b * x_len..(b + 1) * x_len], &mut cols);
            for g in 0..self.groups {
                let wg = ArrayView2::from_shape((og, ck), &w[g * og * ck..(g + 1) * og * ck]).unwrap();
                let cg = ArrayView2::from_shape((ck, l), &cols[g * ck * l..(g + 1) * ck * l]).unwrap();
                let off = (b * self.c_out + g * og) * l;
                let mut yg = ArrayViewMut2::from_shape((og, l), &mut y[off..off + og * l]).unwrap();
                general_mat_mul(T::one(), &wg, &cg, T::zero(), &mut yg);
            }
        }
        y
    }

    fn backward<T: Elem>(&self, x: &[T], w: &[T], grad: &[T], need_dx: bool) -> (Option<Vec<T>>, Vec<T>) {
        let (ck, og, l, x_len, cols_len) = self.dims();
        let mut dw = vec![T::zero(); w.len()];
        let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
        let mut cols = vec![T::zero(); cols_len];
        let mut dcols = vec![T::zero(); if need_dx { cols_len } else { 0 }];
        for b in 0..self.batch {
            cols.iter_mut().for_each(|v| *v = T::zero());
            self.geom.im2col(&x[b * x_len..(b + 1) * x_len], &mut cols);
            for g in 0..self.groups {
                let off = (b * self.c_out + g * og) * l;
                let gy = ArrayView2::from_shape((og, l), &grad[off..off + og * l]).unwrap();
                let cg = ArrayView2::from_shape((ck, l), &cols[g * ck * l..(g + 1) * ck * l]).unwrap();
                let mut dwg = ArrayViewMut2::from_shape((og, ck), &mut dw[g * og * ck..(g + 1) * og * ck]).unwrap();
                general_mat_mul(T::one(), &gy, &cg.t(), T::one(), &mut dwg);
                if need_dx {
                    let wg = ArrayView2::from_shape((og, ck), &w[g * og * ck..(g + 1) * og * ck]).unwrap();
                    let mut dcg = ArrayViewMut2::from_shape((ck, l), &mut dcols[g * ck * l..(g + 1) * ck * l]).unwrap();
                    general_mat_mul(T::one(), &wg.t(), &gy, T::zero(), &mut dcg);
                }
            }
            if let Some(dx) = dx.as_mut() {
                self.geom.col2im(&dcols, &mut dx[b * x_len..(b + 1) * x_len]);
            }
        }
        (dx, dw)
    }

    fn backward_tensors<T: Elem>(
        &self,
        x: &Tensor,
        w: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let need_dx = x.track_op();
        let (dx, dw) = with_slice::<T, _>(x, |xs| {
            with_slice::<T, _>(w, |ws| with_slice::<T, _>(grad, |gs| self.backward(xs, ws, gs, need_dx)))
        })???;
        let dev = x.device();
        Ok((
            dx.map(|d| Tensor::from_vec(d, x.shape(), dev)).transpose()?,
            Some(Tensor::from_vec(dw, w.shape(), dev)?),
        ))
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "im2col-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let y = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(self.forward(contiguous(x, l1)?, contiguous(w, l2)?)),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(self.forward(contiguous(x, l1)?, contiguous(w, l2)?)),
            _ => candle_core::bail!("convolution supports matching f32 or f64 inputs only"),
        };
        let (oh, ow) = self.geom.out;
        Ok((y, (self.batch, self.c_out, oh, ow).into()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        match x.dtype() {
            candle_core::DType::F32 => self.backward_tensors::<f32>(x, w, grad),
            candle_core::DType::F64 => self.backward_tensors::<f64>(x, w, grad),
            dt => candle_core::bail!("convolution does not support {dt:?}"),
        }
    }
}

/// Grouped 2-D convolution, `weight: C_out × C_in/groups × kh × kw`.
pub(crate) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
    groups: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, cg, kh, kw) = weight.dims4()?;
    if groups == 0 || c % groups != 0 || o % groups != 0 || cg * groups != c {
        return Err(Error::shape(format!(
            "conv weight {:?} does not fit {c} input channels in {groups} groups",
            weight.dims()
        )));
    }
    if x.dtype() != weight.dtype() {
        return Err(Error::shape(format!("conv input is {:?}, weight is {:?}", x.dtype(), weight.dtype())));
    }
    let geom = Geometry::new((c, h, w), (kh, kw), stride, padding, dilation)?;
    let op = ConvOp {
        geom,
        groups,
        c_out: o,
        batch: b,
    };
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, op)?)
}

/// 1-D convolution on `B × C × T` through the 2-D path with a unit height.
pub(crate) fn conv1d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize, dilation: usize) -> Result<Tensor> {
    let y = conv2d(&x.unsqueeze(2)?, &weight.unsqueeze(2)?, (1, stride), (0, padding), (1, dilation), 1)?;
    Ok(y.squeeze(2)?)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};

    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    const CASES: [(usize, usize, usize, usize); 5] = [(1, 1, 1, 1), (2, 1, 1, 1), (2, 0, 1, 2), (1, 2, 2, 4), (2, 1, 1, 4)];

    #[test]
    fn matches_candle_forward() {
        let x = randn(&[2, 4, 9, 12], 1);
        for (stride, pad, dil, groups) in CASES {
            let w = randn(&[4, 4 / groups, 3, 3], 2);
            let ours = conv2d(&x, &w, (stride, stride), (pad, pad), (dil, dil), groups).unwrap();
            let reference = x.conv2d(&w, pad, stride, dil, groups).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12, "stride {stride} pad {pad} dil {dil} groups {groups}");
        }
        let x1 = randn(&[2, 3, 40], 3);
        let w1 = randn(&[5, 3, 4], 4);
        let ours = conv1d(&x1, &w1, 3, 2, 2).unwrap();
        let reference = x1.conv1d(&w1, 2, 3, 2, 1).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
    }

    #[test]
    fn gradients_match_candle_where_candle_is_correct() {
        // square inputs with equal remainders on both axes sidestep candle's
        // single output-padding bug, so its gradients are usable as a reference
        for (stride, pad, dil, groups) in CASES {
            let x = Var::from_tensor(&randn(&[2, 4, 9, 9], 5)).unwrap();
            let w = Var::from_tensor(&randn(&[4, 4 / groups, 3, 3], 6)).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), (stride, stride), (pad, pad), (dil, dil), groups).unwrap();
            let probe = randn(ours.dims(), 7);
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let theirs = x.as_tensor().conv2d(w.as_tensor(), pad, stride, dil, groups).unwrap();
            let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let d = max_diff(g1.get(v).unwrap(), g2.get(v).unwrap());
                assert!(d < 1e-10, "stride {stride} pad {pad} dil {dil} groups {groups}: {d}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Geometry::new((2, 7, 8), (3, 2), (2, 1), (1, 1), (1, 2)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..2 * 7 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n_cols = 2 * g.taps() * g.out_len();
        let y: Vec<f64> = (0..n_cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; n_cols];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn input_without_gradient_gets_none() {
        let x = randn(&[1, 2, 5, 5], 9);
        let w = Var::from_tensor(&randn(&[3, 2, 3, 3], 10)).unwrap();
        let y = conv2d(&x, w.as_tensor(), (1, 1), (1, 1), (1, 1), 1).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        assert!(g.get(&x).is_none());
        assert!(g.get(&w).is_some());
    }

    #[test]
    fn rejects_too_small_input() {
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::zeros((1, 1, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(conv2d(&x, &w, (1, 1), (0, 0), (1, 1), 1).is_err());
    }
}
