//! Training-mode batch normalization as one op with a closed-form gradient.
//! Composing it from elementwise candle ops costs several full-size
//! temporaries per backward pass.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::conv::with_slice;
use crate::error::{Error, Result};

/// Per-channel batch statistics of a contiguous `B × C × S` view.
struct Stats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

struct BatchNormTrain {
    stats: Stats,
    relu: bool,
    b: usize,
    c: usize,
    s: usize,
}

fn as_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("batch norm needs contiguous inputs"),
    }
}

impl BatchNormTrain {
    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let (c_n, s_n) = (self.c, self.s);
        let mut y = Vec::with_capacity(x.len());
        for bi in 0..self.b {
            for c in 0..c_n {
                let scale = gamma[c].to_f64() * self.stats.inv_std[c];
                let shift = beta[c].to_f64() - self.stats.mean[c] * scale;
                let base = (bi * c_n + c) * s_n;
                let relu = self.relu;
                y.extend(x[base..base + s_n].iter().map(|&v| {
                    let o = v.to_f64() * scale + shift;
                    T::from_f64(if relu && o < 0.0 { 0.0 } else { o })
                }));
            }
        }
        y
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?))
            }
            _ => candle_core::bail!("batch norm supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        match x.dtype() {
            DType::F32 => self.backward::<f32>(x, gamma, res, grad),
            DType::F64 => self.backward::<f64>(x, gamma, res, grad),
            dt => candle_core::bail!("batch norm does not support {dt:?}"),
        }
    }
}

impl BatchNormTrain {
    fn backward<T: WithDType>(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (c_n, s_n) = (self.c, self.s);
        let n = (self.b * s_n) as f64;
        let gamma_v = as_f64(gamma)?;
        // the rectifier is closed exactly where the output is zero
        let mut gv: Vec<f64> = with_slice::<T, _>(grad, |g| g.iter().map(|v| v.to_f64()).collect())?;
        if self.relu {
            with_slice::<T, _>(res, |r| {
                for (g, y) in gv.iter_mut().zip(r) {
                    if y.to_f64() <= 0.0 {
                        *g = 0.0;
                    }
                }
            })?;
        }
        let (dx, dgamma, dbeta) = with_slice::<T, _>(x, |xv| {
            let (mut dbeta, mut dgamma) = (vec![0.0; c_n], vec![0.0; c_n]);
            for bi in 0..self.b {
                for c in 0..c_n {
                    let base = (bi * c_n + c) * s_n;
                    let (m, inv) = (self.stats.mean[c], self.stats.inv_std[c]);
                    for i in base..base + s_n {
                        dbeta[c] += gv[i];
                        dgamma[c] += gv[i] * (xv[i].to_f64() - m) * inv;
                    }
                }
            }
            let mut dx = Vec::with_capacity(xv.len());
            for bi in 0..self.b {
                for c in 0..c_n {
                    let base = (bi * c_n + c) * s_n;
                    let (m, inv) = (self.stats.mean[c], self.stats.inv_std[c]);
                    let k = gamma_v[c] * inv;
                    let (mb, mg) = (dbeta[c] / n, dgamma[c] / n);
                    dx.extend(
                        (base..base + s_n).map(|i| T::from_f64(k * (gv[i] - mb - (xv[i].to_f64() - m) * inv * mg))),
                    );
                }
            }
            (dx, dgamma, dbeta)
        })?;
        let dev = x.device();
        let dtype = x.dtype();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?),
            Some(Tensor::from_vec(dgamma, gamma.shape(), dev)?.to_dtype(dtype)?),
            Some(Tensor::from_vec(dbeta, gamma.shape(), dev)?.to_dtype(dtype)?),
        ))
    }
}

/// Normalizes `x: B × C × …` with its own per-channel statistics, then applies
/// `gamma`, `beta` and optionally a ReLU. Also returns the batch mean and
/// biased variance.
pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    relu: bool,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let dims = x.dims();
    if dims.len() < 2 || gamma.dims() != [dims[1]] || beta.dims() != [dims[1]] {
        return Err(Error::shape(format!(
            "batch norm input {dims:?} with affine {:?} / {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let (b, c) = (dims[0], dims[1]);
    let s: usize = dims[2..].iter().product();
    let x = x.contiguous()?;
    let n = (b * s) as f64;
    let stats = |xv: &[f64]| {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                mean[ci] += xv[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let m = mean[ci];
                var[ci] += xv[base..base + s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        (mean, var)
    };
    let (mean, mut var) = match x.dtype() {
        DType::F32 => with_slice::<f32, _>(&x, |v| stats(&v.iter().map(|&a| a as f64).collect::<Vec<_>>()))?,
        _ => stats(&as_f64(&x)?),
    };
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let op = BatchNormTrain {
        stats: Stats {
            mean: mean.clone(),
            inv_std,
        },
        relu,
        b,
        c,
        s,
    };
    let y = x.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    Ok((y, mean, var))
}
