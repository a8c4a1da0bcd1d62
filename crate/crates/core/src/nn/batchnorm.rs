//! Training-mode batch normalization over `(N, C, H, W)` as one fused op.
//!
//! The generic tensor version spends most of its time in broadcast kernels;
//! here both passes walk each channel plane directly.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor};

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let CpuStorage::F32(data) = s else { candle_core::bail!("batch norm supports f32 tensors only") };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("batch norm needs contiguous operands"),
    }
}

fn dims(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    match l.dims() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        d => candle_core::bail!("batch norm expects a rank-4 input, got {d:?}"),
    }
}

/// Per-channel biased mean and variance, accumulated in f64.
fn moments(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let planes = || (0..n).map(move |b| &x[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
        let m = planes().flat_map(|p| p.iter()).map(|&v| v as f64).sum::<f64>() / count;
        let v = planes().flat_map(|p| p.iter()).map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
        mean[ch] = m;
        var[ch] = v;
    }
    (mean, var)
}

/// Returns a `(2, C)` tensor holding the batch mean and biased variance.
struct Moments;

impl CustomOp1 for Moments {
    fn name(&self) -> &'static str {
        "batch-moments"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, hw) = dims(l)?;
        let (mean, var) = moments(slice(s, l)?, n, c, hw);
        let out = mean.iter().chain(&var).map(|&v| v as f32).collect();
        Ok((CpuStorage::F32(out), Shape::from((2, c))))
    }
}

struct Normalize {
    eps: f64,
}

impl CustomOp3 for Normalize {
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
        let (n, c, hw) = dims(l1)?;
        let (x, gamma, beta) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let (mean, var) = moments(x, n, c, hw);
        let mut y = vec![0f32; x.len()];
        for ch in 0..c {
            let scale = gamma[ch] as f64 / (var[ch] + self.eps).sqrt();
            let shift = beta[ch] as f64 - mean[ch] * scale;
            let (scale, shift) = (scale as f32, shift as f32);
            for b in 0..n {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                    *o = v * scale + shift;
                }
            }
        }
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let xs = x.flatten_all()?.to_vec1::<f32>()?;
        let dy = grad.flatten_all()?.to_vec1::<f32>()?;
        let gs = gamma.to_vec1::<f32>()?;
        let (mean, var) = moments(&xs, n, c, hw);
        let count = (n * hw) as f64;
        let mut dx = vec![0f32; xs.len()];
        let mut dgamma = vec![0f32; c];
        let mut dbeta = vec![0f32; c];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + self.eps).sqrt();
            let ranges = (0..n).map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw).collect::<Vec<_>>();
            let (mut sum_dy, mut sum_dy_xhat) = (0f64, 0f64);
            for r in &ranges {
                for (&g, &v) in dy[r.clone()].iter().zip(&xs[r.clone()]) {
                    sum_dy += g as f64;
                    sum_dy_xhat += g as f64 * (v as f64 - mean[ch]) * inv;
                }
            }
            dbeta[ch] = sum_dy as f32;
            dgamma[ch] = sum_dy_xhat as f32;
            let k = gs[ch] as f64 * inv / count;
            for r in &ranges {
                for i in r.clone() {
                    let xhat = (xs[i] as f64 - mean[ch]) * inv;
                    dx[i] = (k * (count * dy[i] as f64 - sum_dy - xhat * sum_dy_xhat)) as f32;
                }
            }
        }
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, (n, c, h, w), dev)?),
            Some(Tensor::from_vec(dgamma, c, dev)?),
            Some(Tensor::from_vec(dbeta, c, dev)?),
        ))
    }
}

/// `x · scale + shift` per channel, the inference form of batch normalization.
struct ChannelAffine;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
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
        let (n, c, hw) = dims(l1)?;
        let (x, scale, shift) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let mut y = vec![0f32; x.len()];
        for (i, (o, p)) in y.chunks_mut(hw).zip(x.chunks(hw)).enumerate().take(n * c) {
            let ch = i % c;
            for (o, &v) in o.iter_mut().zip(p) {
                *o = v * scale[ch] + shift[ch];
            }
        }
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = scale.dim(0)?;
        let dx = grad.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?;
        let dscale = (grad * x)?.sum((0, 2, 3))?;
        let dshift = grad.sum((0, 2, 3))?;
        Ok((Some(dx), Some(dscale), Some(dshift)))
    }
}

/// Batch mean and biased variance per channel, without gradient.
pub fn batch_moments(x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let m = x.contiguous()?.apply_op1_no_bwd(&Moments)?;
    Ok((m.get(0)?, m.get(1)?))
}

/// `gamma · (x − μ_B) / sqrt(σ²_B + eps) + beta` using the batch statistics.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, Normalize { eps })
}

/// Per-channel `x · scale + shift` for `(N, C, H, W)` input.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)
}
