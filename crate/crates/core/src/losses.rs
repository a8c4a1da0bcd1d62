//! Differentiable objectives over `(N, C, H, W)` tensors.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped into `[EPS, 1 − EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Gaussian-window structural-similarity parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window_size: 11, window_sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::InvalidParameter(format!("SSIM window must be odd and >= 3, got {}", self.window_size)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.window_sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::InvalidParameter("SSIM constants must be positive".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Mean absolute error over every element.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::InvalidInput(format!("shape mismatch {:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Per-image SSIM, shape `(N,)`: Gaussian-weighted local statistics over valid
/// windows, averaged over window positions and channels.
pub fn ssim_per_image(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.dims() != y.dims() {
        return Err(Error::InvalidInput(format!("shape mismatch {:?} vs {:?}", x.dims(), y.dims())));
    }
    let (_, c, h, w) = x.dims4()?;
    if h < cfg.window_size || w < cfg.window_size {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            cfg.window_size
        )));
    }
    let (n, ws) = (x.dim(0)?, cfg.window_size);
    let (ho, wo) = (h - ws + 1, w - ws + 1);
    // valid-mode separable Gaussian blur as two banded matrix products
    let taps = cfg.taps();
    let band = |len: usize, out: usize| -> Result<Tensor> {
        let mut m = vec![0f64; len * out];
        for o in 0..out {
            for (t, &v) in taps.iter().enumerate() {
                m[(o + t) * out + o] = v;
            }
        }
        Ok(Tensor::from_vec(m, (len, out), x.device())?.to_dtype(x.dtype())?)
    };
    let kw = band(w, wo)?;
    let kh = band(h, ho)?.t()?.contiguous()?;
    let blur = |t: &Tensor| -> Result<Tensor> {
        let rows = t.reshape((n * c * h, w))?.matmul(&kw)?.reshape((n * c, h, wo))?;
        Ok(kh.broadcast_matmul(&rows)?.reshape((n, c, ho, wo))?)
    };
    let mu_x = blur(x)?;
    let mu_y = blur(y)?;
    let mu_xx = (&mu_x * &mu_x)?;
    let mu_yy = (&mu_y * &mu_y)?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (blur(&(x * x)?)? - &mu_xx)?;
    let var_y = (blur(&(y * y)?)? - &mu_yy)?;
    let cov = (blur(&(x * y)?)? - &mu_xy)?;
    let num = (((&mu_xy * 2.0)? + cfg.c1())? * ((&cov * 2.0)? + cfg.c2())?)?;
    let den = (((&mu_xx + &mu_yy)? + cfg.c1())? * ((&var_x + &var_y)? + cfg.c2())?)?;
    Ok((num / den)?.mean((1, 2, 3))?)
}

/// Batch-mean SSIM as a scalar tensor.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    Ok(ssim_per_image(x, y, cfg)?.mean_all()?)
}

/// `1 − SSIM`.
pub fn ssim_loss(pred: &Tensor, target: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    Ok(ssim(pred, target, cfg)?.affine(-1.0, 1.0)?)
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// Generator term `−mean log D(fake)`.
pub fn generator_adversarial(d_fake: &Tensor) -> Result<Tensor> {
    Ok(clamp_prob(d_fake)?.log()?.mean_all()?.neg()?)
}

/// Discriminator loss `−mean log D(real) − mean log(1 − D(fake))`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = clamp_prob(d_real)?.log()?.mean_all()?;
    let fake = clamp_prob(d_fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// Mean cross-entropy between logits `(N, K)` and class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let t = Tensor::new(targets, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &t)?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
