//! Image-level losses and evaluation metrics.

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::dataset::DiseaseLabel;
use crate::error::{Error, Result};
use crate::image::{Image, MaskImage};
use crate::losses::{self, SsimConfig};

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mae_loss(pred: &Image, target: &Image) -> Result<f64> {
    check_same_shape(pred, target)?;
    let sum: f64 = pred.pixels().iter().zip(target.pixels()).map(|(p, t)| (*p as f64 - *t as f64).abs()).sum();
    Ok(sum / pred.pixels().len() as f64)
}

/// Structural similarity in double precision.
pub fn ssim(x: &Image, y: &Image, cfg: &SsimConfig) -> Result<f64> {
    check_same_shape(x, y)?;
    let dev = Device::Cpu;
    let tx = x.to_tensor(&dev)?.to_dtype(DType::F64)?.unsqueeze(0)?;
    let ty = y.to_tensor(&dev)?.to_dtype(DType::F64)?.unsqueeze(0)?;
    losses::scalar(&losses::ssim(&tx, &ty, cfg)?)
}

pub fn ssim_loss(pred: &Image, target: &Image, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim(pred, target, cfg)?)
}

/// `(g_adv, d_loss)` for discriminator patch probabilities.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidInput("empty discriminator output".into()));
    }
    let clamp = |p: f64| p.clamp(losses::PROB_EPS, 1.0 - losses::PROB_EPS);
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(clamp(p))).sum::<f64>() / v.len() as f64;
    let g_adv = -mean(d_fake, &|p| p.ln());
    let d_loss = -mean(d_real, &|p| p.ln()) - mean(d_fake, &|p| (1.0 - p).ln());
    Ok((g_adv, d_loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Raw pixel counts, so scores can be pooled over a whole test set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelCounts {
    pub fn from_masks(pred: &MaskImage, truth: &MaskImage) -> Result<Self> {
        if !pred.is_binary() || !truth.is_binary() {
            return Err(Error::InvalidInput("precision/recall need binary masks".into()));
        }
        if pred.dims() != truth.dims() {
            return Err(Error::InvalidInput(format!("mask shapes differ: {:?} vs {:?}", pred.dims(), truth.dims())));
        }
        let mut c = PixelCounts::default();
        for (&p, &t) in pred.values().iter().zip(truth.values()) {
            match (p == 1.0, t == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: PixelCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Empty denominators score 0.
    pub fn scores(&self) -> SegmentationScores {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        SegmentationScores { precision, recall, f1: f1_score(precision, recall) }
    }
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn precision_recall_f1(pred: &MaskImage, truth: &MaskImage) -> Result<SegmentationScores> {
    Ok(PixelCounts::from_masks(pred, truth)?.scores())
}

fn check_predictions(preds: &[DiseaseLabel], truths: &[DiseaseLabel]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} labels", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[DiseaseLabel], truths: &[DiseaseLabel]) -> Result<f64> {
    check_predictions(preds, truths)?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; DiseaseLabel::COUNT]; DiseaseLabel::COUNT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..DiseaseLabel::COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: DiseaseLabel) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }
}

pub fn confusion_matrix(preds: &[DiseaseLabel], truths: &[DiseaseLabel]) -> Result<ConfusionMatrix> {
    check_predictions(preds, truths)?;
    let mut counts = [[0u64; DiseaseLabel::COUNT]; DiseaseLabel::COUNT];
    for (p, t) in preds.iter().zip(truths) {
        counts[t.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use DiseaseLabel::*;

    #[test]
    fn mae_cases() {
        let a = Image::new(1, 2, 1, vec![0.2, 0.8]).unwrap();
        let b = Image::new(1, 2, 1, vec![0.4, 0.4]).unwrap();
        assert!((mae_loss(&a, &b).unwrap() - 0.3).abs() < 1e-7);
        assert_eq!(mae_loss(&a, &a).unwrap(), 0.0);
        let zeros = Image::constant(3, 3, 3, 0.0);
        let ones = Image::constant(3, 3, 3, 1.0);
        assert_eq!(mae_loss(&zeros, &ones).unwrap(), 1.0);
        assert!(mae_loss(&a, &zeros).is_err());
    }

    #[test]
    fn adversarial_midpoint_and_saturation() {
        let (g, d) = adversarial_losses(&[0.5; 4], &[0.5; 4]).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g - 2f64.ln()).abs() < 1e-12);
        let eps = losses::PROB_EPS;
        let (g, d) = adversarial_losses(&[1.0 - eps], &[eps]).unwrap();
        assert!(d < 1e-6);
        assert!((g + eps.ln()).abs() < 1e-9);
        // out-of-range inputs are clamped, not rejected
        let (g, _) = adversarial_losses(&[1.5], &[0.0]).unwrap();
        assert!((g + eps.ln()).abs() < 1e-9);
    }

    #[test]
    fn segmentation_scores() {
        let m = MaskImage::from_fn(4, 4, |y, x| y < 2 && x < 3);
        assert_eq!(
            precision_recall_f1(&m, &m).unwrap(),
            SegmentationScores { precision: 1.0, recall: 1.0, f1: 1.0 }
        );
        let empty = MaskImage::filled(4, 4, false);
        let s = precision_recall_f1(&empty, &m).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let prob = MaskImage::new(1, 1, vec![0.3]).unwrap();
        assert!(precision_recall_f1(&prob, &prob).is_err());
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let f = f1_score(0.984, 0.971);
        assert!((f - 0.977457).abs() < 1e-6);
        assert!((f - 0.977).abs() < 5e-4);
    }

    #[test]
    fn accuracy_cases() {
        let truths = [Mysv, Zymv, Cmv, Wmv, BrownSpot, DownyMildew, PowderyMildew, Healthy];
        assert_eq!(accuracy(&truths, &truths).unwrap(), 1.0);
        let mut half = truths;
        for p in half.iter_mut().take(4) {
            *p = Healthy;
        }
        assert_eq!(accuracy(&half, &truths).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[Cmv], &[]).is_err());
    }

    #[test]
    fn confusion_cases() {
        let truths = DiseaseLabel::ALL;
        let c = confusion_matrix(&truths, &truths).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(c.counts[i][j], u64::from(i == j));
            }
        }
        let c = confusion_matrix(&[PowderyMildew], &[Healthy]).unwrap();
        assert_eq!(c.counts[Healthy.index()][PowderyMildew.index()], 1);
        assert_eq!(c.trace(), 0);
        assert_eq!(c.total(), 1);
    }
}
