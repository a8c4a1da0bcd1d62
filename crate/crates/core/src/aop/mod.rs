//! The segmentation pretreatment network: a U-net generator with
//! resize-convolution upsampling, a patch discriminator, adversarial training,
//! and inference that turns a raw photograph into a background-free,
//! brightness-calibrated image.

mod discriminator;
mod generator;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MaskImage};

pub use discriminator::{patch_grid_size, Discriminator};
pub use generator::Generator;
pub use model::{evaluate_segmentation, pretreat, AopModel, Segmenter, SegmentationEval};
pub use train::{generator_objective, train_aop, AopRunSpec, AopTrainer, EpochLosses, GeneratorObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    RgbImage,
    ProbabilityMap,
}

impl OutputMode {
    pub fn channels(self) -> usize {
        match self {
            OutputMode::RgbImage => 3,
            OutputMode::ProbabilityMap => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentLoss {
    Mae,
    Ssim,
}

/// The three pretreatment variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AopVariant {
    /// Probability map trained with MAE against the mask; thresholded at inference.
    #[serde(rename = "MAE_prob")]
    MaeProb,
    /// RGB output trained with MAE against the masked image.
    #[serde(rename = "MAE")]
    Mae,
    /// RGB output trained with SSIM against the masked image.
    #[serde(rename = "SSIM")]
    Ssim,
}

impl AopVariant {
    pub const ALL: [AopVariant; 3] = [AopVariant::MaeProb, AopVariant::Mae, AopVariant::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            AopVariant::MaeProb => "MAE_prob",
            AopVariant::Mae => "MAE",
            AopVariant::Ssim => "SSIM",
        }
    }

    pub fn content_loss(self) -> ContentLoss {
        match self {
            AopVariant::MaeProb | AopVariant::Mae => ContentLoss::Mae,
            AopVariant::Ssim => ContentLoss::Ssim,
        }
    }

    pub fn output_mode(self) -> OutputMode {
        match self {
            AopVariant::MaeProb => OutputMode::ProbabilityMap,
            AopVariant::Mae | AopVariant::Ssim => OutputMode::RgbImage,
        }
    }
}

impl fmt::Display for AopVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AopVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown AOP variant {s:?} (expected MAE_prob, MAE or SSIM)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    /// Number of stride-2 encoder stages (and of resize-conv decoder stages).
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { depth: 8, base_channels: 64, max_channels: 512 }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::InvalidParameter(format!("invalid generator spec {self:?}")));
        }
        Ok(())
    }

    /// Encoder channel widths, doubling per stage and capped.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth).map(|i| (self.base_channels << i.min(30)).min(self.max_channels)).collect()
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    /// Total convolution layers; all but the last two use stride 2.
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { depth: 5, base_channels: 64, max_channels: 512 }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::InvalidParameter(format!("invalid discriminator spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfigAop {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight λ on the content loss in the generator objective.
    pub content_weight: f64,
}

impl Default for TrainConfigAop {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, batch_size: 16, epochs: 100, content_weight: 100.0 }
    }
}

impl TrainConfigAop {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(self.beta1 > 0.0 && self.beta1 < 1.0)
            || !(self.beta2 > 0.0 && self.beta2 < 1.0)
            || self.batch_size == 0
            || self.epochs == 0
            || !(self.content_weight >= 0.0)
        {
            return Err(Error::InvalidParameter(format!("invalid AOP training config {self:?}")));
        }
        Ok(())
    }
}

/// Inference-time settings stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSettings {
    /// Square working resolution fed to the generator.
    pub working_size: usize,
    /// Threshold turning the probability map into a mask.
    pub mask_threshold: f32,
    /// A pixel of an RGB output counts as leaf when its brightest channel reaches this value.
    pub rgb_mask_threshold: f32,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        Self { working_size: 256, mask_threshold: 0.5, rgb_mask_threshold: 0.15 }
    }
}

/// Binary mask with `1` wherever `prob >= t`.
pub fn threshold_mask(prob: &MaskImage, t: f32) -> Result<MaskImage> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold must lie in (0,1), got {t}")));
    }
    Ok(prob.binarize(t))
}

/// Pixelwise product of an image with a binary mask; background becomes exactly 0.
pub fn apply_mask(img: &Image, mask: &MaskImage) -> Result<Image> {
    if img.dims() != mask.dims() {
        return Err(Error::InvalidInput(format!("image {:?} and mask {:?} differ", img.dims(), mask.dims())));
    }
    if !mask.is_binary() {
        return Err(Error::InvalidInput("apply_mask needs a binary mask".into()));
    }
    Ok(Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        if mask.get(y, x) == 1.0 {
            img.get(y, x, c)
        } else {
            0.0
        }
    }))
}

/// Leaf mask from an RGB generator output.
pub fn mask_from_rgb(img: &Image, threshold: f32) -> MaskImage {
    MaskImage::from_fn(img.height(), img.width(), |y, x| {
        (0..img.channels()).map(|c| img.get(y, x, c)).fold(0.0f32, f32::max) >= threshold
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in AopVariant::ALL {
            assert_eq!(v.name().parse::<AopVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("MSE".parse::<AopVariant>().is_err());
        assert_eq!(AopVariant::MaeProb.output_mode(), OutputMode::ProbabilityMap);
        assert_eq!(AopVariant::Ssim.content_loss(), ContentLoss::Ssim);
    }

    #[test]
    fn threshold_cases() {
        let p = MaskImage::new(1, 3, vec![0.6, 0.5, 0.49]).unwrap();
        let m = threshold_mask(&p, 0.5).unwrap();
        assert_eq!(m.values(), &[1.0, 1.0, 0.0]);
        assert_eq!(threshold_mask(&m, 0.5).unwrap(), m);
        let all = MaskImage::new(2, 2, vec![0.6; 4]).unwrap();
        assert!(threshold_mask(&all, 0.5).unwrap().values().iter().all(|&v| v == 1.0));
        assert!(threshold_mask(&p, 0.0).is_err());
        assert!(threshold_mask(&p, 1.0).is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let img = Image::from_fn(3, 3, 3, |y, x, c| (y + x + c) as f32 / 10.0);
        assert_eq!(apply_mask(&img, &MaskImage::filled(3, 3, true)).unwrap(), img);
        assert!(apply_mask(&img, &MaskImage::filled(3, 3, false)).unwrap().pixels().iter().all(|&v| v == 0.0));
        let m = MaskImage::from_fn(3, 3, |y, x| y == x);
        let once = apply_mask(&img, &m).unwrap();
        assert_eq!(apply_mask(&once, &m).unwrap(), once);
        assert!(apply_mask(&img, &MaskImage::filled(2, 3, true)).is_err());
    }

    #[test]
    fn encoder_widths_double_and_cap() {
        let s = GeneratorSpec::default();
        assert_eq!(s.encoder_channels(), vec![64, 128, 256, 512, 512, 512, 512, 512]);
        assert_eq!(s.size_multiple(), 256);
    }
}
