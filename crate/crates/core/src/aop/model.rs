use candle_core::Device;

use super::{apply_mask, mask_from_rgb, threshold_mask, AopVariant, Generator, GeneratorSpec, InferenceSettings, OutputMode};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::image::{center_crop, center_crop_square, resize_image, resize_mask, Image, MaskImage, SegmentationPair};
use crate::metrics::{PixelCounts, SegmentationScores};
use crate::seeds;

/// Images processed per generator forward pass at inference.
const INFERENCE_BATCH: usize = 16;

/// Anything that turns photographs into binary leaf masks.
pub trait Segmenter {
    /// Square side the segmenter works at.
    fn working_size(&self) -> usize;
    fn segment(&self, images: &[Image]) -> Result<Vec<MaskImage>>;
}

/// A trained generator in inference mode.
pub struct AopModel {
    variant: AopVariant,
    generator: Generator,
    settings: InferenceSettings,
    config_hash: String,
    epoch: usize,
}

impl AopModel {
    pub fn from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Aop {
            return Err(Error::Checkpoint("expected an AOP checkpoint".into()));
        }
        let variant: AopVariant = ckpt.meta_json("variant")?;
        let spec: GeneratorSpec = ckpt.meta_json("generator_spec")?;
        let settings: InferenceSettings = ckpt.meta_json("inference")?;
        if settings.working_size % spec.size_multiple() != 0 {
            return Err(Error::Checkpoint(format!(
                "working size {} is not divisible by {}",
                settings.working_size,
                spec.size_multiple()
            )));
        }
        // weights are overwritten immediately, the seed only fixes shapes
        let mut rng = seeds::rng(0, "aop-load", 0);
        let generator = Generator::new(spec, variant.output_mode(), device, &mut rng)?;
        generator.store().load(&ckpt.section("generator"))?;
        Ok(Self { variant, generator, settings, config_hash: ckpt.config_hash.clone(), epoch: ckpt.epoch })
    }

    pub fn variant(&self) -> AopVariant {
        self.variant
    }

    pub fn settings(&self) -> &InferenceSettings {
        &self.settings
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Identifies this pretreatment for classifier checkpoints.
    pub fn tag(&self) -> String {
        format!("aop:{}:{}", self.variant, self.config_hash)
    }

    /// Center window of the working size, or a square crop scaled up when the image is smaller.
    pub fn to_working(&self, img: &Image) -> Result<Image> {
        let s = self.settings.working_size;
        if img.height() >= s && img.width() >= s {
            center_crop(img, s)
        } else {
            resize_image(&center_crop_square(img), s, s)
        }
    }

    /// Raw generator outputs for images already at the working size.
    pub fn generate(&self, images: &[Image]) -> Result<Vec<Image>> {
        let device = self.generator.store().device().clone();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_BATCH) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let y = self.generator.forward_t(&Image::batch_tensor(&refs, &device)?, false)?;
            for i in 0..chunk.len() {
                out.push(Image::from_tensor(&y.get(i)?)?);
            }
        }
        Ok(out)
    }

    fn mask_of(&self, output: &Image) -> Result<MaskImage> {
        match self.generator.output_mode() {
            OutputMode::ProbabilityMap => threshold_mask(&MaskImage::from_image(output)?, self.settings.mask_threshold),
            OutputMode::RgbImage => Ok(mask_from_rgb(output, self.settings.rgb_mask_threshold)),
        }
    }

    /// Pretreated images at the working size.
    pub fn pretreat_batch(&self, images: &[Image]) -> Result<Vec<Image>> {
        let working = images.iter().map(|i| self.to_working(i)).collect::<Result<Vec<_>>>()?;
        let outputs = self.generate(&working)?;
        working
            .iter()
            .zip(outputs)
            .map(|(w, o)| match self.variant {
                AopVariant::MaeProb => apply_mask(w, &self.mask_of(&o)?),
                AopVariant::Mae | AopVariant::Ssim => Ok(o),
            })
            .collect()
    }
}

impl Segmenter for AopModel {
    fn working_size(&self) -> usize {
        self.settings.working_size
    }

    fn segment(&self, images: &[Image]) -> Result<Vec<MaskImage>> {
        self.generate(images)?.iter().map(|o| self.mask_of(o)).collect()
    }
}

/// Background-free, brightness-calibrated version of `img` at `out_size`.
pub fn pretreat(img: &Image, model: &AopModel, out_size: usize) -> Result<Image> {
    let out = model.pretreat_batch(std::slice::from_ref(img))?.remove(0);
    resize_image(&out, out_size, out_size)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationEval {
    pub counts: PixelCounts,
    pub scores: SegmentationScores,
    pub images: usize,
}

fn fit_pair(pair: &SegmentationPair, size: usize) -> Result<(Image, MaskImage)> {
    let (h, w) = pair.image.dims();
    if h >= size && w >= size {
        let img = center_crop(&pair.image, size)?;
        let mask = pair.mask.crop((h - size) / 2, (w - size) / 2, size, size)?;
        Ok((img, mask))
    } else {
        Ok((resize_image(&pair.image, size, size)?, resize_mask(&pair.mask, size, size)?))
    }
}

/// Pixel counts pooled over all pairs, then precision, recall and F1.
pub fn evaluate_segmentation(pairs: &[SegmentationPair], segmenter: &dyn Segmenter) -> Result<SegmentationEval> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no test pairs".into()));
    }
    let size = segmenter.working_size();
    let mut counts = PixelCounts::default();
    for chunk in pairs.chunks(INFERENCE_BATCH) {
        let fitted = chunk.iter().map(|p| fit_pair(p, size)).collect::<Result<Vec<_>>>()?;
        let images: Vec<Image> = fitted.iter().map(|(i, _)| i.clone()).collect();
        let preds = segmenter.segment(&images)?;
        for (pred, (_, truth)) in preds.iter().zip(&fitted) {
            counts.add(PixelCounts::from_masks(pred, truth)?);
        }
    }
    Ok(SegmentationEval { counts, scores: counts.scores(), images: pairs.len() })
}
