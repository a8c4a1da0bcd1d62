//! Gradient-weighted class activation maps and a leaf-overlap score.

use candle_core::{Tensor, Var, D};

use crate::classifier::{Classifier, ClassifierModel, Pretreatment};
use crate::dataset::DiseaseLabel;
use crate::image::{resize_image, Image, MaskImage};
use crate::{Error, Result};

/// Rectified, max-normalized class evidence at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceMap {
    pub heat: MaskImage,
    pub target_class: DiseaseLabel,
    /// Set when the rectified map was identically zero; `heat` is then all zeros.
    pub all_zero: bool,
}

/// A network split at the layer whose activations are attributed.
pub trait CamModel {
    /// Activations of the target layer, `(N, C, h, w)`, in inference mode.
    fn features(&self, x: &Tensor) -> Result<Tensor>;
    /// Pre-softmax class scores from those activations, `(N, classes)`.
    fn head(&self, features: &Tensor) -> Result<Tensor>;
}

impl CamModel for Classifier {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.features_t(x, false)
    }

    fn head(&self, features: &Tensor) -> Result<Tensor> {
        Classifier::head(self, features)
    }
}

/// Grad-CAM for every image of the batch `x` against its own target class.
pub fn gradcam_batch(model: &dyn CamModel, x: &Tensor, classes: &[DiseaseLabel]) -> Result<Vec<EvidenceMap>> {
    let (n, _, height, width) = x.dims4()?;
    if classes.len() != n {
        return Err(Error::InvalidInput(format!("{} target classes for a batch of {n}", classes.len())));
    }
    let acts = Var::from_tensor(&model.features(x)?.detach())?;
    let logits = model.head(acts.as_tensor())?;
    let idx = Tensor::from_vec(classes.iter().map(|c| c.index() as u32).collect::<Vec<_>>(), (n, 1), x.device())?;
    // samples do not interact in inference mode, so one backward pass serves the batch
    let score = logits.gather(&idx, D::Minus1)?.sum_all()?;
    let grads = score.backward()?;
    let grad = grads
        .get(acts.as_tensor())
        .cloned()
        .unwrap_or(acts.as_tensor().zeros_like()?);
    let weights = grad.mean_keepdim((2, 3))?;
    let cam = acts.as_tensor().broadcast_mul(&weights)?.sum(1)?.relu()?;
    let (_, h, w) = cam.dims3()?;
    let cam = cam.to_vec3::<f32>()?;
    cam.into_iter()
        .zip(classes)
        .map(|(rows, &target_class)| {
            let values: Vec<f32> = rows.into_iter().flatten().collect();
            finish_map(values, h, w, height, width, target_class)
        })
        .collect()
}

fn finish_map(values: Vec<f32>, h: usize, w: usize, height: usize, width: usize, target_class: DiseaseLabel) -> Result<EvidenceMap> {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if !(max > 0.0) {
        return Ok(EvidenceMap { heat: MaskImage::new(height, width, vec![0.0; height * width])?, target_class, all_zero: true });
    }
    let coarse = Image::new(h, w, 1, values.iter().map(|v| v / max).collect())?;
    let fine = resize_image(&coarse, height, width)?;
    // interpolation can miss the peak, so normalize again at full resolution
    let peak = fine.pixels().iter().copied().fold(0.0f32, f32::max);
    let heat = MaskImage::new(height, width, fine.pixels().iter().map(|v| v / peak).collect())?;
    Ok(EvidenceMap { heat, target_class, all_zero: false })
}

/// Evidence for `cls` on one image, using the network input the model would see.
pub fn gradcam_map(img: &Image, model: &ClassifierModel, pretreat: &dyn Pretreatment, cls: DiseaseLabel) -> Result<EvidenceMap> {
    Ok(gradcam_images(std::slice::from_ref(img), model, pretreat, &[cls])?.remove(0))
}

/// Batched [`gradcam_map`]; maps are at the classifier's input resolution.
pub fn gradcam_images(
    images: &[Image],
    model: &ClassifierModel,
    pretreat: &dyn Pretreatment,
    classes: &[DiseaseLabel],
) -> Result<Vec<EvidenceMap>> {
    let prepared = model.prepare(images, pretreat)?;
    let net = model.network();
    let device = net.store().device().clone();
    let mut out = Vec::with_capacity(images.len());
    for (chunk, cls) in prepared.chunks(16).zip(classes.chunks(16)) {
        let x = Image::batch_tensor(&chunk.iter().collect::<Vec<_>>(), &device)?;
        out.extend(gradcam_batch(net, &x, cls)?);
    }
    Ok(out)
}

/// Share of total heat that falls inside `mask`; 0 for an all-zero map.
pub fn overlap_score(map: &EvidenceMap, mask: &MaskImage) -> Result<f64> {
    if map.heat.dims() != mask.dims() {
        return Err(Error::InvalidInput(format!("heat map {:?} and mask {:?} differ in size", map.heat.dims(), mask.dims())));
    }
    if !mask.is_binary() {
        return Err(Error::InvalidInput("overlap needs a binary mask".into()));
    }
    let (mut inside, mut total) = (0f64, 0f64);
    for (&h, &m) in map.heat.values().iter().zip(mask.values()) {
        total += h as f64;
        inside += (h * m) as f64;
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

/// Input image blended with the heat rendered as a red-to-yellow ramp.
pub fn overlay(img: &Image, map: &EvidenceMap, alpha: f32) -> Result<Image> {
    if img.dims() != map.heat.dims() || img.channels() != 3 {
        return Err(Error::InvalidInput(format!("overlay needs an RGB image of size {:?}", map.heat.dims())));
    }
    Ok(Image::from_fn(img.height(), img.width(), 3, |y, x, c| {
        let h = map.heat.get(y, x);
        let color = [h.min(0.5) * 2.0, (h - 0.5).max(0.0) * 2.0, 0.0][c];
        let a = alpha * h;
        img.get(y, x, c) * (1.0 - a) + color * a
    }))
}
