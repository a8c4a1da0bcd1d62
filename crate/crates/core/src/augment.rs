//! Online augmentation for the two training stages.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledExample;
use crate::error::{Error, Result};
use crate::image::{clamp_unit, Image, MaskImage, SegmentationPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    pub rotation_step_deg: f64,
    pub mirror: bool,
    pub crop_size: Option<usize>,
    pub gamma_choices: Vec<f64>,
}

impl AugmentationRecipe {
    /// Segmentation-stage recipe: right-angle rotations, mirroring, 256 crops, gamma in {0.8,…,2.2}.
    pub fn aop() -> Self {
        Self { rotation_step_deg: 90.0, mirror: true, crop_size: Some(256), gamma_choices: vec![0.8, 1.0, 1.5, 2.0, 2.2] }
    }

    /// Classifier-stage recipe: 10° rotations, mirroring, gamma in {0.5, 1.0, 1.5}.
    pub fn classifier() -> Self {
        Self { rotation_step_deg: 10.0, mirror: true, crop_size: None, gamma_choices: vec![0.5, 1.0, 1.5] }
    }

    /// No-op recipe.
    pub fn identity() -> Self {
        Self { rotation_step_deg: 360.0, mirror: false, crop_size: None, gamma_choices: vec![1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        let steps = 360.0 / self.rotation_step_deg;
        if !(self.rotation_step_deg > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rotation step {}° must divide 360",
                self.rotation_step_deg
            )));
        }
        if self.gamma_choices.is_empty() || self.gamma_choices.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma choices must be positive, got {:?}", self.gamma_choices)));
        }
        if self.crop_size == Some(0) {
            return Err(Error::InvalidParameter("crop size must be positive".into()));
        }
        Ok(())
    }

    /// All rotation angles the recipe can draw.
    pub fn angles(&self) -> Vec<f64> {
        let n = (360.0 / self.rotation_step_deg).round() as usize;
        (0..n).map(|k| k as f64 * self.rotation_step_deg).collect()
    }

    /// Draws one set of transform parameters for an `height × width` source.
    pub fn draw<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Result<AugmentDraw> {
        self.validate()?;
        let angles = self.angles();
        let angle_deg = angles[rng.random_range(0..angles.len())];
        let mirror = self.mirror && rng.random_bool(0.5);
        let gamma = *self.gamma_choices.choose(rng).expect("validated non-empty");
        // right-angle rotations swap the axes
        let (h, w) = if is_quarter_turn(angle_deg) && (angle_deg / 90.0).round() as i64 % 2 == 1 {
            (width, height)
        } else {
            (height, width)
        };
        let crop = match self.crop_size {
            Some(size) => Some(random_crop_offset(h, w, size, rng)?),
            None => None,
        };
        Ok(AugmentDraw { angle_deg, mirror, gamma, crop, crop_size: self.crop_size })
    }
}

/// One realized augmentation: rotation, then optional mirror, then optional crop, then gamma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub mirror: bool,
    pub gamma: f64,
    pub crop: Option<(usize, usize)>,
    pub crop_size: Option<usize>,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self { angle_deg: 0.0, mirror: false, gamma: 1.0, crop: None, crop_size: None }
    }

    /// Geometric part only (no gamma).
    pub fn apply_geometry(&self, img: &Image) -> Result<Image> {
        let mut out = rotate(img, self.angle_deg);
        if self.mirror {
            out = mirror(&out);
        }
        if let (Some((top, left)), Some(size)) = (self.crop, self.crop_size) {
            out = out.crop(top, left, size, size)?;
        }
        Ok(out)
    }

    /// Geometric part applied to a mask; non-right-angle rotations are re-binarized at 0.5.
    pub fn apply_geometry_mask(&self, mask: &MaskImage) -> Result<MaskImage> {
        let out = MaskImage::from_image(&self.apply_geometry(&mask.as_image())?)?;
        Ok(if mask.is_binary() && !out.is_binary() { out.binarize(0.5) } else { out })
    }
}

/// Pixelwise power law `x ↦ x^γ`. `γ = 1` returns an exact copy.
pub fn gamma_correct(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    Ok(img.map(|v| (v as f64).powf(gamma) as f32))
}

fn is_quarter_turn(angle_deg: f64) -> bool {
    angle_deg.rem_euclid(90.0) == 0.0
}

/// Counter-clockwise rotation about the image center. Right angles are exact
/// index permutations; other angles use bilinear sampling with zero padding
/// and keep the input dimensions.
pub fn rotate(img: &Image, angle_deg: f64) -> Image {
    let a = angle_deg.rem_euclid(360.0);
    if is_quarter_turn(a) {
        let mut out = img.clone();
        for _ in 0..(a / 90.0).round() as usize {
            out = rotate_quarter(&out);
        }
        return out;
    }
    rotate_bilinear(img, a)
}

fn rotate_quarter(img: &Image) -> Image {
    let (h, w) = img.dims();
    Image::from_fn(w, h, img.channels(), |y, x, c| img.get(x, w - 1 - y, c))
}

pub(crate) fn rotate_bilinear(img: &Image, angle_deg: f64) -> Image {
    let (h, w) = img.dims();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let fetch = |y: i64, x: i64, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            img.get(y as usize, x as usize, c) as f64
        }
    };
    Image::from_fn(h, w, img.channels(), |y, x, c| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = dx * cos - dy * sin + cx;
        let sy = dx * sin + dy * cos + cy;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let top = fetch(y0, x0, c) * (1.0 - fx) + fetch(y0, x0 + 1, c) * fx;
        let bottom = fetch(y0 + 1, x0, c) * (1.0 - fx) + fetch(y0 + 1, x0 + 1, c) * fx;
        clamp_unit((top * (1.0 - fy) + bottom * fy) as f32)
    })
}

/// Horizontal flip.
pub fn mirror(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, img.channels(), |y, x, c| img.get(y, w - 1 - x, c))
}

/// Uniform top-left offset for a `size × size` window.
pub fn random_crop_offset<R: Rng + ?Sized>(height: usize, width: usize, size: usize, rng: &mut R) -> Result<(usize, usize)> {
    if size == 0 || size > height.min(width) {
        return Err(Error::InvalidParameter(format!("crop size {size} does not fit {height}x{width}")));
    }
    Ok((rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
}

pub fn random_crop<R: Rng + ?Sized>(img: &Image, size: usize, rng: &mut R) -> Result<Image> {
    let (top, left) = random_crop_offset(img.height(), img.width(), size, rng)?;
    img.crop(top, left, size, size)
}

/// A segmentation training sample after augmentation.
#[derive(Debug, Clone)]
pub struct AopSample {
    /// Brightness-perturbed generator input.
    pub input: Image,
    /// Same geometry as `input`, original brightness.
    pub clean: Image,
    pub mask: MaskImage,
    pub draw: AugmentDraw,
}

pub fn augment_for_aop<R: Rng + ?Sized>(pair: &SegmentationPair, recipe: &AugmentationRecipe, rng: &mut R) -> Result<AopSample> {
    let draw = recipe.draw(pair.image.height(), pair.image.width(), rng)?;
    apply_aop_draw(pair, &draw)
}

pub fn apply_aop_draw(pair: &SegmentationPair, draw: &AugmentDraw) -> Result<AopSample> {
    let clean = draw.apply_geometry(&pair.image)?;
    let mask = draw.apply_geometry_mask(&pair.mask)?;
    let input = gamma_correct(&clean, draw.gamma)?;
    Ok(AopSample { input, clean, mask, draw: *draw })
}

pub fn augment_for_classifier<R: Rng + ?Sized>(ex: &LabeledExample, recipe: &AugmentationRecipe, rng: &mut R) -> Result<Image> {
    let img = ex.image();
    let draw = recipe.draw(img.height(), img.width(), rng)?;
    gamma_correct(&draw.apply_geometry(img)?, draw.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DiseaseLabel, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * 31 + x * 7 + c * 3) % 50) as f32 / 50.0)
    }

    #[test]
    fn gamma_values() {
        let img = Image::new(1, 2, 1, vec![0.5, 0.25]).unwrap();
        let sq = gamma_correct(&img, 2.0).unwrap();
        assert_eq!(sq.get(0, 0, 0), 0.25);
        let rt = gamma_correct(&img, 0.5).unwrap();
        assert_eq!(rt.get(0, 1, 0), 0.5);
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        assert!(matches!(gamma_correct(&img, 0.0), Err(Error::InvalidParameter(_))));
        assert!(gamma_correct(&img, -1.0).is_err());
    }

    #[test]
    fn quarter_turn_on_symbolic_grid() {
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let img = Image::new(2, 2, 1, vec![a, b, c, d]).unwrap();
        assert_eq!(rotate(&img, 90.0).pixels(), &[b, d, a, c]);
    }

    #[test]
    fn quarter_turn_matches_bilinear_path() {
        let img = sample_image(7, 7);
        let exact = rotate(&img, 90.0);
        let interp = rotate_bilinear(&img, 90.0);
        for (p, q) in exact.pixels().iter().zip(interp.pixels()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn four_quarter_turns_and_zero_are_identity() {
        let img = sample_image(5, 8);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate(&r, 90.0);
        }
        assert_eq!(r, img);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(rotate(&img, 90.0).dims(), (8, 5));
    }

    #[test]
    fn non_right_angle_pads_with_zero() {
        let img = Image::constant(9, 9, 1, 1.0);
        let r = rotate(&img, 45.0);
        assert_eq!(r.dims(), (9, 9));
        assert_eq!(r.get(0, 0, 0), 0.0);
        assert!((r.get(4, 4, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mirror_cases() {
        let img = Image::new(1, 2, 1, vec![0.1, 0.9]).unwrap();
        assert_eq!(mirror(&img).pixels(), &[0.9, 0.1]);
        let sym = Image::from_fn(3, 4, 1, |_, x, _| if x == 0 || x == 3 { 0.2 } else { 0.6 });
        assert_eq!(mirror(&sym), sym);
    }

    #[test]
    fn crop_offsets_and_determinism() {
        let img = sample_image(316, 316);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (t, l) = random_crop_offset(316, 316, 256, &mut rng).unwrap();
            assert!(t <= 60 && l <= 60);
        }
        let a = random_crop(&img, 256, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&img, 256, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.dims(), (256, 256));
        assert_eq!(a, b);
        let small = sample_image(20, 20);
        assert_eq!(random_crop(&small, 20, &mut rng).unwrap(), small);
        assert!(matches!(random_crop(&small, 21, &mut rng), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn identity_draw_leaves_aop_input_equal_to_target_source() {
        let pair = SegmentationPair::new(sample_image(16, 16), MaskImage::from_fn(16, 16, |y, _| y < 8)).unwrap();
        let draw = AugmentDraw { crop: Some((2, 3)), crop_size: Some(12), ..AugmentDraw::identity() };
        let s = apply_aop_draw(&pair, &draw).unwrap();
        assert_eq!(s.input, s.clean);
        assert_eq!(s.clean, pair.image.crop(2, 3, 12, 12).unwrap());
    }

    #[test]
    fn gamma_draws_cover_aop_choices_uniformly() {
        let recipe = AugmentationRecipe { crop_size: None, ..AugmentationRecipe::aop() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let g = recipe.draw(4, 4, &mut rng).unwrap().gamma;
            let i = recipe.gamma_choices.iter().position(|c| *c == g).unwrap();
            counts[i] += 1;
        }
        // multinomial: mean n/5, sd sqrt(n * p * (1 - p))
        let mean = n as f64 / 5.0;
        let sd = (n as f64 * 0.2 * 0.8).sqrt();
        for c in counts {
            assert!(c > 0);
            assert!((c as f64 - mean).abs() < 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn classifier_draws_stay_in_support_and_shape() {
        let recipe = AugmentationRecipe::classifier();
        let ex = LabeledExample::new(sample_image(24, 24), DiseaseLabel::Cmv, Split::Training, "x.png".into());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let d = recipe.draw(24, 24, &mut rng).unwrap();
            assert!([0.5, 1.0, 1.5].contains(&d.gamma));
            assert_eq!(d.angle_deg % 10.0, 0.0);
        }
        for _ in 0..20 {
            assert_eq!(augment_for_classifier(&ex, &recipe, &mut rng).unwrap().dims(), (24, 24));
        }
        assert_eq!(ex.label(), DiseaseLabel::Cmv);
        let id = augment_for_classifier(&ex, &AugmentationRecipe::identity(), &mut rng).unwrap();
        assert_eq!(&id, ex.image());
    }

    #[test]
    fn recipe_validation() {
        assert!(AugmentationRecipe::aop().validate().is_ok());
        assert!(AugmentationRecipe { rotation_step_deg: 7.0, ..AugmentationRecipe::aop() }.validate().is_err());
        assert!(AugmentationRecipe { gamma_choices: vec![1.0, 0.0], ..AugmentationRecipe::aop() }.validate().is_err());
    }
}
