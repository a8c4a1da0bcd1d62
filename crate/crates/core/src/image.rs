//! Pixel containers shared by every stage of the pipeline.
//!
//! Images are stored row-major, channel-interleaved (`H×W×C`) with values in
//! `[0, 1]`. Masks are single-channel maps of the same spatial size.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// Tolerance around `{0, 1}` accepted when reading a binary mask.
pub const MASK_BINARY_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("image must be non-empty, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width * channels
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    /// Builds an image from a function of `(row, col, channel)`; values are clamped into `[0,1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(clamp_unit(f(y, x, c)));
                }
            }
        }
        Self { height, width, channels, pixels }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Applies `f` to every pixel value, clamping the result into `[0,1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&v| clamp_unit(f(v))).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Copies the window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::InvalidInput(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            pixels.extend_from_slice(&self.pixels[start..start + width * c]);
        }
        Ok(Image { height, width, channels: c, pixels })
    }

    /// Channel-first tensor of shape `(C, H, W)`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, self.channels), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    /// Reads a `(C, H, W)` or `(1, C, H, W)` tensor back, clamping into `[0,1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::InvalidInput(format!("expected rank 3 tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t
            .to_dtype(candle_core::DType::F32)?
            .permute((1, 2, 0))?
            .contiguous()?
            .flatten_all()?
            .to_vec1()?;
        Image::new(h, w, c, data.into_iter().map(clamp_unit).collect())
    }

    /// Stacks images of equal shape into an `(N, C, H, W)` batch.
    pub fn batch_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            if img.height != first.height || img.width != first.width || img.channels != first.channels {
                return Err(Error::InvalidInput("batch images differ in shape".into()));
            }
            parts.push(img.to_tensor(device)?);
        }
        Ok(Tensor::stack(&parts, 0)?)
    }

    /// Loads an 8-bit RGB image file; values are divided by 255.
    pub fn load(path: &Path) -> Result<Image> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, 3, pixels)
    }

    /// Writes the image as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 3 {
            image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer size matches dimensions")
                .save(path)?;
        } else {
            image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer size matches dimensions")
                .save(path)?;
        }
        Ok(())
    }
}

/// Leaf-region map. Values lie in `[0,1]`; binary masks hold only `0` and `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    height: usize,
    width: usize,
    values: Vec<f32>,
    is_binary: bool,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "mask buffer of {} values does not match {height}x{width}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!("mask value {v} outside [0,1]")));
        }
        let is_binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self { height, width, values, is_binary })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self { height, width, values, is_binary: true }
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self::from_fn(height, width, |_, _| on)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_binary(&self) -> bool {
        self.is_binary
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn count_on(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<MaskImage> {
        let img = self.as_image().crop(top, left, height, width)?;
        Ok(MaskImage { height, width, values: img.pixels, is_binary: self.is_binary })
    }

    /// The mask viewed as a single-channel image (no copy of semantics, only of data).
    pub fn as_image(&self) -> Image {
        Image { height: self.height, width: self.width, channels: 1, pixels: self.values.clone() }
    }

    /// Rebuilds a mask from a single-channel image.
    pub fn from_image(img: &Image) -> Result<MaskImage> {
        if img.channels != 1 {
            return Err(Error::InvalidInput("mask image must have one channel".into()));
        }
        MaskImage::new(img.height, img.width, img.pixels.clone())
    }

    /// Maps every value to `1` when `>= threshold`, else `0`.
    pub fn binarize(&self, threshold: f32) -> MaskImage {
        MaskImage {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
            is_binary: true,
        }
    }

    pub fn complement(&self) -> MaskImage {
        MaskImage {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1.0 - v).collect(),
            is_binary: self.is_binary,
        }
    }

    /// Loads a single-channel 8-bit mask file (0 = background, 255 = leaf).
    /// Values further than [`MASK_BINARY_TOLERANCE`] from `{0,1}` are rejected.
    pub fn load_binary(path: &Path) -> Result<MaskImage> {
        let gray = image::open(path)?.to_luma8();
        let (w, h) = gray.dimensions();
        let mut values = Vec::with_capacity((w * h) as usize);
        for &raw in gray.as_raw() {
            let v = raw as f32 / 255.0;
            let snapped = if v <= MASK_BINARY_TOLERANCE {
                0.0
            } else if v >= 1.0 - MASK_BINARY_TOLERANCE {
                1.0
            } else {
                return Err(Error::Ingestion {
                    path: path.to_path_buf(),
                    reason: format!("mask value {raw} is not binary"),
                });
            };
            values.push(snapped);
        }
        MaskImage::new(h as usize, w as usize, values)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.as_image().save_png(path)
    }
}

/// An image with its pixel-level leaf annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPair {
    pub image: Image,
    pub mask: MaskImage,
}

impl SegmentationPair {
    pub fn new(image: Image, mask: MaskImage) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::InvalidInput(format!(
                "image {:?} and mask {:?} differ in size",
                image.dims(),
                mask.dims()
            )));
        }
        Ok(Self { image, mask })
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Square center crop with side `min(H, W)`. When the margin is odd the extra
/// row or column is dropped from the bottom or right.
pub fn center_crop_square(img: &Image) -> Image {
    let side = img.height.min(img.width);
    let top = (img.height - side) / 2;
    let left = (img.width - side) / 2;
    img.crop(top, left, side, side).expect("center window lies inside the image")
}

/// Centered window of the given size; same parity rule as [`center_crop_square`].
pub fn center_crop(img: &Image, size: usize) -> Result<Image> {
    if size > img.height || size > img.width {
        return Err(Error::InvalidParameter(format!(
            "center crop {size} larger than {}x{}",
            img.height, img.width
        )));
    }
    img.crop((img.height - size) / 2, (img.width - size) / 2, size, size)
}

/// Bilinear resize using half-pixel centers (`align_corners = false`).
pub fn resize_image(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidInput(format!("invalid resize target {target_h}x{target_w}")));
    }
    if (target_h, target_w) == img.dims() {
        return Ok(img.clone());
    }
    let ys = axis_weights(img.height, target_h);
    let xs = axis_weights(img.width, target_w);
    let c = img.channels;
    let mut out = Image { height: target_h, width: target_w, channels: c, pixels: vec![0.0; target_h * target_w * c] };
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.set(oy, ox, ch, clamp_unit(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Ok(out)
}

/// Resizes a mask bilinearly, re-binarizing at 0.5 when the input was binary.
pub fn resize_mask(mask: &MaskImage, target_h: usize, target_w: usize) -> Result<MaskImage> {
    let resized = MaskImage::from_image(&resize_image(&mask.as_image(), target_h, target_w)?)?;
    Ok(if mask.is_binary { resized.binarize(0.5) } else { resized })
}

fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |_, x, _| x as f32 / 1000.0)
    }

    fn row_ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, _, _| y as f32 / 1000.0)
    }

    #[test]
    fn center_crop_landscape_keeps_middle_columns() {
        let out = center_crop_square(&column_ramp(300, 400));
        assert_eq!(out.dims(), (300, 300));
        assert_eq!(out.get(0, 0, 0), 50.0 / 1000.0);
        assert_eq!(out.get(0, 299, 0), 349.0 / 1000.0);
    }

    #[test]
    fn center_crop_odd_margin_drops_bottom_row() {
        let out = center_crop_square(&row_ramp(5, 4));
        assert_eq!(out.dims(), (4, 4));
        let rows: Vec<f32> = (0..4).map(|y| out.get(y, 0, 0) * 1000.0).collect();
        assert_eq!(rows, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn center_crop_square_input_is_identity() {
        let img = Image::from_fn(316, 316, 3, |y, x, c| ((y * 7 + x * 3 + c) % 255) as f32 / 255.0);
        assert_eq!(center_crop_square(&img), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let out = resize_image(&Image::constant(316, 316, 3, 0.7), 224, 224).unwrap();
        assert_eq!(out.dims(), (224, 224));
        assert!(out.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn resize_two_by_two_matches_hand_weights() {
        // half-pixel sampling positions for 2 -> 4 are -0.25, 0.25, 0.75, 1.25, clamped into [0,1]
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_image(&img, 2, 4).unwrap();
        for y in 0..2 {
            let row: Vec<f32> = (0..4).map(|x| out.get(y, x, 0)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        assert!(matches!(
            resize_image(&Image::constant(4, 4, 1, 0.1), 0, 3),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(3, 5, 3, |y, x, c| (y + 2 * x + 3 * c) as f32 / 30.0);
        let t = img.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 3, 5]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_fn(4, 6, 3, |y, x, c| ((y * 31 + x * 17 + c * 5) % 256) as f32 / 255.0);
        img.save_png(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), img);
    }

    #[test]
    fn mask_loader_rejects_grey_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        image::GrayImage::from_raw(2, 1, vec![0, 128]).unwrap().save(&path).unwrap();
        assert!(matches!(MaskImage::load_binary(&path), Err(Error::Ingestion { .. })));
    }
}
