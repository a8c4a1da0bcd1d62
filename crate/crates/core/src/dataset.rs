//! On-disk dataset ingestion and splitting.
//!
//! Segmentation layout: `root/images/<name>.<ext>` with `root/masks/<name>.png`.
//! Classification layout: `root/<split>/<ClassName>/<name>.<ext>`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{center_crop_square, resize_image, resize_mask, Image, MaskImage, SegmentationPair};

pub const SUPPORTED_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// The eight diagnosis categories. The discriminant is the stable class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiseaseLabel {
    Mysv = 0,
    Zymv = 1,
    Cmv = 2,
    Wmv = 3,
    BrownSpot = 4,
    DownyMildew = 5,
    PowderyMildew = 6,
    Healthy = 7,
}

impl DiseaseLabel {
    pub const COUNT: usize = 8;

    pub const ALL: [DiseaseLabel; 8] = [
        DiseaseLabel::Mysv,
        DiseaseLabel::Zymv,
        DiseaseLabel::Cmv,
        DiseaseLabel::Wmv,
        DiseaseLabel::BrownSpot,
        DiseaseLabel::DownyMildew,
        DiseaseLabel::PowderyMildew,
        DiseaseLabel::Healthy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Directory name used in the classification layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            DiseaseLabel::Mysv => "MYSV",
            DiseaseLabel::Zymv => "ZYMV",
            DiseaseLabel::Cmv => "CMV",
            DiseaseLabel::Wmv => "WMV",
            DiseaseLabel::BrownSpot => "BrownSpot",
            DiseaseLabel::DownyMildew => "DownyMildew",
            DiseaseLabel::PowderyMildew => "PowderyMildew",
            DiseaseLabel::Healthy => "Healthy",
        }
    }
}

impl fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DiseaseLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.dir_name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown disease class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Training,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Training, Split::Validation, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|sp| sp.dir_name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown split {s:?}")))
    }
}

/// A classification image with its label and split. Fields are fixed at ingestion.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    image: Image,
    label: DiseaseLabel,
    split: Split,
    path: PathBuf,
}

impl LabeledExample {
    pub fn new(image: Image, label: DiseaseLabel, split: Split, path: PathBuf) -> Self {
        Self { image, label, split, path }
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn label(&self) -> DiseaseLabel {
        self.label
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Path relative to the dataset root, e.g. `test/CMV/img_0001.png`.
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Same example with a different image (used for pretreated copies).
    pub fn with_image(&self, image: Image) -> Self {
        Self { image, label: self.label, split: self.split, path: self.path.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub seg_train_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { seg_train_fraction: 0.8, rng_seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.seg_train_fraction > 0.0 && self.seg_train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "seg_train_fraction must lie in (0,1), got {}",
                self.seg_train_fraction
            )));
        }
        Ok(())
    }

    pub fn train_count(&self, total: usize) -> usize {
        ((total as f64) * self.seg_train_fraction).round() as usize
    }
}

/// Deterministically partitions `items` into `(train, test)`.
pub fn split_items<T>(items: Vec<T>, spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    spec.validate()?;
    let n_train = spec.train_count(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.rng_seed));
    let mut is_train = vec![false; items.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(items.len() - n_train);
    for (item, to_train) in items.into_iter().zip(is_train) {
        if to_train {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct SegmentationSplit {
    pub train: Vec<SegmentationPair>,
    pub test: Vec<SegmentationPair>,
    pub train_names: Vec<String>,
    pub test_names: Vec<String>,
}

/// Loads `root/images` + `root/masks`, center-crops and resizes every pair to
/// `size × size`, and splits by `spec`.
pub fn load_segmentation_dataset(root: &Path, spec: &SplitSpec, size: usize) -> Result<SegmentationSplit> {
    spec.validate()?;
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let mut named = Vec::new();
    for path in list_files(&images_dir)? {
        if !has_supported_extension(&path) {
            log::warn!("skipping {}: unsupported extension", path.display());
            continue;
        }
        let stem = file_stem(&path)?;
        let mask_path = masks_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::Ingestion { path: path.clone(), reason: format!("no mask at {}", mask_path.display()) });
        }
        let image = Image::load(&path)?;
        let mask = MaskImage::load_binary(&mask_path)?;
        if image.dims() != mask.dims() {
            return Err(Error::Ingestion {
                path: mask_path,
                reason: format!("mask {:?} does not match image {:?}", mask.dims(), image.dims()),
            });
        }
        let pair = prepare_pair(&image, &mask, size)?;
        named.push((stem, pair));
    }
    let (train, test) = split_items(named, spec)?;
    let (train_names, train) = train.into_iter().unzip();
    let (test_names, test) = test.into_iter().unzip();
    Ok(SegmentationSplit { train, test, train_names, test_names })
}

/// Applies the same center crop and resize to an image and its mask.
pub fn prepare_pair(image: &Image, mask: &MaskImage, size: usize) -> Result<SegmentationPair> {
    let img = resize_image(&center_crop_square(image), size, size)?;
    let side = mask.height().min(mask.width());
    let m = mask.crop((mask.height() - side) / 2, (mask.width() - side) / 2, side, side)?;
    SegmentationPair::new(img, resize_mask(&m, size, size)?)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    /// `counts[split][class]`
    pub counts: BTreeMap<Split, BTreeMap<DiseaseLabel, usize>>,
    pub skipped: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl IngestReport {
    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|m| m.values()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationDataset {
    pub examples: Vec<LabeledExample>,
    pub report: IngestReport,
}

impl ClassificationDataset {
    pub fn split(&self, split: Split) -> Vec<LabeledExample> {
        self.examples.iter().filter(|e| e.split() == split).cloned().collect()
    }
}

/// Ingests every supported file under `root/<split>/<ClassName>/`, resized to `size × size`.
pub fn load_classification_dataset(root: &Path, size: usize) -> Result<ClassificationDataset> {
    let mut report = IngestReport::default();
    let mut examples = Vec::new();
    for split_dir in list_dirs(root)? {
        let split_name = dir_name(&split_dir)?;
        let split: Split = split_name.parse().map_err(|_| Error::Ingestion {
            path: split_dir.clone(),
            reason: format!("unknown split directory {split_name:?}"),
        })?;
        let per_class = report.counts.entry(split).or_default();
        for label in DiseaseLabel::ALL {
            per_class.insert(label, 0);
        }
        for class_dir in list_dirs(&split_dir)? {
            let class_name = dir_name(&class_dir)?;
            let label: DiseaseLabel = class_name.parse().map_err(|_| Error::Ingestion {
                path: class_dir.clone(),
                reason: format!("unknown class directory {class_name:?}"),
            })?;
            for path in list_files(&class_dir)? {
                if !has_supported_extension(&path) {
                    log::warn!("skipping {}: unsupported extension", path.display());
                    report.skipped.push(path);
                    continue;
                }
                let image = resize_image(&Image::load(&path)?, size, size)?;
                let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
                examples.push(LabeledExample::new(image, label, split, rel));
                *per_class.entry(label).or_default() += 1;
            }
        }
    }
    if let Some(train) = report.counts.get(&Split::Training) {
        for (label, n) in train {
            if *n == 0 {
                report.warnings.push(format!("training split has no {label} examples"));
            }
        }
    }
    Ok(ClassificationDataset { examples, report })
}

fn has_supported_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Ingestion { path: path.to_path_buf(), reason: "non-UTF-8 file name".into() })
}

fn dir_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Ingestion { path: path.to_path_buf(), reason: "non-UTF-8 directory name".into() })
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Every supported image below `dir`, depth first, in sorted order.
pub fn find_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for sub in list_dirs(dir)? {
        out.extend(find_images(&sub)?);
    }
    out.extend(list_files(dir)?.into_iter().filter(|p| has_supported_extension(p)));
    Ok(out)
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    sorted_entries(dir, false)
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    sorted_entries(dir, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_rgb(path: &Path, w: u32, h: u32, v: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(w, h, image::Rgb([v, v / 2, 255 - v])).save(path).unwrap();
    }

    fn write_mask(path: &Path, w: u32, h: u32) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_fn(w, h, |x, _| image::Luma([if x < w / 2 { 255 } else { 0 }])).save(path).unwrap();
    }

    fn seg_root(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n {
            write_rgb(&dir.path().join(format!("images/p{i:02}.png")), 12, 10, (i * 20) as u8);
            write_mask(&dir.path().join(format!("masks/p{i:02}.png")), 12, 10);
        }
        dir
    }

    #[test]
    fn label_encoding_is_stable() {
        for (i, l) in DiseaseLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(l.dir_name().parse::<DiseaseLabel>().unwrap(), *l);
        }
        assert_eq!(DiseaseLabel::Healthy.index(), 7);
    }

    #[test]
    fn ten_pairs_split_eight_two() {
        let dir = seg_root(10);
        let spec = SplitSpec { seg_train_fraction: 0.8, rng_seed: 7 };
        let split = load_segmentation_dataset(dir.path(), &spec, 16).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (8, 2));
        for n in &split.test_names {
            assert!(!split.train_names.contains(n));
        }
        assert!(split.train.iter().all(|p| p.image.dims() == (16, 16) && p.mask.is_binary()));
        let again = load_segmentation_dataset(dir.path(), &spec, 16).unwrap();
        assert_eq!(split.train_names, again.train_names);
    }

    #[test]
    fn paper_scale_cardinality() {
        let spec = SplitSpec { seg_train_fraction: 0.8, rng_seed: 1 };
        let (a, b) = split_items((0..8000).collect::<Vec<_>>(), &spec).unwrap();
        assert_eq!((a.len(), b.len()), (6400, 1600));
    }

    #[test]
    fn missing_mask_names_the_file() {
        let dir = seg_root(2);
        std::fs::remove_file(dir.path().join("masks/p01.png")).unwrap();
        let err = load_segmentation_dataset(dir.path(), &SplitSpec::default(), 8).unwrap_err();
        assert!(err.to_string().contains("p01"), "{err}");
    }

    #[test]
    fn non_binary_mask_rejected() {
        let dir = seg_root(1);
        image::GrayImage::from_pixel(12, 10, image::Luma([100])).save(dir.path().join("masks/p00.png")).unwrap();
        assert!(matches!(
            load_segmentation_dataset(dir.path(), &SplitSpec::default(), 8),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn classification_layout_ingests_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_rgb(&dir.path().join(format!("training/Healthy/h{i}.png")), 8, 8, 40);
        }
        std::fs::write(dir.path().join("training/Healthy/notes.txt"), "x").unwrap();
        let ds = load_classification_dataset(dir.path(), 6).unwrap();
        assert_eq!(ds.examples.len(), 3);
        assert!(ds.examples.iter().all(|e| e.label() == DiseaseLabel::Healthy && e.split() == Split::Training));
        assert!(ds.examples.iter().all(|e| e.image().dims() == (6, 6)));
        assert_eq!(ds.report.skipped.len(), 1);
        assert_eq!(ds.report.counts[&Split::Training][&DiseaseLabel::Healthy], 3);
        // seven other training classes are empty
        assert_eq!(ds.report.warnings.len(), 7);
    }

    #[test]
    fn unknown_class_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_rgb(&dir.path().join("test/Rust/a.png"), 4, 4, 10);
        assert!(matches!(load_classification_dataset(dir.path(), 4), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn fraction_out_of_range_rejected() {
        for f in [0.0, 1.0, -0.2, 1.5] {
            let spec = SplitSpec { seg_train_fraction: f, rng_seed: 0 };
            assert!(split_items(vec![1, 2, 3], &spec).is_err());
        }
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let spec = SplitSpec { seg_train_fraction: frac, rng_seed: seed };
            let (a, b) = split_items((0..n).collect::<Vec<_>>(), &spec).unwrap();
            prop_assert_eq!(a.len() + b.len(), n);
            let mut all: Vec<usize> = a.iter().chain(b.iter()).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn center_crop_is_idempotent(h in 1usize..20, w in 1usize..20) {
            let img = Image::from_fn(h, w, 1, |y, x, _| ((y * 13 + x) % 97) as f32 / 97.0);
            let once = center_crop_square(&img);
            prop_assert_eq!(center_crop_square(&once), once);
        }

        #[test]
        fn same_size_resize_is_identity(h in 1usize..12, w in 1usize..12) {
            let img = Image::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 3 + c) % 11) as f32 / 11.0);
            prop_assert_eq!(resize_image(&img, h, w).unwrap(), img);
        }
    }
}
