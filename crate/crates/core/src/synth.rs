//! Deterministic synthetic corpus with a controllable background confound.
//!
//! Every image is a green leaf blob on a procedural background texture. The
//! class is carried only by a symptom pattern painted inside the leaf. In the
//! training and validation splits the background is the class's canonical
//! texture with probability `ρ`; in the test split the confound is either
//! permuted across classes or replaced by textures never seen in training.
//!
//! Output layout under the corpus root:
//!
//! ```text
//! classification/<split>/<Class>/<name>.png
//! classification_masks/<split>/<Class>/<name>.png
//! segmentation/images/<name>.png
//! segmentation/masks/<name>.png
//! manifest.csv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DiseaseLabel, Split};
use crate::error::{Error, Result};
use crate::image::{Image, MaskImage};
use crate::seeds;

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const SEGMENTATION_SPLIT: &str = "segmentation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestBackgroundPolicy {
    /// Canonical textures permuted across classes by a seeded derangement.
    Shuffled,
    /// Textures from a pool never used in training or validation.
    HeldOutTextures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub training: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Training => self.training,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Images per class in each classification split.
    pub per_class_counts: SplitCounts,
    /// Number of image/mask pairs in the segmentation corpus.
    pub segmentation_pairs: usize,
    /// Probability that an image's background is its class's canonical texture.
    pub confound_strength: f64,
    pub test_background_policy: TestBackgroundPolicy,
    /// Per-image gamma range for the classification corpus; segmentation images use 1.
    pub gamma_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            per_class_counts: SplitCounts { training: 400, validation: 100, test: 100 },
            segmentation_pairs: 1000,
            confound_strength: 1.0,
            test_background_policy: TestBackgroundPolicy::Shuffled,
            gamma_range: (0.8, 1.25),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return Err(Error::InvalidParameter(format!("confound strength {} outside [0,1]", self.confound_strength)));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidParameter(format!("image size {} is too small", self.image_size)));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidParameter(format!("invalid gamma range {:?}", self.gamma_range)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- textures

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Checker { cell: f64 },
    Stripes { period: f64, angle_deg: f64 },
    Gradient { angle_deg: f64 },
    Noise { cell: f64 },
    Dots { spacing: f64, radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    pattern: Pattern,
    a: [f64; 3],
    b: [f64; 3],
}

const fn tex(pattern: Pattern, a: [f64; 3], b: [f64; 3]) -> Texture {
    Texture { pattern, a, b }
}

/// Canonical textures (one per class), then the distractor pool, then the held-out pool.
/// Sizes are in units of a 64-pixel image and scale with the image size.
const TEXTURES: [Texture; 16] = [
    tex(Pattern::Checker { cell: 8.0 }, [0.75, 0.2, 0.2], [0.15, 0.15, 0.45]),
    tex(Pattern::Stripes { period: 10.0, angle_deg: 45.0 }, [0.9, 0.55, 0.2], [0.45, 0.2, 0.5]),
    tex(Pattern::Gradient { angle_deg: 0.0 }, [0.2, 0.3, 0.8], [0.9, 0.6, 0.7]),
    tex(Pattern::Noise { cell: 6.0 }, [0.5, 0.45, 0.5], [0.22, 0.2, 0.28]),
    tex(Pattern::Dots { spacing: 8.0, radius: 2.5 }, [0.8, 0.2, 0.7], [0.1, 0.1, 0.3]),
    tex(Pattern::Stripes { period: 8.0, angle_deg: 0.0 }, [0.2, 0.5, 0.75], [0.6, 0.25, 0.35]),
    tex(Pattern::Checker { cell: 4.0 }, [0.55, 0.5, 0.8], [0.3, 0.1, 0.2]),
    tex(Pattern::Noise { cell: 12.0 }, [0.85, 0.4, 0.45], [0.35, 0.3, 0.6]),
    // distractors
    tex(Pattern::Gradient { angle_deg: 90.0 }, [0.3, 0.28, 0.3], [0.7, 0.5, 0.6]),
    tex(Pattern::Dots { spacing: 10.0, radius: 3.0 }, [0.9, 0.6, 0.3], [0.4, 0.15, 0.15]),
    tex(Pattern::Checker { cell: 6.0 }, [0.45, 0.45, 0.7], [0.7, 0.35, 0.3]),
    tex(Pattern::Noise { cell: 4.0 }, [0.6, 0.2, 0.4], [0.2, 0.3, 0.6]),
    // held out
    tex(Pattern::Stripes { period: 6.0, angle_deg: 90.0 }, [0.35, 0.2, 0.55], [0.8, 0.5, 0.5]),
    tex(Pattern::Gradient { angle_deg: 45.0 }, [0.15, 0.2, 0.5], [0.85, 0.45, 0.25]),
    tex(Pattern::Noise { cell: 8.0 }, [0.7, 0.65, 0.75], [0.4, 0.2, 0.3]),
    tex(Pattern::Checker { cell: 10.0 }, [0.9, 0.45, 0.6], [0.25, 0.3, 0.4]),
];

pub const CANONICAL_TEXTURES: std::ops::Range<usize> = 0..8;
pub const DISTRACTOR_TEXTURES: std::ops::Range<usize> = 8..12;
pub const HELD_OUT_TEXTURES: std::ops::Range<usize> = 12..16;

fn hash01(seed: u64, ix: i64, iy: i64) -> f64 {
    let v = seeds::derive(seed, "value-noise", (ix as u64).wrapping_mul(0x9E37_79B9) ^ (iy as u64).rotate_left(32));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = hash01(seed, ix, iy) * (1.0 - fx) + hash01(seed, ix + 1, iy) * fx;
    let bottom = hash01(seed, ix, iy + 1) * (1.0 - fx) + hash01(seed, ix + 1, iy + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Per-image draw of a texture: offsets and a small colour jitter.
struct TextureInstance {
    texture: Texture,
    scale: f64,
    offset: (f64, f64),
    noise_seed: u64,
    jitter: [f64; 3],
}

impl TextureInstance {
    fn draw(id: usize, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = size as f64 / 64.0;
        let offset = (rng.random_range(0.0..64.0) * scale, rng.random_range(0.0..64.0) * scale);
        let jitter = [rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)];
        Self { texture: TEXTURES[id], scale, offset, noise_seed: rng.random(), jitter }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let (x, y) = (x + self.offset.0, y + self.offset.1);
        let s = self.scale;
        let t = match self.texture.pattern {
            Pattern::Checker { cell } => {
                let c = cell * s;
                (((x / c).floor() + (y / c).floor()) as i64).rem_euclid(2) as f64
            }
            Pattern::Stripes { period, angle_deg } => {
                let a = angle_deg.to_radians();
                let u = x * a.cos() + y * a.sin();
                if (u / (period * s)).rem_euclid(1.0) < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            Pattern::Gradient { angle_deg } => {
                let a = angle_deg.to_radians();
                let u = (x * a.cos() + y * a.sin()) / (64.0 * s);
                (u.rem_euclid(2.0) - 1.0).abs()
            }
            Pattern::Noise { cell } => value_noise(self.noise_seed, x / (cell * s), y / (cell * s)),
            Pattern::Dots { spacing, radius } => {
                let sp = spacing * s;
                let (dx, dy) = (x.rem_euclid(sp) - sp / 2.0, y.rem_euclid(sp) - sp / 2.0);
                if dx * dx + dy * dy <= (radius * s).powi(2) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let (a, b) = (self.texture.a, self.texture.b);
        [0, 1, 2].map(|c| a[c] * t + b[c] * (1.0 - t) + self.jitter[c])
    }
}

// ---------------------------------------------------------------- leaf shape

/// Closed curve `r(θ) = r0·(1 + Σ a_k cos(kθ + φ_k))` for `k = 2, 3, 4`, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafCurve {
    pub cx: f64,
    pub cy: f64,
    pub r0: f64,
    pub harmonics: [(f64, f64); 3],
}

impl LeafCurve {
    fn draw(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let cx = s * rng.random_range(0.42..0.58);
        let cy = s * rng.random_range(0.42..0.58);
        let r0 = s * rng.random_range(0.25..0.33);
        let harmonics = [0.12, 0.07, 0.05].map(|amp: f64| (rng.random_range(-amp..amp), rng.random_range(0.0..2.0 * PI)));
        Self { cx, cy, r0, harmonics }
    }

    pub fn radius(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, &(a, phi))| a * ((i as f64 + 2.0) * theta + phi).cos())
            .sum();
        self.r0 * (1.0 + wobble)
    }

    /// Whether the center of pixel `(y, x)` lies on or inside the curve.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        (dx * dx + dy * dy).sqrt() <= self.radius(dy.atan2(dx))
    }

    pub fn rasterize(&self, height: usize, width: usize) -> MaskImage {
        MaskImage::from_fn(height, width, |y, x| self.contains(y, x))
    }
}

impl fmt::Display for LeafCurve {
    /// Semicolon-separated `cx;cy;r0;a2;φ2;a3;φ3;a4;φ4` with shortest round-trip floats.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{};{};{}", self.cx, self.cy, self.r0)?;
        for (a, phi) in self.harmonics {
            write!(f, ";{a};{phi}")?;
        }
        Ok(())
    }
}

impl FromStr for LeafCurve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(';')
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidInput(format!("bad curve parameters {s:?}: {e}")))?;
        if v.len() != 9 {
            return Err(Error::InvalidInput(format!("curve needs 9 parameters, got {}", v.len())));
        }
        Ok(Self { cx: v[0], cy: v[1], r0: v[2], harmonics: [(v[3], v[4]), (v[5], v[6]), (v[7], v[8])] })
    }
}

// ---------------------------------------------------------------- symptoms

fn mix(c: [f64; 3], target: [f64; 3], w: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| c[i] * (1.0 - w) + target[i] * w)
}

const YELLOW: [f64; 3] = [0.85, 0.8, 0.2];
const BROWN: [f64; 3] = [0.42, 0.26, 0.1];
const WHITE: [f64; 3] = [0.93, 0.93, 0.9];

enum Symptom {
    None,
    Spots { centers: Vec<(f64, f64)>, radius: f64, color: [f64; 3] },
    Squares { corners: Vec<(f64, f64)>, side: f64, color: [f64; 3] },
    Mosaic { cell: f64, seed: u64, strength: f64 },
    Tint { strength: f64 },
    Stripes { period: f64, angle: f64, phase: f64 },
}

fn points_in_leaf(curve: &LeafCurve, n: usize, margin: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(n);
    let mut guard = 0;
    while pts.len() < n && guard < 100 * n + 100 {
        guard += 1;
        let theta = rng.random_range(0.0..2.0 * PI);
        let r = curve.radius(theta) * rng.random::<f64>().sqrt();
        let r = (r - margin).max(0.0);
        pts.push((curve.cx + r * theta.cos(), curve.cy + r * theta.sin()));
    }
    pts
}

impl Symptom {
    fn draw(label: DiseaseLabel, curve: &LeafCurve, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        match label {
            DiseaseLabel::Healthy => Symptom::None,
            DiseaseLabel::Mysv => Symptom::Spots {
                centers: points_in_leaf(curve, rng.random_range(8..14), 0.0, rng),
                radius: rng.random_range(1.4..2.0) * scale,
                color: YELLOW,
            },
            DiseaseLabel::BrownSpot => Symptom::Spots {
                centers: points_in_leaf(curve, rng.random_range(3..6), 2.0 * scale, rng),
                radius: rng.random_range(3.0..4.0) * scale,
                color: BROWN,
            },
            DiseaseLabel::PowderyMildew => Symptom::Spots {
                centers: points_in_leaf(curve, rng.random_range(30..45), 0.0, rng),
                radius: 0.8 * scale,
                color: WHITE,
            },
            DiseaseLabel::DownyMildew => Symptom::Squares {
                corners: points_in_leaf(curve, rng.random_range(4..7), 2.0 * scale, rng),
                side: rng.random_range(4.0..6.0) * scale,
                color: YELLOW,
            },
            DiseaseLabel::Zymv => {
                Symptom::Mosaic { cell: rng.random_range(5.0..7.0) * scale, seed: rng.random(), strength: rng.random_range(0.3..0.4) }
            }
            DiseaseLabel::Cmv => Symptom::Tint { strength: rng.random_range(0.35..0.5) },
            DiseaseLabel::Wmv => Symptom::Stripes {
                period: rng.random_range(6.0..8.0) * scale,
                angle: rng.random_range(0.0..PI),
                phase: rng.random_range(0.0..1.0),
            },
        }
    }

    fn apply(&self, c: [f64; 3], px: f64, py: f64) -> [f64; 3] {
        match self {
            Symptom::None => c,
            Symptom::Spots { centers, radius, color } => {
                let hit = centers.iter().any(|&(x, y)| (px - x).powi(2) + (py - y).powi(2) <= radius * radius);
                if hit {
                    mix(c, *color, 0.85)
                } else {
                    c
                }
            }
            Symptom::Squares { corners, side, color } => {
                let half = side / 2.0;
                let hit = corners.iter().any(|&(x, y)| (px - x).abs() <= half && (py - y).abs() <= half);
                if hit {
                    mix(c, *color, 0.7)
                } else {
                    c
                }
            }
            Symptom::Mosaic { cell, seed, strength } => {
                let v = hash01(*seed, (px / cell).floor() as i64, (py / cell).floor() as i64);
                if v < 0.5 {
                    mix(c, [0.55, 0.85, 0.45], *strength)
                } else {
                    mix(c, [0.05, 0.3, 0.05], *strength)
                }
            }
            Symptom::Tint { strength } => mix(c, YELLOW, *strength),
            Symptom::Stripes { period, angle, phase } => {
                let u = px * angle.cos() + py * angle.sin();
                if ((u / period) + phase).rem_euclid(1.0) < 0.35 {
                    mix(c, [0.7, 0.85, 0.5], 0.6)
                } else {
                    c
                }
            }
        }
    }
}

// ---------------------------------------------------------------- rendering

/// Everything that determines one synthetic image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub label: DiseaseLabel,
    pub texture_id: usize,
    pub curve: LeafCurve,
    pub gamma: f64,
    /// Seed for texture offsets, leaf colour and symptom placement.
    pub seed: u64,
}

impl SampleSpec {
    /// Draws a leaf curve from `seed`; texture, label and gamma are chosen by the caller.
    pub fn new(label: DiseaseLabel, texture_id: usize, gamma: f64, size: usize, seed: u64) -> Self {
        let curve = LeafCurve::draw(size, &mut seeds::rng(seed, "leaf-curve", 0));
        Self { label, texture_id, curve, gamma, seed }
    }
}

/// Renders the image and its exact leaf mask.
pub fn render_sample(spec: &SampleSpec, size: usize) -> Result<(Image, MaskImage)> {
    if spec.texture_id >= TEXTURES.len() {
        return Err(Error::InvalidParameter(format!("unknown texture id {}", spec.texture_id)));
    }
    let scale = size as f64 / 64.0;
    let mut rng = seeds::rng(spec.seed, "render", 0);
    let background = TextureInstance::draw(spec.texture_id, size, &mut rng);
    let leaf = [rng.random_range(0.15..0.25), rng.random_range(0.52..0.66), rng.random_range(0.12..0.22)];
    let mut symptom_rng = seeds::rng(spec.seed, "symptom", 0);
    let symptom = Symptom::draw(spec.label, &spec.curve, scale, &mut symptom_rng);
    let mask = spec.curve.rasterize(size, size);
    let img = Image::from_fn(size, size, 3, |y, x, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let rgb = if mask.get(y, x) == 1.0 {
            let d = ((px - spec.curve.cx).powi(2) + (py - spec.curve.cy).powi(2)).sqrt() / spec.curve.r0;
            let shade = 1.0 - 0.15 * d.min(1.0);
            symptom.apply(leaf.map(|v| v * shade), px, py)
        } else {
            background.color(px, py)
        };
        rgb[c].clamp(0.0, 1.0).powf(spec.gamma) as f32
    });
    Ok((img, mask))
}

/// Random cyclic permutation of `0..n`, so no element maps to itself.
fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Class → test texture map under the shuffled policy.
pub fn test_texture_permutation(seed: u64) -> Vec<usize> {
    derangement(DiseaseLabel::COUNT, &mut seeds::rng(seed, "test-permutation", 0))
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Path relative to the corpus root.
    pub filename: String,
    pub split: String,
    pub class: String,
    pub texture_id: usize,
    pub curve_params: String,
    pub gamma_applied: f64,
    pub seed: u64,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?)
}

/// Locations of a generated corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub root: PathBuf,
    pub classification: PathBuf,
    pub classification_masks: PathBuf,
    pub segmentation: PathBuf,
    pub manifest: PathBuf,
}

impl CorpusPaths {
    pub fn under(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            classification: root.join("classification"),
            classification_masks: root.join("classification_masks"),
            segmentation: root.join("segmentation"),
            manifest: root.join(MANIFEST_NAME),
        }
    }

    /// Ground-truth leaf mask for a classification image path.
    pub fn mask_for(&self, image_path: &Path) -> Result<PathBuf> {
        let rel = image_path
            .strip_prefix(&self.classification)
            .map_err(|_| Error::InvalidInput(format!("{} is not inside the corpus", image_path.display())))?;
        Ok(self.classification_masks.join(rel).with_extension("png"))
    }
}

fn write_pair(root: &Path, image_rel: &str, mask_rel: &str, img: &Image, mask: &MaskImage) -> Result<()> {
    for rel in [image_rel, mask_rel] {
        let parent = root.join(rel);
        let parent = parent.parent().expect("relative file path");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_png(&root.join(image_rel))?;
    mask.save_png(&root.join(mask_rel))
}

/// Background texture for a classification image.
fn pick_texture(cfg: &SynthConfig, split: Split, label: DiseaseLabel, perm: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let canonical = rng.random::<f64>() < cfg.confound_strength;
    let distractors: Vec<usize> = DISTRACTOR_TEXTURES.collect();
    let held_out: Vec<usize> = HELD_OUT_TEXTURES.collect();
    let random_distractor = *distractors.choose(rng).expect("distractor pool");
    match (split, cfg.test_background_policy) {
        (Split::Test, TestBackgroundPolicy::HeldOutTextures) => *held_out.choose(rng).expect("held-out pool"),
        (Split::Test, TestBackgroundPolicy::Shuffled) if canonical => perm[label.index()],
        (_, _) if canonical && split != Split::Test => label.index(),
        _ => random_distractor,
    }
}

/// One image to be generated.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSample {
    /// `training`, `validation`, `test` or `segmentation`.
    pub split: String,
    /// Image path relative to the corpus root.
    pub image_rel: String,
    /// Mask path relative to the corpus root.
    pub mask_rel: String,
    pub spec: SampleSpec,
}

/// Every sample of the corpus, in generation order, without rendering anything.
pub fn plan_corpus(cfg: &SynthConfig) -> Result<Vec<PlannedSample>> {
    cfg.validate()?;
    let size = cfg.image_size;
    let perm = test_texture_permutation(cfg.rng_seed);
    let mut plan = Vec::new();
    for (s_idx, split) in Split::ALL.into_iter().enumerate() {
        for label in DiseaseLabel::ALL {
            for i in 0..cfg.per_class_counts.get(split) {
                let index = ((s_idx * DiseaseLabel::COUNT + label.index()) as u64) << 32 | i as u64;
                let seed = seeds::derive(cfg.rng_seed, "classification-image", index);
                let mut rng = seeds::rng(seed, "assign", 0);
                let texture_id = pick_texture(cfg, split, label, &perm, &mut rng);
                let (lo, hi) = cfg.gamma_range;
                let gamma = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let name = format!("{}/{}/{}_{i:05}.png", split.dir_name(), label.dir_name(), label.dir_name().to_lowercase());
                plan.push(PlannedSample {
                    split: split.dir_name().into(),
                    image_rel: format!("classification/{name}"),
                    mask_rel: format!("classification_masks/{name}"),
                    spec: SampleSpec::new(label, texture_id, gamma, size, seed),
                });
            }
        }
    }
    let seg_pool: Vec<usize> = CANONICAL_TEXTURES.chain(DISTRACTOR_TEXTURES).collect();
    for i in 0..cfg.segmentation_pairs {
        let seed = seeds::derive(cfg.rng_seed, "segmentation-image", i as u64);
        let mut rng = seeds::rng(seed, "assign", 0);
        let label = DiseaseLabel::ALL[rng.random_range(0..DiseaseLabel::COUNT)];
        let texture_id = *seg_pool.choose(&mut rng).expect("texture pool");
        plan.push(PlannedSample {
            split: SEGMENTATION_SPLIT.into(),
            image_rel: format!("segmentation/images/leaf_{i:05}.png"),
            mask_rel: format!("segmentation/masks/leaf_{i:05}.png"),
            spec: SampleSpec::new(label, texture_id, 1.0, size, seed),
        });
    }
    Ok(plan)
}

/// Writes both corpus layouts and the manifest; returns their locations.
pub fn generate_corpus(cfg: &SynthConfig, root: &Path) -> Result<CorpusPaths> {
    let plan = plan_corpus(cfg)?;
    let paths = CorpusPaths::under(root);
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rows = Vec::with_capacity(plan.len());
    for item in plan {
        let (img, mask) = render_sample(&item.spec, cfg.image_size)?;
        write_pair(root, &item.image_rel, &item.mask_rel, &img, &mask)?;
        rows.push(ManifestRow {
            filename: item.image_rel,
            split: item.split,
            class: item.spec.label.dir_name().into(),
            texture_id: item.spec.texture_id,
            curve_params: item.spec.curve.to_string(),
            gamma_applied: item.spec.gamma,
            seed: item.spec.seed,
        });
    }

    let tmp = paths.manifest.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, &paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    log::info!("wrote {} synthetic images under {}", rows.len(), root.display());
    Ok(paths)
}

// ---------------------------------------------------------------- audit

/// Plug-in mutual information (nats) between the two coordinates of `pairs`.
pub fn mutual_information(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut px: HashMap<usize, f64> = HashMap::new();
    let mut py: HashMap<usize, f64> = HashMap::new();
    for &(x, y) in pairs {
        *joint.entry((x, y)).or_default() += 1.0;
        *px.entry(x).or_default() += 1.0;
        *py.entry(y).or_default() += 1.0;
    }
    joint.iter().map(|(&(x, y), &c)| (c / n) * (c * n / (px[&x] * py[&y])).ln()).sum::<f64>().max(0.0)
}

/// MI between background texture and class, per split, from the manifest.
/// Fails when a manifest entry is missing on disk or the classification tree
/// holds images the manifest does not list.
pub fn corpus_confound_audit(root: &Path, manifest: &Path) -> Result<BTreeMap<String, f64>> {
    let rows = read_manifest(manifest)?;
    let mut listed = 0usize;
    for row in &rows {
        if !root.join(&row.filename).is_file() {
            return Err(Error::Ingestion { path: root.join(&row.filename), reason: "listed in manifest but missing".into() });
        }
        if row.split != SEGMENTATION_SPLIT {
            listed += 1;
        }
    }
    let on_disk = count_pngs(&root.join("classification"))?;
    if on_disk != listed {
        return Err(Error::Ingestion {
            path: manifest.to_path_buf(),
            reason: format!("manifest lists {listed} classification images, corpus holds {on_disk}"),
        });
    }
    let mut by_split: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for row in rows {
        let label: DiseaseLabel = row.class.parse()?;
        by_split.entry(row.split).or_default().push((row.texture_id, label.index()));
    }
    Ok(by_split.into_iter().map(|(k, v)| (k, mutual_information(&v))).collect())
}

fn count_pngs(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            n += count_pngs(&path)?;
        } else if path.extension().is_some_and(|e| e == "png") {
            n += 1;
        }
    }
    Ok(n)
}
