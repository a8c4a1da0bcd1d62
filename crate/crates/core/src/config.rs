//! One declarative document that fixes every parameter and seed of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aop::{AopRunSpec, AopVariant, DiscriminatorSpec, GeneratorSpec, InferenceSettings, TrainConfigAop};
use crate::augment::AugmentationRecipe;
use crate::classifier::{ClassifierInit, ClassifierSeeds, ClassifierSpec, TrainConfigCls};
use crate::dataset::SplitSpec;
use crate::error::{Error, Result};
use crate::losses::SsimConfig;
use crate::synth::{SplitCounts, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Where commands write checkpoints, reports and plots.
    pub out_dir: PathBuf,
    /// Synthetic corpus root; also the default data source.
    pub corpus_dir: PathBuf,
    /// `images/` + `masks/` root; defaults to the corpus segmentation folder.
    pub segmentation_dir: Option<PathBuf>,
    /// `split/class/` root; defaults to the corpus classification folder.
    pub classification_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: "runs".into(), corpus_dir: "corpus".into(), segmentation_dir: None, classification_dir: None }
    }
}

/// Named seeds; each drives its own random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedsConfig {
    pub aop_init: u64,
    pub aop_augment: u64,
    pub aop_shuffle: u64,
    pub cls_init: u64,
    pub cls_augment: u64,
    pub cls_shuffle: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self { aop_init: 1, aop_augment: 2, aop_shuffle: 3, cls_init: 4, cls_augment: 5, cls_shuffle: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Side every segmentation pair is cropped and resized to on ingestion.
    pub segmentation_size: usize,
    /// Side every classification image is cropped and resized to on ingestion.
    pub classification_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { segmentation_size: 316, classification_size: 224 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AopConfig {
    pub variants: Vec<AopVariant>,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub train: TrainConfigAop,
    pub augmentation: AugmentationRecipe,
    pub inference: InferenceSettings,
}

impl Default for AopConfig {
    fn default() -> Self {
        Self {
            variants: AopVariant::ALL.to_vec(),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            train: TrainConfigAop::default(),
            augmentation: AugmentationRecipe::aop(),
            inference: InferenceSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub spec: ClassifierSpec,
    pub train: TrainConfigCls,
    pub augmentation: AugmentationRecipe,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { spec: ClassifierSpec::default(), train: TrainConfigCls::default(), augmentation: AugmentationRecipe::classifier() }
    }
}

/// Which class the evidence maps explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradcamTarget {
    Predicted,
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcamConfig {
    /// Test images scored per arm.
    pub images: usize,
    pub target: GradcamTarget,
    /// Number of overlay PNGs written per arm.
    pub overlays: usize,
}

impl Default for GradcamConfig {
    fn default() -> Self {
        Self { images: 100, target: GradcamTarget::Predicted, overlays: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub seeds: SeedsConfig,
    pub split: SplitSpec,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub ssim: SsimConfig,
    pub aop: AopConfig,
    pub classifier: ClassifierConfig,
    pub gradcam: GradcamConfig,
}

impl Default for RunConfig {
    /// Full-scale settings: 316 px pairs, 256 px generator crops, VGG-16 at 224 px.
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            seeds: SeedsConfig::default(),
            split: SplitSpec::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            ssim: SsimConfig::default(),
            aop: AopConfig::default(),
            classifier: ClassifierConfig::default(),
            gradcam: GradcamConfig::default(),
        }
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON form.
pub fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// What fixes a classifier arm apart from its pretreatment.
#[derive(Serialize)]
struct ClassifierArmKey<'a> {
    classifier: &'a ClassifierConfig,
    classification_size: usize,
    init: u64,
    augment: u64,
    shuffle: u64,
    pretreat: Option<&'a str>,
}

impl RunConfig {
    /// The 64 px configuration used for CPU-scale experiments.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig { segmentation_size: 64, classification_size: 64 };
        cfg.synth = SynthConfig {
            image_size: 64,
            per_class_counts: SplitCounts { training: 400, validation: 100, test: 100 },
            segmentation_pairs: 1000,
            ..SynthConfig::default()
        };
        cfg.aop.generator = GeneratorSpec { depth: 4, base_channels: 8, max_channels: 64 };
        cfg.aop.discriminator = DiscriminatorSpec { depth: 5, base_channels: 8, max_channels: 64 };
        cfg.aop.train = TrainConfigAop { learning_rate: 1e-3, epochs: 10, ..TrainConfigAop::default() };
        cfg.aop.augmentation = AugmentationRecipe { crop_size: None, ..AugmentationRecipe::aop() };
        cfg.aop.inference = InferenceSettings { working_size: 64, ..InferenceSettings::default() };
        cfg.classifier.spec =
            ClassifierSpec { width_mult: 1.0 / 16.0, input_size: 64, batch_norm: true, init: ClassifierInit::Random };
        cfg.classifier.train = TrainConfigCls { learning_rate: 0.01, epochs: 10, ..TrainConfigCls::default() };
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.synth.validate()?;
        self.ssim.validate()?;
        self.aop.generator.validate()?;
        self.aop.discriminator.validate()?;
        self.aop.train.validate()?;
        self.aop.augmentation.validate()?;
        self.classifier.spec.validate()?;
        self.classifier.train.validate()?;
        self.classifier.augmentation.validate()?;
        if self.aop.variants.is_empty() {
            return Err(Error::Config("at least one AOP variant is required".into()));
        }
        let ws = self.aop.inference.working_size;
        if ws == 0 || ws % self.aop.generator.size_multiple() != 0 {
            return Err(Error::Config(format!(
                "working size {ws} must be a positive multiple of {}",
                self.aop.generator.size_multiple()
            )));
        }
        if self.data.segmentation_size == 0 || self.data.classification_size == 0 {
            return Err(Error::Config("ingestion sizes must be positive".into()));
        }
        Ok(())
    }

    /// Replaces every named seed, including the corpus seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = SeedsConfig {
            aop_init: seed,
            aop_augment: seed,
            aop_shuffle: seed,
            cls_init: seed,
            cls_augment: seed,
            cls_shuffle: seed,
        };
        self.split.rng_seed = seed;
        self.synth.rng_seed = seed;
        self
    }

    pub fn hash(&self) -> Result<String> {
        hash_of(self)
    }

    pub fn segmentation_dir(&self) -> PathBuf {
        self.paths.segmentation_dir.clone().unwrap_or_else(|| self.paths.corpus_dir.join(crate::synth::SEGMENTATION_SPLIT))
    }

    pub fn classification_dir(&self) -> PathBuf {
        self.paths.classification_dir.clone().unwrap_or_else(|| self.paths.corpus_dir.join("classification"))
    }

    pub fn aop_run(&self, variant: AopVariant) -> Result<AopRunSpec> {
        Ok(AopRunSpec {
            variant,
            generator: self.aop.generator,
            discriminator: self.aop.discriminator,
            train: self.aop.train,
            recipe: self.aop.augmentation.clone(),
            ssim: self.ssim,
            settings: self.aop.inference,
            init_seed: self.seeds.aop_init,
            augment_seed: self.seeds.aop_augment,
            shuffle_seed: self.seeds.aop_shuffle,
            config_hash: self.aop_hash()?,
        })
    }

    /// Hash of everything an AOP checkpoint depends on.
    pub fn aop_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            aop: &'a AopConfig,
            ssim: &'a SsimConfig,
            split: &'a SplitSpec,
            segmentation_size: usize,
            seeds: (u64, u64, u64),
        }
        let s = &self.seeds;
        hash_of(&Key {
            aop: &self.aop,
            ssim: &self.ssim,
            split: &self.split,
            segmentation_size: self.data.segmentation_size,
            seeds: (s.aop_init, s.aop_augment, s.aop_shuffle),
        })
    }

    pub fn classifier_seeds(&self) -> ClassifierSeeds {
        ClassifierSeeds { init: self.seeds.cls_init, augment: self.seeds.cls_augment, shuffle: self.seeds.cls_shuffle }
    }

    fn arm_key<'a>(&'a self, pretreat: Option<&'a str>) -> ClassifierArmKey<'a> {
        ClassifierArmKey {
            classifier: &self.classifier,
            classification_size: self.data.classification_size,
            init: self.seeds.cls_init,
            augment: self.seeds.cls_augment,
            shuffle: self.seeds.cls_shuffle,
            pretreat,
        }
    }

    /// Hash of everything a classifier arm depends on except its pretreatment.
    pub fn classifier_hash(&self) -> Result<String> {
        hash_of(&self.arm_key(None))
    }

    /// Hash of a classifier arm including its pretreatment tag.
    pub fn arm_hash(&self, pretreat_tag: &str) -> Result<String> {
        hash_of(&self.arm_key(Some(pretreat_tag)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_desk_file_matches_desk() {
        let text = include_str!("../../../configs/desk.toml");
        assert_eq!(RunConfig::from_toml_str(text).unwrap(), RunConfig::desk());
    }

    #[test]
    fn defaults_follow_full_scale_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.aop.train.learning_rate, 2e-4);
        assert_eq!(cfg.aop.train.content_weight, 100.0);
        assert_eq!(cfg.classifier.train.batch_size, 32);
        assert_eq!(cfg.classifier.spec.input_size, 224);
        assert_eq!(cfg.aop.augmentation.crop_size, Some(256));
        assert_eq!(cfg.split.seg_train_fraction, 0.8);
        cfg.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_documents() {
        let desk = RunConfig::desk();
        let text = desk.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), desk);
        let partial = RunConfig::from_toml_str("[classifier.train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.classifier.train.epochs, 3);
        assert_eq!(partial.classifier.train.learning_rate, 0.001);
        assert!(RunConfig::from_toml_str("[aop.train]\nlearning_rate = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("not toml at all [").is_err());
    }

    #[test]
    fn hashes_track_content_and_ignore_pretreatment_where_asked() {
        let a = RunConfig::desk();
        let mut b = RunConfig::desk();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.classifier.train.epochs += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.classifier_hash().unwrap(), b.classifier_hash().unwrap());
        // AOP settings do not enter the classifier hash
        let mut c = RunConfig::desk();
        c.aop.train.epochs += 1;
        assert_eq!(a.classifier_hash().unwrap(), c.classifier_hash().unwrap());
        assert_ne!(a.aop_hash().unwrap(), c.aop_hash().unwrap());
        assert_eq!(a.aop_hash().unwrap(), b.aop_hash().unwrap());
        assert_ne!(a.arm_hash("none").unwrap(), a.arm_hash("aop:SSIM:x").unwrap());
        assert_eq!(a.classifier_hash().unwrap().len(), 16);
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let cfg = RunConfig::desk().with_seed(42);
        let s = cfg.seeds;
        assert!([s.aop_init, s.aop_augment, s.aop_shuffle, s.cls_init, s.cls_augment, s.cls_shuffle].iter().all(|&v| v == 42));
        assert_eq!((cfg.split.rng_seed, cfg.synth.rng_seed), (42, 42));
    }
}
