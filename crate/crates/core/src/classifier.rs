//! VGG-16-shaped disease classifier with the reduced 1024 → 32 → 8 head,
//! its momentum-SGD training loop and prediction.

use std::path::PathBuf;

use candle_core::{Device, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aop::AopModel;
use crate::augment::{augment_for_classifier, AugmentationRecipe};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::dataset::{DiseaseLabel, LabeledExample};
use crate::error::{DivergenceReport, Error, Result};
use crate::image::{center_crop_square, resize_image, Image};
use crate::losses;
use crate::nn::{BatchNorm2d, Conv2d, Init, Linear, MomentumSgd, ParamStore};
use crate::seeds;

/// Convolutions per block and their full-width channel counts.
const VGG_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
const HEAD: [usize; 2] = [1024, 32];
const PREDICT_BATCH: usize = 64;

/// Tag recorded for classifiers trained on raw (center-cropped, resized) images.
pub const RAW_TAG: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum ClassifierInit {
    Random,
    /// Safetensors file with the convolutional stack; the head is always fresh.
    Pretrained(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    /// Scales every convolution width; 1.0 is the full VGG-16 stack.
    pub width_mult: f64,
    /// Square input side; must be a multiple of 32.
    pub input_size: usize,
    /// Batch normalization after every convolution.
    pub batch_norm: bool,
    pub init: ClassifierInit,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self { width_mult: 1.0, input_size: 224, batch_norm: false, init: ClassifierInit::Random }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0) || self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::InvalidParameter(format!("invalid classifier spec {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        VGG_BLOCKS.iter().map(|&(_, c)| ((c as f64 * self.width_mult).round() as usize).max(1)).collect()
    }

    /// Fields that define the architecture, without the initialization source.
    pub fn architecture(&self) -> (f64, usize, bool) {
        (self.width_mult, self.input_size, self.batch_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfigCls {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfigCls {
    fn default() -> Self {
        Self { learning_rate: 0.001, momentum: 0.9, batch_size: 32, epochs: 100 }
    }
}

impl TrainConfigCls {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter(format!("invalid classifier training config {self:?}")));
        }
        Ok(())
    }
}

struct ConvUnit {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

pub struct Classifier {
    spec: ClassifierSpec,
    store: ParamStore,
    blocks: Vec<Vec<ConvUnit>>,
    fc: Vec<Linear>,
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("block")
}

impl Classifier {
    pub fn new<R: rand::Rng + ?Sized>(spec: &ClassifierSpec, device: &Device, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(device);
        let widths = spec.widths();
        let mut blocks = Vec::with_capacity(VGG_BLOCKS.len());
        let mut c_in = 3;
        for (b, (&(n, _), &c)) in VGG_BLOCKS.iter().zip(&widths).enumerate() {
            let mut units = Vec::with_capacity(n);
            for i in 0..n {
                let name = format!("block{b}.conv{i}");
                let conv = Conv2d::new(&mut store, &name, c_in, c, 3, 1, 1, true, Init::Kaiming { fan_in: c_in * 9 }, rng)?;
                let norm = if spec.batch_norm { Some(BatchNorm2d::new(&mut store, &format!("{name}.bn"), c, rng)?) } else { None };
                units.push(ConvUnit { conv, norm });
                c_in = c;
            }
            blocks.push(units);
        }
        let side = spec.input_size / 32;
        let mut fc = Vec::with_capacity(3);
        let mut f_in = c_in * side * side;
        for (k, &f_out) in HEAD.iter().chain(std::iter::once(&DiseaseLabel::COUNT)).enumerate() {
            fc.push(Linear::new(&mut store, &format!("fc{k}"), f_in, f_out, Init::Kaiming { fan_in: f_in }, rng)?);
            f_in = f_out;
        }
        let net = Self { spec: spec.clone(), store, blocks, fc };
        if let ClassifierInit::Pretrained(path) = &spec.init {
            net.load_backbone(path)?;
        }
        Ok(net)
    }

    fn load_backbone(&self, path: &std::path::Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, self.store.device())?;
        let loaded = self.store.load_subset(&tensors.into_iter().collect(), is_backbone)?;
        log::info!("loaded {loaded} backbone tensors from {}", path.display());
        Ok(())
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Output of the last convolution (after its activation), before the final pooling.
    pub fn features_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.spec.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::InvalidInput(format!("classifier expects 3x{s}x{s} input, got {c}x{h}x{w}")));
        }
        let mut t = x.clone();
        let last = self.blocks.len() - 1;
        for (b, units) in self.blocks.iter().enumerate() {
            if b > 0 {
                t = t.max_pool2d(2)?;
            }
            for unit in units {
                t = unit.conv.forward(&t)?;
                if let Some(bn) = &unit.norm {
                    t = bn.forward_t(&t, train)?;
                }
                t = t.relu()?;
            }
            if b == last {
                break;
            }
        }
        Ok(t)
    }

    /// Final pooling and the fully connected head; returns pre-softmax logits.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let mut t = features.max_pool2d(2)?.flatten_from(1)?;
        let n = self.fc.len();
        for (k, fc) in self.fc.iter().enumerate() {
            t = fc.forward(&t)?;
            if k + 1 < n {
                t = t.relu()?;
            }
        }
        Ok(t)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.head(&self.features_t(x, train)?)
    }
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

/// Something applied to every image before the classifier sees it.
pub trait Pretreatment {
    /// Recorded in the checkpoint; prediction must use a pretreatment with the same tag.
    fn tag(&self) -> String;
    /// Turns raw images into `size × size` classifier inputs.
    fn apply(&self, images: &[Image], size: usize) -> Result<Vec<Image>>;
}

/// Square center crop and resize, nothing else.
pub struct RawInput;

pub fn prepare_input(img: &Image, size: usize) -> Result<Image> {
    resize_image(&center_crop_square(img), size, size)
}

impl Pretreatment for RawInput {
    fn tag(&self) -> String {
        RAW_TAG.into()
    }

    fn apply(&self, images: &[Image], size: usize) -> Result<Vec<Image>> {
        images.iter().map(|i| prepare_input(i, size)).collect()
    }
}

impl Pretreatment for AopModel {
    fn tag(&self) -> String {
        AopModel::tag(self)
    }

    fn apply(&self, images: &[Image], size: usize) -> Result<Vec<Image>> {
        self.pretreat_batch(images)?.iter().map(|i| resize_image(i, size, size)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub loss: f64,
}

/// Seeds for the three independent random streams of a classifier run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSeeds {
    pub init: u64,
    pub augment: u64,
    pub shuffle: u64,
}

pub struct ClassifierRun {
    /// Weights from the epoch with the best validation accuracy.
    pub best: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

fn labels_of(examples: &[LabeledExample]) -> Vec<u32> {
    examples.iter().map(|e| e.label().index() as u32).collect()
}

/// Applies the pretreatment once; it is deterministic, so this equals applying it on every visit.
pub fn pretreat_examples(examples: &[LabeledExample], pretreat: &dyn Pretreatment, size: usize) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(PREDICT_BATCH) {
        let imgs: Vec<Image> = chunk.iter().map(|e| e.image().clone()).collect();
        for (ex, img) in chunk.iter().zip(pretreat.apply(&imgs, size)?) {
            out.push(ex.with_image(img));
        }
    }
    Ok(out)
}

fn classifier_checkpoint(
    net: &Classifier,
    tag: &str,
    config_hash: &str,
    epoch: usize,
    cfg: &TrainConfigCls,
    history: &[EpochMetrics],
) -> Result<Checkpoint> {
    let mut ck = Checkpoint {
        kind: CheckpointKind::Classifier,
        epoch,
        config_hash: config_hash.to_owned(),
        meta: Default::default(),
        tensors: Default::default(),
    };
    ck.set_meta_json("spec", net.spec())?;
    ck.set_meta_json("pretreat", &tag)?;
    ck.set_meta_json("train_config", cfg)?;
    ck.set_meta_json("history", &history)?;
    ck.insert_section("classifier", net.store().tensors());
    Ok(ck)
}

/// Labels predicted in eval mode for already prepared inputs.
fn predict_prepared(net: &Classifier, images: &[&Image]) -> Result<Vec<(DiseaseLabel, Vec<f32>)>> {
    let device = net.store().device().clone();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_BATCH) {
        let probs = softmax(&net.forward_t(&Image::batch_tensor(chunk, &device)?, false)?)?;
        for row in probs.to_vec2::<f32>()? {
            let best = row.iter().enumerate().fold(0, |b, (i, &p)| if p > row[b] { i } else { b });
            out.push((DiseaseLabel::from_index(best).expect("eight outputs"), row));
        }
    }
    Ok(out)
}

fn accuracy_on(net: &Classifier, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let imgs: Vec<&Image> = examples.iter().map(|e| e.image()).collect();
    let preds = predict_prepared(net, &imgs)?;
    let hits = preds.iter().zip(examples).filter(|((p, _), e)| *p == e.label()).count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Trains with cross-entropy and momentum SGD at a constant learning rate,
/// keeping the weights of the best validation epoch (earliest on ties).
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    train: &[LabeledExample],
    val: &[LabeledExample],
    spec: &ClassifierSpec,
    cfg: &TrainConfigCls,
    recipe: &AugmentationRecipe,
    pretreat: &dyn Pretreatment,
    seeds_: ClassifierSeeds,
    config_hash: &str,
    device: &Device,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    recipe.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let tag = pretreat.tag();
    let size = spec.input_size;
    let train = pretreat_examples(train, pretreat, size)?;
    let val = pretreat_examples(val, pretreat, size)?;
    let labels = labels_of(&train);

    let net = Classifier::new(spec, device, &mut seeds::rng(seeds_.init, "cls-init", 0))?;
    let mut opt = MomentumSgd::new(net.store(), cfg.learning_rate, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::rng(seeds_.shuffle, "cls-shuffle", epoch as u64));
        let mut aug = seeds::rng(seeds_.augment, "cls-augment", epoch as u64);
        let (mut loss_sum, mut hits, mut steps) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs = chunk.iter().map(|&i| augment_for_classifier(&train[i], recipe, &mut aug)).collect::<Result<Vec<_>>>()?;
            let x = Image::batch_tensor(&imgs.iter().collect::<Vec<_>>(), device)?;
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = net.forward_t(&x, true)?;
            let loss = losses::cross_entropy(&logits, &y)?;
            let value = losses::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence(Box::new(DivergenceReport {
                    stage: format!("classifier ({tag})"),
                    epoch,
                    step: steps,
                    losses: vec![("loss".into(), value)],
                })));
            }
            opt.backward_step(&loss)?;
            let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
            hits += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
            loss_sum += value * chunk.len() as f64;
            steps += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            train_acc: hits as f64 / train.len() as f64,
            val_acc: accuracy_on(&net, &val)?,
            loss: loss_sum / train.len() as f64,
        };
        log::info!(
            "classifier ({tag}) epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            metrics.loss,
            metrics.train_acc,
            metrics.val_acc
        );
        history.push(metrics);
        if best.as_ref().is_none_or(|(acc, _, _)| metrics.val_acc > *acc) {
            best = Some((metrics.val_acc, epoch, classifier_checkpoint(&net, &tag, config_hash, epoch, cfg, &history)?));
        }
    }
    let (_, best_epoch, mut ck) = best.expect("at least one epoch");
    ck.set_meta_json("history", &history)?;
    Ok(ClassifierRun { best: ck, history, best_epoch })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: DiseaseLabel,
    pub probs: Vec<f32>,
}

/// A trained classifier together with the pretreatment tag it was trained under.
pub struct ClassifierModel {
    net: Classifier,
    pretreat_tag: String,
    config_hash: String,
    epoch: usize,
}

impl ClassifierModel {
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        if ck.kind != CheckpointKind::Classifier {
            return Err(Error::Checkpoint("expected a classifier checkpoint".into()));
        }
        let mut spec: ClassifierSpec = ck.meta_json("spec")?;
        // weights come from the checkpoint, not from the original init source
        spec.init = ClassifierInit::Random;
        let net = Classifier::new(&spec, device, &mut seeds::rng(0, "cls-load", 0))?;
        net.store().load(&ck.section("classifier"))?;
        Ok(Self { net, pretreat_tag: ck.meta_json("pretreat")?, config_hash: ck.config_hash.clone(), epoch: ck.epoch })
    }

    pub fn network(&self) -> &Classifier {
        &self.net
    }

    pub fn pretreat_tag(&self) -> &str {
        &self.pretreat_tag
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn check_tag(&self, pretreat: &dyn Pretreatment) -> Result<()> {
        let tag = pretreat.tag();
        if tag != self.pretreat_tag {
            return Err(Error::InvalidParameter(format!(
                "classifier was trained with pretreatment {:?} but {:?} was supplied",
                self.pretreat_tag, tag
            )));
        }
        Ok(())
    }

    /// Inputs exactly as the network sees them.
    pub fn prepare(&self, images: &[Image], pretreat: &dyn Pretreatment) -> Result<Vec<Image>> {
        self.check_tag(pretreat)?;
        pretreat.apply(images, self.net.spec().input_size)
    }

    pub fn predict_batch(&self, images: &[Image], pretreat: &dyn Pretreatment) -> Result<Vec<Prediction>> {
        let prepared = self.prepare(images, pretreat)?;
        Ok(predict_prepared(&self.net, &prepared.iter().collect::<Vec<_>>())?
            .into_iter()
            .map(|(label, probs)| Prediction { label, probs })
            .collect())
    }

    pub fn predict(&self, img: &Image, pretreat: &dyn Pretreatment) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(img), pretreat)?.remove(0))
    }
}
