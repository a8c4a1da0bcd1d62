//! The operations behind each subcommand, with a fixed on-disk layout under
//! the configured output directory:
//!
//! ```text
//! <out>/aop/<variant>.safetensors          generator + discriminator + optimizer
//! <out>/aop/<variant>_losses.csv           epoch,d_loss,g_adv,content_loss
//! <out>/classifier/<arm>.safetensors       best-validation classifier weights
//! <out>/classifier/<arm>_history.csv       epoch,train_acc,val_acc,loss
//! <out>/report/metrics.json                the comparison report
//! <out>/report/*.csv, *.png                tables and figures
//! <out>/gradcam/<arm>/*.png                evidence overlays
//! ```
//!
//! Every directory that receives artifacts also gets a `provenance.json`
//! mapping each file name to the hash of the configuration that wrote it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Device;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::aop::{evaluate_segmentation, AopModel, AopTrainer, AopVariant, EpochLosses};
use crate::checkpoint::Checkpoint;
use crate::classifier::{train_classifier, ClassifierModel, EpochMetrics, Pretreatment, RawInput};
use crate::config::{GradcamTarget, RunConfig};
use crate::dataset::{find_images, load_classification_dataset, load_segmentation_dataset, ClassificationDataset, Split};
use crate::error::{Error, Result};
use crate::gradcam::{gradcam_images, overlap_score, overlay};
use crate::image::{center_crop_square, resize_mask, Image, MaskImage};
use crate::metrics::{confusion_matrix, ConfusionMatrix};
use crate::plots;
use crate::report::{
    git_revision, save_segmentation_csv, unix_now, ArmReport, GradcamSummary, MetricsReport, Provenance, SegmentationRow,
    RAW_ARM,
};
use crate::synth::{generate_corpus, CorpusPaths};

/// Written into every directory produced by `pretreat`.
pub const PRETREATED_MARKER: &str = ".aop_pretreated";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// One classifier arm of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    Raw,
    Aop(AopVariant),
}

impl Arm {
    /// Raw first, then the variants in `variants` order.
    pub fn all(variants: &[AopVariant]) -> Vec<Arm> {
        std::iter::once(Arm::Raw).chain(variants.iter().map(|&v| Arm::Aop(v))).collect()
    }

    /// Report name: `w/o AOP` or `AOP_<variant>`.
    pub fn name(self) -> String {
        match self {
            Arm::Raw => RAW_ARM.into(),
            Arm::Aop(v) => format!("AOP_{v}"),
        }
    }

    /// File-name form: `raw` or the variant name.
    pub fn slug(self) -> String {
        match self {
            Arm::Raw => "raw".into(),
            Arm::Aop(v) => v.name().into(),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "none" | RAW_ARM => Ok(Arm::Raw),
            other => other.strip_prefix("AOP_").unwrap_or(other).parse().map(Arm::Aop),
        }
    }
}

/// Where a run keeps its artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.paths.out_dir.clone() }
    }

    pub fn aop_dir(&self) -> PathBuf {
        self.root.join("aop")
    }

    pub fn aop_checkpoint(&self, v: AopVariant) -> PathBuf {
        self.aop_dir().join(format!("{v}.safetensors"))
    }

    pub fn aop_losses(&self, v: AopVariant) -> PathBuf {
        self.aop_dir().join(format!("{v}_losses.csv"))
    }

    pub fn classifier_dir(&self) -> PathBuf {
        self.root.join("classifier")
    }

    pub fn classifier_checkpoint(&self, arm: Arm) -> PathBuf {
        self.classifier_dir().join(format!("{}.safetensors", arm.slug()))
    }

    pub fn classifier_history(&self, arm: Arm) -> PathBuf {
        self.classifier_dir().join(format!("{}_history.csv", arm.slug()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn gradcam_dir(&self) -> PathBuf {
        self.root.join("gradcam")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Adds `file → hash` to the directory's provenance index.
pub fn record_provenance(file: &Path, config_hash: &str) -> Result<()> {
    let dir = file.parent().unwrap_or(Path::new("."));
    let index = dir.join(PROVENANCE_FILE);
    let mut entries: BTreeMap<String, String> = if index.is_file() {
        let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        serde_json::from_str(&text).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    entries.insert(name, config_hash.to_owned());
    std::fs::write(&index, serde_json::to_string_pretty(&entries)?).map_err(|e| Error::io(&index, e))
}

/// Hash recorded for `file` in its directory's provenance index.
pub fn provenance_of(file: &Path) -> Result<Option<String>> {
    let index = file.parent().unwrap_or(Path::new(".")).join(PROVENANCE_FILE);
    if !index.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let entries: BTreeMap<String, String> = serde_json::from_str(&text)?;
    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(entries.get(&name).cloned())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    record_provenance(path, config_hash)
}

fn save_png(img: &Image, path: &Path, config_hash: &str) -> Result<()> {
    img.save_png(path)?;
    record_provenance(path, config_hash)
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)?;
    record_provenance(path, &ck.config_hash)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

// ---------------------------------------------------------------- synth-gen

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub paths: CorpusPaths,
    /// SHA-256 of the manifest file, hex.
    pub manifest_sha256: String,
}

pub fn synth_gen(cfg: &RunConfig) -> Result<SynthOutcome> {
    let paths = generate_corpus(&cfg.synth, &cfg.paths.corpus_dir)?;
    record_provenance(&paths.manifest, &cfg.hash()?)?;
    let bytes = std::fs::read(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    Ok(SynthOutcome { paths, manifest_sha256: hex::encode(Sha256::digest(&bytes)) })
}

// ---------------------------------------------------------------- train-aop

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AopTrainOptions {
    /// Continue from the existing checkpoint instead of starting over.
    pub resume: bool,
    /// Stop after this many epochs in this invocation, e.g. to split a long run.
    pub max_new_epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AopOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<EpochLosses>,
}

/// Trains one variant, saving the checkpoint and loss table after every epoch.
pub fn train_aop(cfg: &RunConfig, variant: AopVariant, opts: AopTrainOptions, device: &Device) -> Result<AopOutcome> {
    let layout = RunLayout::new(cfg);
    let seg_dir = cfg.segmentation_dir();
    require(&seg_dir)?;
    let data = load_segmentation_dataset(&seg_dir, &cfg.split, cfg.data.segmentation_size)?;
    let run = cfg.aop_run(variant)?;
    let path = layout.aop_checkpoint(variant);
    let mut trainer = if opts.resume && path.is_file() {
        let ck = Checkpoint::load(&path, device)?;
        if ck.config_hash != run.config_hash {
            log::warn!("resuming {} written by config {}, current config is {}", path.display(), ck.config_hash, run.config_hash);
        }
        log::info!("resuming {variant} after epoch {}", ck.epoch);
        AopTrainer::resume(&run, &ck, device)?
    } else {
        AopTrainer::new(&run, device)?
    };
    ensure_dir(&layout.aop_dir())?;
    let mut budget = opts.max_new_epochs.unwrap_or(usize::MAX);
    while trainer.epoch() < run.train.epochs && budget > 0 {
        trainer.run_epoch(&data.train)?;
        save_checkpoint(&trainer.checkpoint()?, &path)?;
        write_csv(&layout.aop_losses(variant), trainer.history(), &run.config_hash)?;
        budget -= 1;
    }
    if !path.is_file() {
        save_checkpoint(&trainer.checkpoint()?, &path)?;
        write_csv(&layout.aop_losses(variant), trainer.history(), &run.config_hash)?;
    }
    Ok(AopOutcome { checkpoint: path, losses: trainer.history().to_vec() })
}

/// Loads a trained variant, failing with the missing path when absent.
pub fn load_aop(cfg: &RunConfig, variant: AopVariant, device: &Device) -> Result<AopModel> {
    let path = RunLayout::new(cfg).aop_checkpoint(variant);
    require(&path)?;
    let ck = Checkpoint::load(&path, device)?;
    let expected = cfg.aop_hash()?;
    if ck.config_hash != expected {
        log::warn!("{} was trained under config {}, current config is {expected}", path.display(), ck.config_hash);
    }
    AopModel::from_checkpoint(&ck, device)
}

/// The pretreatment an arm's classifier sees.
pub fn arm_pretreatment(cfg: &RunConfig, arm: Arm, device: &Device) -> Result<Box<dyn Pretreatment>> {
    Ok(match arm {
        Arm::Raw => Box::new(RawInput),
        Arm::Aop(v) => Box::new(load_aop(cfg, v, device)?),
    })
}

// ---------------------------------------------------------------- evaluate-seg

/// Pixel scores of each variant on the held-out segmentation pairs; writes `report/segmentation.csv`.
pub fn evaluate_seg(cfg: &RunConfig, variants: &[AopVariant], device: &Device) -> Result<Vec<SegmentationRow>> {
    let seg_dir = cfg.segmentation_dir();
    require(&seg_dir)?;
    let data = load_segmentation_dataset(&seg_dir, &cfg.split, cfg.data.segmentation_size)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let model = load_aop(cfg, v, device)?;
        let eval = evaluate_segmentation(&data.test, &model)?;
        log::info!("{v}: precision {:.4} recall {:.4} f1 {:.4}", eval.scores.precision, eval.scores.recall, eval.scores.f1);
        rows.push(SegmentationRow::new(v.name(), eval.scores));
    }
    let dir = RunLayout::new(cfg).report_dir();
    ensure_dir(&dir)?;
    let path = dir.join("segmentation.csv");
    save_segmentation_csv(&rows, &path)?;
    record_provenance(&path, &cfg.hash()?)?;
    Ok(rows)
}

// ---------------------------------------------------------------- train-classifier

pub fn load_classification(cfg: &RunConfig) -> Result<ClassificationDataset> {
    let dir = cfg.classification_dir();
    require(&dir)?;
    let data = load_classification_dataset(&dir, cfg.data.classification_size)?;
    for w in &data.report.warnings {
        log::warn!("{w}");
    }
    Ok(data)
}

#[derive(Debug, Clone)]
pub struct ClassifierOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Trains one arm from scratch and writes its checkpoint and history table.
pub fn train_classifier_arm(cfg: &RunConfig, arm: Arm, data: &ClassificationDataset, device: &Device) -> Result<ClassifierOutcome> {
    let pretreat = arm_pretreatment(cfg, arm, device)?;
    let arm_hash = cfg.arm_hash(&pretreat.tag())?;
    let run = train_classifier(
        &data.split(Split::Training),
        &data.split(Split::Validation),
        &cfg.classifier.spec,
        &cfg.classifier.train,
        &cfg.classifier.augmentation,
        pretreat.as_ref(),
        cfg.classifier_seeds(),
        &arm_hash,
        device,
    )?;
    let layout = RunLayout::new(cfg);
    ensure_dir(&layout.classifier_dir())?;
    let path = layout.classifier_checkpoint(arm);
    save_checkpoint(&run.best, &path)?;
    write_csv(&layout.classifier_history(arm), &run.history, &arm_hash)?;
    Ok(ClassifierOutcome { checkpoint: path, history: run.history, best_epoch: run.best_epoch })
}

/// The arm's stored classifier when it was trained under the current config, else a fresh one.
fn classifier_for_arm(
    cfg: &RunConfig,
    arm: Arm,
    data: &ClassificationDataset,
    device: &Device,
) -> Result<(ClassifierModel, Box<dyn Pretreatment>)> {
    let pretreat = arm_pretreatment(cfg, arm, device)?;
    let path = RunLayout::new(cfg).classifier_checkpoint(arm);
    let arm_hash = cfg.arm_hash(&pretreat.tag())?;
    if path.is_file() {
        let ck = Checkpoint::load(&path, device)?;
        if ck.config_hash == arm_hash {
            log::info!("reusing classifier {}", path.display());
            return Ok((ClassifierModel::from_checkpoint(&ck, device)?, pretreat));
        }
    }
    let out = train_classifier_arm(cfg, arm, data, device)?;
    let ck = Checkpoint::load(&out.checkpoint, device)?;
    Ok((ClassifierModel::from_checkpoint(&ck, device)?, pretreat))
}

fn stored_classifier(cfg: &RunConfig, arm: Arm, device: &Device) -> Result<(ClassifierModel, Box<dyn Pretreatment>)> {
    let path = RunLayout::new(cfg).classifier_checkpoint(arm);
    require(&path)?;
    let model = ClassifierModel::from_checkpoint(&Checkpoint::load(&path, device)?, device)?;
    Ok((model, arm_pretreatment(cfg, arm, device)?))
}

/// Confusion matrix of the model on every split.
pub fn evaluate_classifier(
    model: &ClassifierModel,
    pretreat: &dyn Pretreatment,
    data: &ClassificationDataset,
) -> Result<BTreeMap<Split, ConfusionMatrix>> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let examples = data.split(split);
        let images: Vec<Image> = examples.iter().map(|e| e.image().clone()).collect();
        let preds: Vec<_> = model.predict_batch(&images, pretreat)?.into_iter().map(|p| p.label).collect();
        let truths: Vec<_> = examples.iter().map(|e| e.label()).collect();
        out.insert(split, confusion_matrix(&preds, &truths)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- pretreat

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretreatOutcome {
    pub written: usize,
    /// The input directory had itself been produced by `pretreat`.
    pub input_was_pretreated: bool,
}

/// Pretreats every image under `input` into the same relative path under
/// `output`, as PNG at the classification size.
pub fn pretreat_dir(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path, device: &Device) -> Result<PretreatOutcome> {
    require(checkpoint)?;
    require(input)?;
    let model = AopModel::from_checkpoint(&Checkpoint::load(checkpoint, device)?, device)?;
    let input_was_pretreated = input.join(PRETREATED_MARKER).is_file();
    if input_was_pretreated {
        log::warn!("{} already holds pretreated images; pretreating twice is not a supported protocol", input.display());
    }
    let files = find_images(input)?;
    let size = cfg.data.classification_size;
    ensure_dir(output)?;
    for chunk in files.chunks(16) {
        let images = chunk.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?;
        let treated = Pretreatment::apply(&model, &images, size)?;
        for (src, img) in chunk.iter().zip(treated) {
            let rel = src.strip_prefix(input).expect("found under input");
            let dst = output.join(rel).with_extension("png");
            if let Some(parent) = dst.parent() {
                ensure_dir(parent)?;
            }
            img.save_png(&dst)?;
        }
    }
    let marker = output.join(PRETREATED_MARKER);
    std::fs::write(&marker, format!("{}\n", model.tag())).map_err(|e| Error::io(&marker, e))?;
    Ok(PretreatOutcome { written: files.len(), input_was_pretreated })
}

// ---------------------------------------------------------------- gradcam

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapRow {
    pub arm: String,
    pub image: String,
    pub target_class: String,
    pub overlap: f64,
    pub all_zero: bool,
}

/// Evenly spaced test examples, so every class is represented.
fn gradcam_sample(data: &ClassificationDataset, count: usize) -> Vec<crate::dataset::LabeledExample> {
    let test = data.split(Split::Test);
    let n = count.min(test.len());
    (0..n).map(|i| test[i * test.len() / n].clone()).collect()
}

/// Ground-truth leaf mask at `size × size` for an image path relative to the classification root.
fn leaf_mask_for(cfg: &RunConfig, image_path: &Path, size: usize) -> Result<MaskImage> {
    let class_root = cfg.classification_dir();
    let masks_root = class_root.parent().unwrap_or(Path::new(".")).join("classification_masks");
    let paths = CorpusPaths { classification: class_root, classification_masks: masks_root, ..CorpusPaths::under(&cfg.paths.corpus_dir) };
    let mask_path = paths.mask_for(&paths.classification.join(image_path))?;
    require(&mask_path)?;
    let mask = MaskImage::load_binary(&mask_path)?;
    let square = center_crop_square(&mask.as_image());
    Ok(resize_mask(&MaskImage::from_image(&square)?, size, size)?.binarize(0.5))
}

/// Evidence maps for one arm on the sampled test images; overlays go to `overlay_dir`.
fn gradcam_arm(
    cfg: &RunConfig,
    arm: Arm,
    model: &ClassifierModel,
    pretreat: &dyn Pretreatment,
    data: &ClassificationDataset,
    overlay_dir: &Path,
) -> Result<(GradcamSummary, Vec<OverlapRow>)> {
    let sample = gradcam_sample(data, cfg.gradcam.images);
    let images: Vec<Image> = sample.iter().map(|e| e.image().clone()).collect();
    let classes = match cfg.gradcam.target {
        GradcamTarget::True => sample.iter().map(|e| e.label()).collect(),
        GradcamTarget::Predicted => model.predict_batch(&images, pretreat)?.into_iter().map(|p| p.label).collect::<Vec<_>>(),
    };
    let maps = gradcam_images(&images, model, pretreat, &classes)?;
    let size = model.network().spec().input_size;
    let hash = cfg.hash()?;
    let prepared = model.prepare(&images[..cfg.gradcam.overlays.min(images.len())], pretreat)?;
    if !prepared.is_empty() {
        ensure_dir(overlay_dir)?;
    }
    let mut rows = Vec::with_capacity(sample.len());
    for (i, (ex, map)) in sample.iter().zip(&maps).enumerate() {
        let mask = leaf_mask_for(cfg, ex.path(), size)?;
        let score = overlap_score(map, &mask)?;
        if let Some(input) = prepared.get(i) {
            let name = format!("{i:03}_{}.png", map.target_class.dir_name());
            save_png(&overlay(input, map, 0.6)?, &overlay_dir.join(name), &hash)?;
        }
        rows.push(OverlapRow {
            arm: arm.name(),
            image: ex.path().display().to_string(),
            target_class: map.target_class.dir_name().into(),
            overlap: score,
            all_zero: map.all_zero,
        });
    }
    let mean = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.overlap).sum::<f64>() / rows.len() as f64 };
    let all_zero = rows.iter().filter(|r| r.all_zero).count();
    if all_zero > 0 {
        log::warn!("{arm}: {all_zero} evidence maps were zero everywhere");
    }
    Ok((GradcamSummary { images: rows.len(), mean_overlap: mean, all_zero }, rows))
}

/// Evidence maps for already trained arms; writes overlays and `gradcam/overlap.csv`.
pub fn gradcam(cfg: &RunConfig, arms: &[Arm], device: &Device) -> Result<BTreeMap<Arm, GradcamSummary>> {
    let data = load_classification(cfg)?;
    let dir = RunLayout::new(cfg).gradcam_dir();
    ensure_dir(&dir)?;
    let mut summaries = BTreeMap::new();
    let mut all_rows = Vec::new();
    for &arm in arms {
        let (model, pretreat) = stored_classifier(cfg, arm, device)?;
        let (summary, rows) = gradcam_arm(cfg, arm, &model, pretreat.as_ref(), &data, &dir.join(arm.slug()))?;
        summaries.insert(arm, summary);
        all_rows.extend(rows);
    }
    write_csv(&dir.join("overlap.csv"), &all_rows, &cfg.hash()?)?;
    Ok(summaries)
}

// ---------------------------------------------------------------- run-comparison

/// Trains (or reuses) and evaluates every arm, then writes the report, tables and figures.
pub fn run_comparison(cfg: &RunConfig, device: &Device) -> Result<MetricsReport> {
    let started = unix_now();
    let layout = RunLayout::new(cfg);
    let arms = Arm::all(&cfg.aop.variants);
    for &v in &cfg.aop.variants {
        require(&layout.aop_checkpoint(v))?;
    }
    let data = load_classification(cfg)?;
    let hash = cfg.hash()?;
    let classifier_hash = cfg.classifier_hash()?;
    let report_dir = layout.report_dir();
    ensure_dir(&report_dir)?;

    let mut reports = Vec::with_capacity(arms.len());
    let mut overlap_rows = Vec::new();
    for &arm in &arms {
        let (model, pretreat) = classifier_for_arm(cfg, arm, &data, device)?;
        let confusion = evaluate_classifier(&model, pretreat.as_ref(), &data)?;
        let mut report = ArmReport::new(&arm.name(), &pretreat.tag(), &classifier_hash, model.epoch(), confusion)?;
        let (summary, rows) =
            gradcam_arm(cfg, arm, &model, pretreat.as_ref(), &data, &layout.gradcam_dir().join(arm.slug()))?;
        report.gradcam = Some(summary);
        overlap_rows.extend(rows);
        log::info!(
            "{arm}: training {:.3} validation {:.3} test {:.3} gap {:.3} overlap {:.3}",
            report.accuracy.training,
            report.accuracy.validation,
            report.accuracy.test,
            report.gap,
            summary.mean_overlap
        );
        reports.push(report);
    }

    let segmentation = evaluate_seg(cfg, &cfg.aop.variants, device)?;
    let report = MetricsReport {
        arms: reports,
        segmentation,
        provenance: Provenance { config_hash: hash.clone(), git_revision: git_revision(), started_unix: started, finished_unix: unix_now() },
    };
    report.check_consistency()?;

    let json = report_dir.join("metrics.json");
    report.save_json(&json)?;
    record_provenance(&json, &hash)?;
    let acc = report_dir.join("accuracy.csv");
    report.save_accuracy_csv(&acc)?;
    record_provenance(&acc, &hash)?;
    write_csv(&report_dir.join("gradcam_overlap.csv"), &overlap_rows, &hash)?;
    for (arm, a) in arms.iter().zip(&report.arms) {
        for (split, c) in &a.confusion {
            save_png(&plots::confusion_heatmap(c, 24)?, &report_dir.join(format!("confusion_{}_{split}.png", arm.slug())), &hash)?;
        }
    }
    save_png(&plots::accuracy_bars(&report.arms)?, &report_dir.join("accuracy.png"), &hash)?;
    let overlaps: Vec<f64> = report.arms.iter().map(|a| a.gradcam.map_or(0.0, |g| g.mean_overlap)).collect();
    save_png(&plots::value_bars(&overlaps)?, &report_dir.join("gradcam_overlap.png"), &hash)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_round_trip() {
        for arm in Arm::all(&AopVariant::ALL) {
            assert_eq!(arm.name().parse::<Arm>().unwrap(), arm);
            assert_eq!(arm.slug().parse::<Arm>().unwrap(), arm);
        }
        assert_eq!(Arm::Aop(AopVariant::MaeProb).name(), "AOP_MAE_prob");
        assert!(matches!("AOP_XYZ".parse::<Arm>(), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn provenance_index_accumulates() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.png");
        record_provenance(&a, "h1").unwrap();
        record_provenance(&b, "h2").unwrap();
        record_provenance(&a, "h3").unwrap();
        assert_eq!(provenance_of(&a).unwrap().as_deref(), Some("h3"));
        assert_eq!(provenance_of(&b).unwrap().as_deref(), Some("h2"));
        assert_eq!(provenance_of(&dir.path().join("c")).unwrap(), None);
    }
}
