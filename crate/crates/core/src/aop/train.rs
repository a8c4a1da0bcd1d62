use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::AopModel;
use super::{
    AopVariant, ContentLoss, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, InferenceSettings, TrainConfigAop,
};
use crate::augment::{augment_for_aop, AopSample, AugmentationRecipe};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{DivergenceReport, Error, Result};
use crate::image::{Image, MaskImage, SegmentationPair};
use crate::losses::{self, SsimConfig};
use crate::nn::Adam;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub content_loss: f64,
}

/// Generator objective `g_adv + λ·content` with its parts kept for logging.
pub struct GeneratorObjective {
    pub total: Tensor,
    pub g_adv: Tensor,
    pub content: Tensor,
}

pub fn generator_objective(
    d_fake: &Tensor,
    generated: &Tensor,
    target: &Tensor,
    content: ContentLoss,
    content_weight: f64,
    ssim: &SsimConfig,
) -> Result<GeneratorObjective> {
    let g_adv = losses::generator_adversarial(d_fake)?;
    let content = match content {
        ContentLoss::Mae => losses::mae(generated, target)?,
        ContentLoss::Ssim => losses::ssim_loss(generated, target, ssim)?,
    };
    let total = (&g_adv + (&content * content_weight)?)?;
    Ok(GeneratorObjective { total, g_adv, content })
}

/// Target the generator learns to produce for one augmented sample.
pub(crate) fn sample_target(variant: AopVariant, sample: &AopSample) -> Result<Image> {
    match variant {
        AopVariant::MaeProb => Ok(sample.mask.as_image()),
        AopVariant::Mae | AopVariant::Ssim => super::apply_mask(&sample.clean, &sample.mask),
    }
}

fn mask_batch(masks: &[&MaskImage], device: &Device) -> Result<Tensor> {
    let imgs: Vec<Image> = masks.iter().map(|m| m.as_image()).collect();
    Image::batch_tensor(&imgs.iter().collect::<Vec<_>>(), device)
}

/// Alternating discriminator / generator optimization for one variant.
pub struct AopTrainer {
    variant: AopVariant,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    config: TrainConfigAop,
    recipe: AugmentationRecipe,
    ssim: SsimConfig,
    settings: InferenceSettings,
    augment_seed: u64,
    shuffle_seed: u64,
    config_hash: String,
    epoch: usize,
    history: Vec<EpochLosses>,
    device: Device,
}

/// Everything needed to start a run besides the data.
#[derive(Debug, Clone)]
pub struct AopRunSpec {
    pub variant: AopVariant,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub train: TrainConfigAop,
    pub recipe: AugmentationRecipe,
    pub ssim: SsimConfig,
    pub settings: InferenceSettings,
    pub init_seed: u64,
    pub augment_seed: u64,
    pub shuffle_seed: u64,
    pub config_hash: String,
}

impl AopTrainer {
    pub fn new(run: &AopRunSpec, device: &Device) -> Result<Self> {
        run.train.validate()?;
        run.recipe.validate()?;
        run.ssim.validate()?;
        let mut rng = seeds::rng(run.init_seed, "aop-init", 0);
        let generator = Generator::new(run.generator, run.variant.output_mode(), device, &mut rng)?;
        let discriminator =
            Discriminator::new(run.discriminator, 3 + run.variant.output_mode().channels(), device, &mut rng)?;
        let opt_g = Adam::new(generator.store(), run.train.learning_rate, run.train.beta1, run.train.beta2);
        let opt_d = Adam::new(discriminator.store(), run.train.learning_rate, run.train.beta1, run.train.beta2);
        Ok(Self {
            variant: run.variant,
            generator,
            discriminator,
            opt_g,
            opt_d,
            config: run.train,
            recipe: run.recipe.clone(),
            ssim: run.ssim,
            settings: run.settings,
            augment_seed: run.augment_seed,
            shuffle_seed: run.shuffle_seed,
            config_hash: run.config_hash.clone(),
            epoch: 0,
            history: Vec::new(),
            device: device.clone(),
        })
    }

    /// Restores weights, optimizer moments and the epoch counter from a checkpoint.
    pub fn resume(run: &AopRunSpec, ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Aop {
            return Err(Error::Checkpoint("not an AOP checkpoint".into()));
        }
        let variant: AopVariant = ckpt.meta_json("variant")?;
        if variant != run.variant {
            return Err(Error::Checkpoint(format!("checkpoint is for {variant}, run is for {}", run.variant)));
        }
        let mut t = Self::new(run, device)?;
        t.generator.store().load(&ckpt.section("generator"))?;
        t.discriminator.store().load(&ckpt.section("discriminator"))?;
        let opt = ckpt.section("optimizer");
        t.opt_g.load_state("generator", &opt)?;
        t.opt_d.load_state("discriminator", &opt)?;
        t.epoch = ckpt.epoch;
        t.history = ckpt.meta_json("history").unwrap_or_default();
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLosses] {
        &self.history
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    fn diverged(&self, step: usize, losses: &[(&str, f64)]) -> Error {
        Error::Divergence(Box::new(DivergenceReport {
            stage: format!("AOP {}", self.variant),
            epoch: self.epoch + 1,
            step,
            losses: losses.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }))
    }

    /// One optimization step on an already augmented minibatch; returns `(d_loss, g_adv, content)`.
    pub fn train_step(&mut self, batch: &[AopSample], step: usize) -> Result<(f64, f64, f64)> {
        let inputs: Vec<&Image> = batch.iter().map(|s| &s.input).collect();
        let input = Image::batch_tensor(&inputs, &self.device)?;
        let target = match self.variant {
            AopVariant::MaeProb => mask_batch(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>(), &self.device)?,
            _ => {
                let targets = batch.iter().map(|s| sample_target(self.variant, s)).collect::<Result<Vec<_>>>()?;
                Image::batch_tensor(&targets.iter().collect::<Vec<_>>(), &self.device)?
            }
        };

        let fake = self.generator.forward_t(&input, true)?;

        let d_real = self.discriminator.forward_t(&input, &target, true)?;
        let d_fake = self.discriminator.forward_t(&input, &fake.detach(), true)?;
        let d_loss = losses::discriminator_loss(&d_real, &d_fake)?;
        let d_val = losses::scalar(&d_loss)?;
        if !d_val.is_finite() {
            return Err(self.diverged(step, &[("d_loss", d_val)]));
        }
        self.opt_d.backward_step(&d_loss)?;

        let d_fake = self.discriminator.forward_t(&input, &fake, true)?;
        let obj = generator_objective(
            &d_fake,
            &fake,
            &target,
            self.variant.content_loss(),
            self.config.content_weight,
            &self.ssim,
        )?;
        let g_adv = losses::scalar(&obj.g_adv)?;
        let content = losses::scalar(&obj.content)?;
        if !g_adv.is_finite() || !content.is_finite() {
            return Err(self.diverged(step, &[("d_loss", d_val), ("g_adv", g_adv), ("content_loss", content)]));
        }
        let grads = obj.total.backward()?;
        self.opt_g
            .step(&grads)
            .map_err(|_| self.diverged(step, &[("d_loss", d_val), ("g_adv", g_adv), ("content_loss", content)]))?;
        Ok((d_val, g_adv, content))
    }

    /// Runs one epoch of shuffled minibatches with fresh augmentation draws.
    pub fn run_epoch(&mut self, pairs: &[SegmentationPair]) -> Result<EpochLosses> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("no training pairs".into()));
        }
        let epoch = self.epoch as u64;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seeds::rng(self.shuffle_seed, "aop-shuffle", epoch));
        let mut aug_rng = seeds::rng(self.augment_seed, "aop-augment", epoch);
        let (mut d_sum, mut g_sum, mut c_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| augment_for_aop(&pairs[i], &self.recipe, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let (d, g, c) = self.train_step(&batch, steps)?;
            d_sum += d;
            g_sum += g;
            c_sum += c;
            steps += 1;
        }
        self.epoch += 1;
        let n = steps as f64;
        let losses = EpochLosses { epoch: self.epoch, d_loss: d_sum / n, g_adv: g_sum / n, content_loss: c_sum / n };
        log::info!(
            "AOP {} epoch {}: d_loss {:.4} g_adv {:.4} content {:.4}",
            self.variant,
            losses.epoch,
            losses.d_loss,
            losses.g_adv,
            losses.content_loss
        );
        self.history.push(losses);
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            kind: CheckpointKind::Aop,
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            meta: Default::default(),
            tensors: Default::default(),
        };
        ck.set_meta_json("variant", &self.variant)?;
        ck.set_meta_json("generator_spec", self.generator.spec())?;
        ck.set_meta_json("discriminator_spec", self.discriminator.spec())?;
        ck.set_meta_json("train_config", &self.config)?;
        ck.set_meta_json("inference", &self.settings)?;
        ck.set_meta_json("history", &self.history)?;
        ck.insert_section("generator", self.generator.store().tensors());
        ck.insert_section("discriminator", self.discriminator.store().tensors());
        let mut opt = self.opt_g.state("generator");
        opt.extend(self.opt_d.state("discriminator"));
        ck.insert_section("optimizer", opt);
        Ok(ck)
    }

    /// Inference view sharing the current weights.
    pub fn model(&self) -> Result<AopModel> {
        AopModel::from_checkpoint(&self.checkpoint()?, &self.device)
    }
}

/// Trains for `run.train.epochs` epochs and returns the final checkpoint and loss curve.
pub fn train_aop(pairs: &[SegmentationPair], run: &AopRunSpec, device: &Device) -> Result<(Checkpoint, Vec<EpochLosses>)> {
    let mut trainer = AopTrainer::new(run, device)?;
    while trainer.epoch() < run.train.epochs {
        trainer.run_epoch(pairs)?;
    }
    Ok((trainer.checkpoint()?, trainer.history().to_vec()))
}

